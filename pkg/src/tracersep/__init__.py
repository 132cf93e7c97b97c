"""Dual-tracer PET separation: texture-mask conditioning, compact latent
priors, prior-space diffusion, and a transposed-attention transformer U-net,
with a synthetic phantom corpus and quality-metric suite."""

__version__ = "0.1.0"
