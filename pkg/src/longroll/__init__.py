"""Toy-scale controllable long-video diffusion: synthetic scenes, a frame
autoencoder, a controlled latent video denoiser, staged training and
autoregressive rollout with seam/drift evaluation."""

__version__ = "0.1.0"
