"""Reuse a progressive-GAN discriminator as a deepfake detector fine-tuned on diffusion fakes."""

__version__ = "0.1.0"
