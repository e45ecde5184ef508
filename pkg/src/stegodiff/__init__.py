"""Hide images in pixel-space diffusion models by editing the score function at a secret timestep."""

__version__ = "0.1.0"
