"""OptiWing toolkit: latent diffusion inverse design for 3D wings."""

__version__ = "0.1.0"
