"""Visual-to-audio embedding translation: regression and diffusion mappers."""

__version__ = "0.1.0"
