"""Flash X-ray imaging analysis pipeline."""

__version__ = "0.1.0"
