"""Non-parallel voice conversion and two-view feature augmentation, desk scale."""

__version__ = "0.1.0"
