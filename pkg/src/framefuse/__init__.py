"""Full-frame video stabilization by warping and fusing neighboring frames."""

__version__ = "0.1.0"
