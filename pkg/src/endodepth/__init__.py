"""Self-supervised monocular depth and pose estimation for endoscopy-style video."""

__version__ = "0.1.0"
