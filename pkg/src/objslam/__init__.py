"""Object-level visual-inertial dynamic SLAM with a synthetic verification stack."""

__version__ = "0.1.0"
