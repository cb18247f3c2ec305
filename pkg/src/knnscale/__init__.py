"""kNN conditional mean and scale estimation."""

__version__ = "0.1.0"
