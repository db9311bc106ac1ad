"""Bottom-up discovery of training subsets with simple local structure."""

__version__ = "0.1.0"
