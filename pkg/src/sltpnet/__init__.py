"""3-D squeeze-and-excitation CNN for lung texture pattern classification."""
__version__ = "0.1.0"
