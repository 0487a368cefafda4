"""Video concept bottleneck model on a small numpy autodiff tape."""

__version__ = "0.1.0"
