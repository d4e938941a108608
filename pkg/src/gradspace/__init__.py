"""Per-sample gradient features, outer-product metrics, and GradNet classifiers."""

__version__ = "0.1.0"
