"""mergelab: a desk-scale laboratory for weight-space model merging on MLPs."""

__version__ = "0.1.0"
