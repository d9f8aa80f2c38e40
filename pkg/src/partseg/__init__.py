"""Part segmentation refinement: conditional RBM shape prior, dense CRF, multi-scale fusion."""

__version__ = "0.1.0"
