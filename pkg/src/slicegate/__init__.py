"""slicegate: temporally-gated adapter for prompt-conditioned slice segmentation."""

__version__ = "0.1.0"
