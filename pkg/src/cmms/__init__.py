"""Desk-scale RGB-D salient object detection.

Two-stream feature pyramid with per-level cross-modality feature
modulation (cmFM), adaptive feature selection (AFS), and
saliency-guided position-edge attention (sg-PEA), trained with deep
side supervision on synthetic RGB-D scenes.
"""

__version__ = "0.1.0"
