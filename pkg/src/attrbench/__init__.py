"""Attribution-heatmap workbench for small 3D CNN classifiers."""

__version__ = "0.1.0"
