"""tumorscope: scratch CNN, deep-feature classifiers and Grad-CAM localization."""

__version__ = "0.1.0"
