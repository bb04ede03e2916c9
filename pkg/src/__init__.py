"""Spatial QA prompting toolkit for 3D indoor scenes"""

__version__ = "0.1.0"
