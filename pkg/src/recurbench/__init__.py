"""Workbench for segment-recurrent long-document transformers."""
__version__ = "0.1.0"
