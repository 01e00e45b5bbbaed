"""Few-shot acoustic environment identification on simulated shoebox rooms."""

__version__ = "0.1.0"
