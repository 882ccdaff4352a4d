"""Semantic-tree-guided deblurring with a co-trained captioning branch."""

__version__ = "0.1.0"
