"""Online instance association, consistent contrastive training and pseudo-video generation."""

__version__ = "0.1.0"
