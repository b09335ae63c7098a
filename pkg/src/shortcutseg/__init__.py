"""Shortcut-learning laboratory for image segmentation."""
