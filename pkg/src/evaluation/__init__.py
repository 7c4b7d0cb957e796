"""Segmentation and stereo metrics."""
