"""Joint stereo matching / semantic segmentation network."""
