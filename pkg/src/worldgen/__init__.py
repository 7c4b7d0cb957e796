"""Synthetic stereo scenes and KITTI-format sample I/O."""
