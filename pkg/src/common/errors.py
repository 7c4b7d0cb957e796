#!/usr/bin/env python3
"""
Error types for the stereo/segmentation coupling toolkit
Every rejection raised by the library derives from StereoSegError
"""

from typing import Any, Dict, Optional


class StereoSegError(Exception):
    """Base class for all library errors"""


class SceneSpecError(StereoSegError, ValueError):
    """A SceneSpec violates its invariants"""


class SampleIOError(StereoSegError):
    """A sample could not be read from or written to disk"""


class ShapeMismatchError(StereoSegError, ValueError):
    """Two arrays that must line up do not"""


class DisparityRangeError(StereoSegError, ValueError):
    """A disparity value or search range is out of its legal domain"""


class ConfigError(StereoSegError, ValueError):
    """Bad configuration key, value or grid toggle"""


class CheckpointError(StereoSegError):
    """Checkpoint missing, unreadable or incompatible with the dataset"""


class GradCheckError(StereoSegError):
    """Finite-difference check could not be evaluated"""


class NonFiniteError(StereoSegError):
    """A loss term or tensor became NaN/inf"""

    def __init__(self, term: str, message: str = "",
                 breakdown: Optional[Dict[str, Any]] = None):
        self.term = term
        self.breakdown = breakdown or {}
        super().__init__(message or f"non-finite value in term '{term}'")


class LabelRangeError(StereoSegError, ValueError):
    """A class label outside [0, C) that is not the ignore index"""
