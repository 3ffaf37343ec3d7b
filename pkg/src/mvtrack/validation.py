"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch, ValidationError
from .simulator import Sequence


def check_sequence(X, min_frames: int = 1) -> Sequence:
    """Accept a Sequence or a dataset directory; return a validated Sequence."""
    if isinstance(X, (str, Path)):
        from .io import load_dataset

        X = load_dataset(X)
    if not isinstance(X, Sequence):
        raise ValidationError(f"expected a Sequence or dataset directory, got {type(X).__name__}")
    if len(X) < min_frames:
        raise FormatError(f"need at least {min_frames} frames, got {len(X)}")
    n = X.num_cameras
    for frame in X.frames:
        if len(frame.images) != n:
            raise ShapeMismatch(f"frame {frame.index}: {len(frame.images)} images for {n} cameras")
        for img, calib in zip(frame.images, X.calibs):
            if np.shape(img) != (calib.image_height, calib.image_width, 3):
                raise ShapeMismatch(f"frame {frame.index}: image {np.shape(img)} does not match its calibration")
    indices = [f.index for f in X.frames]
    if any(b != a + 1 for a, b in zip(indices, indices[1:])):
        raise FormatError("frames must be consecutive and ascending")
    return X


def check_rows(rows, what: str = "rows") -> list:
    """(frame, id, x, y) rows as a list of tuples with int frame/id and float coordinates."""
    out = []
    for n, row in enumerate(rows):
        try:
            frame, tid, x, y = row
            out.append((int(frame), int(tid), float(x), float(y)))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{what} row {n}: expected (frame, id, x, y), got {row!r}") from exc
    return out
