"""Pelvis alignment and height normalization of pose sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHeightError, NormalizationError
from .pose_io import DEFAULT_C_MIN, LEFT_HIP, RIGHT_HIP, PoseSequence, validity_mask

STANDARD_HEIGHT = 128.0
_MIN_HEIGHT = 1e-9


@dataclass
class NormalizedSequence:
    """Keypoints in hip-centred coordinates scaled to a 128-unit body height.

    ``keypoints`` keeps the (T, 17, 3) layout; confidences are untouched.
    ``per_frame_offsets`` holds the (dx, dy) translation applied to each frame
    before scaling.
    """

    keypoints: np.ndarray
    scale: float
    per_frame_offsets: np.ndarray
    subject_id: str = ""
    label: str = "negative"

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]


def raw_height(keypoints: np.ndarray, c_min: float = DEFAULT_C_MIN) -> float:
    """Median over frames of the vertical extent of valid keypoints."""
    extents = []
    for frame in keypoints:
        ys = frame[validity_mask(frame, c_min), 1]
        extents.append(ys.max() - ys.min())
    return float(np.median(extents))


def normalize_sequence(seq: PoseSequence, c_min: float = DEFAULT_C_MIN) -> NormalizedSequence:
    """Translate each frame's hip midpoint to the origin, then apply one
    sequence-level scale so the median valid-keypoint height is 128."""
    kp = np.array(seq.keypoints, dtype=np.float64)
    valid = validity_mask(kp, c_min)
    for t in range(kp.shape[0]):
        if not (valid[t, LEFT_HIP] and valid[t, RIGHT_HIP]):
            raise NormalizationError(t)

    mid = 0.5 * (kp[:, LEFT_HIP, :2] + kp[:, RIGHT_HIP, :2])
    offsets = -mid
    kp[:, :, :2] += offsets[:, None, :]

    h = raw_height(kp, c_min)
    if not h > _MIN_HEIGHT:
        raise DegenerateHeightError(f"sequence height {h} is degenerate")
    scale = STANDARD_HEIGHT / h
    kp[:, :, :2] *= scale
    return NormalizedSequence(kp, scale, offsets, seq.subject_id, seq.label)


def as_pose_sequence(norm: NormalizedSequence) -> PoseSequence:
    return PoseSequence(norm.keypoints.copy(), norm.subject_id, norm.label)
