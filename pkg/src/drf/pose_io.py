"""COCO-17 pose sequences and their JSONL file format.

A sequence file is UTF-8 JSONL. The first line is a header::

    {"subject_id": "s001", "label": "negative", "num_frames": 2}

followed by one line per frame::

    {"kp": [[x, y, c], ... 17 triplets ...]}

Coordinates are image pixels (+x right, +y down), ``c`` is the detector
confidence in [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import PoseIOError, PoseParseError, PoseSchemaError, PoseValidationError

NUM_KEYPOINTS = 17

COCO_KEYPOINTS = (
    "nose",
    "left_eye", "right_eye",
    "left_ear", "right_ear",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)

LEFT_HIP, RIGHT_HIP = 11, 12

# index -> mirrored index (left <-> right, nose fixed)
FLIP_INDEX = np.array([0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15])

# integer ids are internal only; files carry the strings
LABELS = ("negative", "neutral", "positive")
LABEL_TO_ID = {name: i for i, name in enumerate(LABELS)}

DEFAULT_C_MIN = 0.3

PathLike = Union[str, Path]


@dataclass
class PoseSequence:
    """Ordered frames of 17 keypoints for one walking clip.

    ``keypoints`` has shape (num_frames, 17, 3) holding ``(x, y, c)``.
    """

    keypoints: np.ndarray
    subject_id: str
    label: str

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.ndim != 3 or kp.shape[1:] != (NUM_KEYPOINTS, 3):
            raise ValueError(f"keypoints must have shape (T, 17, 3), got {kp.shape}")
        if kp.shape[0] < 1:
            raise ValueError("a pose sequence needs at least one frame")
        if self.label not in LABEL_TO_ID:
            raise ValueError(f"unknown label {self.label!r}")
        self.keypoints = kp

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def label_id(self) -> int:
        return LABEL_TO_ID[self.label]

    def frame(self, t: int) -> np.ndarray:
        return self.keypoints[t]


def validity_mask(frame: np.ndarray, c_min: float = DEFAULT_C_MIN) -> np.ndarray:
    """Boolean (17,) mask, true where confidence >= c_min (inclusive)."""
    frame = np.asarray(frame)
    return frame[..., 2] >= c_min


def _header_line(seq: PoseSequence) -> str:
    return json.dumps(
        {"subject_id": seq.subject_id, "label": seq.label, "num_frames": seq.num_frames}
    )


def _frame_line(frame: np.ndarray) -> str:
    return json.dumps({"kp": [[float(v) for v in row] for row in frame]})


def dumps_sequence(seq: PoseSequence) -> str:
    lines = [_header_line(seq)]
    lines.extend(_frame_line(f) for f in seq.keypoints)
    return "\n".join(lines) + "\n"


def save_sequence(seq: PoseSequence, path: PathLike) -> None:
    if seq.num_frames < 1:
        raise ValueError("refusing to write an empty sequence")
    text = dumps_sequence(seq)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise PoseIOError(f"cannot write {path}: {exc}") from exc


def _parse_frame(obj, lineno: int) -> np.ndarray:
    if not isinstance(obj, dict) or "kp" not in obj:
        raise PoseSchemaError(lineno, "frame line must be an object with a 'kp' key")
    kp = obj["kp"]
    if not isinstance(kp, list) or len(kp) != NUM_KEYPOINTS:
        n = len(kp) if isinstance(kp, list) else type(kp).__name__
        raise PoseSchemaError(lineno, f"expected 17 keypoints, got {n}")
    out = np.empty((NUM_KEYPOINTS, 3))
    for k, triplet in enumerate(kp):
        if not isinstance(triplet, list) or len(triplet) != 3:
            raise PoseSchemaError(lineno, f"keypoint {k} is not an [x, y, c] triplet")
        for j, v in enumerate(triplet):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise PoseSchemaError(lineno, f"keypoint {k} has a non-numeric entry")
            if not math.isfinite(v):
                raise PoseValidationError(lineno, f"keypoint {k} has a non-finite entry")
            out[k, j] = v
        if not 0.0 <= out[k, 2] <= 1.0:
            raise PoseValidationError(lineno, f"keypoint {k} confidence {out[k, 2]} outside [0, 1]")
    return out


def loads_sequence(text: str) -> PoseSequence:
    lines = text.splitlines()
    if not lines:
        raise PoseSchemaError(1, "empty file")
    parsed = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            if i == len(lines):
                break
            raise PoseParseError(i, "blank line")
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise PoseParseError(i, f"invalid JSON ({exc.msg})") from None

    header = parsed[0]
    if not isinstance(header, dict) or not {"subject_id", "label", "num_frames"} <= header.keys():
        raise PoseSchemaError(1, "header must have subject_id, label and num_frames")
    if header["label"] not in LABEL_TO_ID:
        raise PoseValidationError(1, f"unknown label {header['label']!r}")
    if not isinstance(header["subject_id"], str):
        raise PoseSchemaError(1, "subject_id must be a string")
    n = header["num_frames"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise PoseSchemaError(1, "num_frames must be a positive integer")
    if len(parsed) - 1 != n:
        raise PoseSchemaError(len(parsed), f"header declares {n} frames, file has {len(parsed) - 1}")

    frames = np.stack([_parse_frame(obj, i) for i, obj in enumerate(parsed[1:], start=2)])
    return PoseSequence(frames, header["subject_id"], header["label"])


def load_sequence(path: PathLike) -> PoseSequence:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PoseIOError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise PoseParseError(1, f"not UTF-8 ({exc.reason})") from None
    return loads_sequence(text)


def load_directory(path: PathLike) -> list[PoseSequence]:
    """Load every ``*.jsonl`` file in a directory, sorted by file name."""
    files = sorted(Path(path).glob("*.jsonl"))
    return [load_sequence(f) for f in files]
