"""Postural Asymmetry Vector: per-frame metrics, IQR filtering, temporal
aggregation and train-split min-max scaling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .normalize import NormalizedSequence
from .pose_io import DEFAULT_C_MIN, LEFT_HIP, RIGHT_HIP, validity_mask

# (left, right) COCO indices: eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
SYMMETRIC_PAIRS: tuple[tuple[int, int], ...] = (
    (1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16),
)
PAIR_NAMES = ("eyes", "ears", "shoulders", "elbows", "wrists", "hips", "knees", "ankles")
METRIC_NAMES = ("VD", "MD", "AD")
NUM_PAIRS = len(SYMMETRIC_PAIRS)
NUM_METRICS = len(METRIC_NAMES)
PAV_DIM = NUM_PAIRS * NUM_METRICS
HIP_PAIR = PAIR_NAMES.index("hips")

_LEFT = np.array([p[0] for p in SYMMETRIC_PAIRS])
_RIGHT = np.array([p[1] for p in SYMMETRIC_PAIRS])


@dataclass
class FrameAsymmetry:
    values: np.ndarray  # (P, M): vertical, midline, angular deviation
    valid: np.ndarray  # (P,) bool


@dataclass
class RawPAV:
    values: np.ndarray  # (P, M), unnormalized
    missing: np.ndarray = field(default=None)  # (P, M) bool: no valid frame for that entry

    def __post_init__(self):
        if self.missing is None:
            self.missing = np.zeros(self.values.shape, dtype=bool)


@dataclass
class MinMaxStats:
    minimum: np.ndarray
    maximum: np.ndarray
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "min": self.minimum.tolist(),
            "max": self.maximum.tolist(),
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxStats":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64), d["split"])


def frame_metrics(frame: np.ndarray, c_min: float = DEFAULT_C_MIN) -> FrameAsymmetry:
    """Vertical, midline and angular deviation for each symmetric pair.

    The midline is the frame's hip centre, which is the origin for normalized
    input; using the measured centre keeps the hip pair's midline deviation
    exactly zero.
    """
    frame = np.asarray(frame, dtype=np.float64)
    ok = validity_mask(frame, c_min)
    valid = ok[_LEFT] & ok[_RIGHT]
    if ok[LEFT_HIP] and ok[RIGHT_HIP]:
        x_mid = (frame[LEFT_HIP, 0] + frame[RIGHT_HIP, 0]) / 2
    else:
        x_mid = 0.0
    xl, yl = frame[_LEFT, 0], frame[_LEFT, 1]
    xr, yr = frame[_RIGHT, 0], frame[_RIGHT, 1]
    dy = yl - yr
    vd = np.abs(dy)
    md = np.abs((xl + xr) / 2 - x_mid)
    # |arctan(dy/dx)| with dx == 0 -> pi/2 (or 0 when the points coincide)
    ad = np.arctan2(np.abs(dy), np.abs(xl - xr))
    values = np.stack([vd, md, ad], axis=1)
    values[~valid] = 0.0
    return FrameAsymmetry(values, valid)


def iqr_filter(samples: Sequence[float]) -> np.ndarray:
    """Keep samples inside the Tukey fences Q1 - 1.5 IQR and Q3 + 1.5 IQR."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("iqr_filter needs at least one sample")
    q1, q3 = np.quantile(x, [0.25, 0.75], method="linear")
    iqr = q3 - q1
    keep = (x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)
    return x[keep]


def aggregate_sequence(frames: Iterable[FrameAsymmetry]) -> RawPAV:
    """Per entry: values from frames where the pair is valid, IQR-filtered, averaged."""
    frames = list(frames)
    values = np.stack([f.values for f in frames])  # (T, P, M)
    valid = np.stack([f.valid for f in frames])  # (T, P)
    out = np.zeros((NUM_PAIRS, NUM_METRICS))
    missing = np.zeros((NUM_PAIRS, NUM_METRICS), dtype=bool)
    for p in range(NUM_PAIRS):
        for m in range(NUM_METRICS):
            col = values[valid[:, p], p, m]
            if col.size == 0:
                missing[p, m] = True
                continue
            out[p, m] = iqr_filter(col).mean()
    if missing.any():
        names = sorted({PAIR_NAMES[p] for p in np.nonzero(missing)[0]})
        warnings.warn(f"no valid frames for pairs: {', '.join(names)}", RuntimeWarning, stacklevel=2)
    return RawPAV(out, missing)


def raw_pav(seq: NormalizedSequence | np.ndarray, c_min: float = DEFAULT_C_MIN) -> RawPAV:
    kp = seq.keypoints if isinstance(seq, NormalizedSequence) else np.asarray(seq)
    return aggregate_sequence(frame_metrics(f, c_min) for f in kp)


def fit_minmax(raw_pavs: Sequence[RawPAV | np.ndarray], split: str = "train") -> MinMaxStats:
    if len(raw_pavs) == 0:
        raise ValueError("cannot fit min-max statistics on an empty set")
    stack = np.stack([r.values if isinstance(r, RawPAV) else np.asarray(r, dtype=np.float64) for r in raw_pavs])
    return MinMaxStats(stack.min(axis=0), stack.max(axis=0), split)


def apply_minmax(raw: RawPAV | np.ndarray, stats: MinMaxStats) -> np.ndarray:
    """Scale into [0, 1]; constant dimensions map to 0, out-of-range values are clamped."""
    x = raw.values if isinstance(raw, RawPAV) else np.asarray(raw, dtype=np.float64)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    v = np.where(span > 0, (x - stats.minimum) / safe, 0.0)
    return np.clip(v, 0.0, 1.0)


def flatten(pav: np.ndarray) -> np.ndarray:
    """Pair-major, metric-minor flattening to a length-24 vector."""
    return np.asarray(pav, dtype=np.float64).reshape(PAV_DIM)


def to_csv(pav: np.ndarray) -> str:
    lines = ["pair,VD,MD,AD"]
    for name, row in zip(PAIR_NAMES, np.asarray(pav)):
        lines.append(name + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
