"""Deterministic synthetic walking poses with injectable postural asymmetries.

The gait is a frontal-view caricature: symmetric arm abduction and knee lift,
vertical bobbing and a lateral walking path. Asymmetries are constant offsets
so their effect on the asymmetry metrics can be derived in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ProfileError
from .pose_io import LABELS, PoseSequence

ASYMMETRY_KEYS = ("shoulder_drop", "pelvic_tilt", "trunk_drift", "rotation_tilt")

# (x, y) in body-height units; x is the subject's left (+) / right (-) offset,
# y grows downwards from the nose. Left and right share |x| and y.
BASE_SKELETON = {
    "nose": (0.0, 0.0),
    "eye": (0.03, -0.02),
    "ear": (0.06, 0.0),
    "shoulder": (0.11, 0.16),
    "elbow": (0.13, 0.33),
    "wrist": (0.13, 0.48),
    "hip": (0.07, 0.50),
    "knee": (0.075, 0.74),
    "ankle": (0.075, 0.98),
}
_PAIRED = ("eye", "ear", "shoulder", "elbow", "wrist", "hip", "knee", "ankle")
_LEFT_IDX = {name: 1 + 2 * i for i, name in enumerate(_PAIRED)}
_RIGHT_IDX = {name: 2 + 2 * i for i, name in enumerate(_PAIRED)}
_UPPER_BODY = [0] + [i for n in ("eye", "ear", "shoulder", "elbow", "wrist") for i in (_LEFT_IDX[n], _RIGHT_IDX[n])]

DEFAULT_PROFILES: dict[str, dict[str, tuple[float, float]]] = {
    "negative": {"shoulder_drop": (0.0, 1.5), "pelvic_tilt": (0.0, 1.5), "trunk_drift": (0.0, 1.5), "rotation_tilt": (0.0, 0.01)},
    "neutral": {"shoulder_drop": (4.0, 7.0), "pelvic_tilt": (3.0, 5.0), "trunk_drift": (2.5, 4.5), "rotation_tilt": (0.02, 0.04)},
    "positive": {"shoulder_drop": (10.0, 16.0), "pelvic_tilt": (7.0, 10.0), "trunk_drift": (6.0, 9.0), "rotation_tilt": (0.05, 0.08)},
}


@dataclass
class GaitParams:
    num_frames: int = 30
    cycles: float = 1.0  # stride cycles per sequence
    phase: float = 0.0
    body_height: float = 200.0  # pixels, eye row to ankle row
    skeleton: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(BASE_SKELETON))
    origin: tuple[float, float] = (320.0, 60.0)  # nose position at t=0
    walk_speed: float = 1.5  # px per frame, lateral
    bob: float = 2.0
    arm_swing: float = 0.03
    knee_lift: float = 0.04
    noise: float = 0.0
    shoulder_drop: float = 0.0
    pelvic_tilt: float = 0.0
    trunk_drift: float = 0.0
    rotation_tilt: float = 0.0
    side: str = "right"  # side that receives the asymmetry
    random_confidence: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")
        for k in ASYMMETRY_KEYS + ("noise", "bob", "arm_swing", "knee_lift"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")


def _rotate_pair(kp: np.ndarray, li: int, ri: int, angle: float) -> None:
    mid = 0.5 * (kp[:, li] + kp[:, ri])
    c, s = np.cos(angle), np.sin(angle)
    for i in (li, ri):
        d = kp[:, i] - mid
        kp[:, i, 0] = mid[:, 0] + c * d[:, 0] - s * d[:, 1]
        kp[:, i, 1] = mid[:, 1] + s * d[:, 0] + c * d[:, 1]


def generate(params: GaitParams, subject_id: str = "synthetic", label: str = "negative") -> PoseSequence:
    p = params
    rng = np.random.default_rng(p.seed)
    n = p.num_frames
    t = np.arange(n)
    phi = 2 * np.pi * p.cycles * t / n + p.phase
    swing = np.sin(phi)
    lift = np.abs(swing)

    # body-relative coordinates in pixels, origin at the nose
    xy = np.zeros((n, 17, 2))
    hb = p.body_height
    for name, (x, y) in p.skeleton.items():
        if name == "nose":
            xy[:, 0] = (x * hb, y * hb)
            continue
        dx = np.zeros(n)
        dy = np.zeros(n)
        if name in ("elbow", "wrist"):
            dx = p.arm_swing * hb * swing * (0.5 if name == "elbow" else 1.0)
        elif name in ("knee", "ankle"):
            dy = -p.knee_lift * hb * lift * (1.0 if name == "knee" else 1.5)
        # subject's left is image +x (frontal view)
        xy[:, _LEFT_IDX[name], 0] = x * hb + dx
        xy[:, _RIGHT_IDX[name], 0] = -(x * hb + dx)
        xy[:, _LEFT_IDX[name], 1] = y * hb + dy
        xy[:, _RIGHT_IDX[name], 1] = y * hb + dy

    side = _RIGHT_IDX if p.side == "right" else _LEFT_IDX
    other = _LEFT_IDX if p.side == "right" else _RIGHT_IDX
    sign = -1.0 if p.side == "right" else 1.0
    if p.shoulder_drop:
        for name in ("shoulder", "elbow", "wrist"):
            xy[:, side[name], 1] += p.shoulder_drop
    if p.pelvic_tilt:
        xy[:, other["hip"], 1] -= p.pelvic_tilt
    if p.trunk_drift:
        xy[:, _UPPER_BODY, 0] += sign * p.trunk_drift
    if p.rotation_tilt:
        for name in ("eye", "ear", "shoulder"):
            _rotate_pair(xy, _LEFT_IDX[name], _RIGHT_IDX[name], sign * p.rotation_tilt)

    xy[:, :, 0] += p.origin[0] + p.walk_speed * t[:, None]
    xy[:, :, 1] += p.origin[1] + p.bob * np.cos(2 * phi)[:, None]
    if p.noise > 0:
        xy += rng.normal(0.0, p.noise, xy.shape)
    conf = rng.uniform(0.5, 1.0, (n, 17)) if p.random_confidence else np.ones((n, 17))
    kp = np.concatenate([xy, conf[..., None]], axis=2)
    return PoseSequence(kp, subject_id, label)


def _check_profiles(profiles: Mapping[str, Mapping[str, tuple[float, float]]]) -> None:
    for label in LABELS:
        if label not in profiles:
            raise ProfileError(f"profile for {label!r} missing")
        for key, (lo, hi) in profiles[label].items():
            if key not in ASYMMETRY_KEYS:
                raise ProfileError(f"unknown asymmetry {key!r}")
            if lo < 0 or hi < lo:
                raise ProfileError(f"{label}.{key}: invalid range [{lo}, {hi}]")
    # classes must occupy disjoint boxes in asymmetry space, otherwise a draw
    # could be consistent with two labels
    for i, a in enumerate(LABELS):
        for b in LABELS[i + 1 :]:
            overlap = True
            for key in ASYMMETRY_KEYS:
                lo_a, hi_a = profiles[a].get(key, (0.0, 0.0))
                lo_b, hi_b = profiles[b].get(key, (0.0, 0.0))
                if hi_a < lo_b or hi_b < lo_a:
                    overlap = False
                    break
            if overlap:
                raise ProfileError(f"class ranges for {a!r} and {b!r} overlap")


def class_counts(n: int, mode: str = "balanced") -> dict[str, int]:
    """Sequences per class: ``n`` each when balanced, ``n`` total at 1:1:8 otherwise."""
    if mode == "balanced":
        return {label: n for label in LABELS}
    if mode == "1:1:8":
        minority = max(1, round(n / 10))
        return {"positive": minority, "neutral": minority, "negative": n - 2 * minority}
    raise ValueError(f"unknown class mode {mode!r}")


def generate_dataset(
    n_per_class: int,
    profiles: Mapping[str, Mapping[str, tuple[float, float]]] | None = None,
    seed: int = 0,
    mode: str = "balanced",
    base: GaitParams | None = None,
    vary_body: bool = True,
) -> list[PoseSequence]:
    """Labelled sequences with asymmetries drawn uniformly inside each class range."""
    profiles = DEFAULT_PROFILES if profiles is None else profiles
    _check_profiles(profiles)
    base = base or GaitParams(noise=1.0)
    counts = class_counts(n_per_class, mode)
    rng = np.random.default_rng(seed)
    out = []
    for label in ("negative", "neutral", "positive"):
        ranges = profiles[label]
        for i in range(counts[label]):
            draws = {k: float(rng.uniform(*ranges.get(k, (0.0, 0.0)))) for k in ASYMMETRY_KEYS}
            extra = {}
            if vary_body:
                extra = {
                    "body_height": float(rng.uniform(160.0, 240.0)),
                    "origin": (float(rng.uniform(150.0, 450.0)), float(rng.uniform(30.0, 90.0))),
                    "phase": float(rng.uniform(0.0, 2 * np.pi)),
                    "walk_speed": float(rng.uniform(-2.0, 2.0)),
                }
            params = replace(
                base,
                **draws,
                **extra,
                side=str(rng.choice(["left", "right"])),
                seed=int(rng.integers(0, 2**31 - 1)),
            )
            out.append(generate(params, subject_id=f"{label[:3]}{i:04d}", label=label))
    return out


def split_by_subject(
    seqs: list[PoseSequence], test_fraction: float = 1 / 3, seed: int = 0
) -> tuple[list[PoseSequence], list[PoseSequence]]:
    """Label-stratified split that never puts one subject on both sides."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in LABELS:
        subjects = sorted({s.subject_id for s in seqs if s.label == label})
        order = rng.permutation(len(subjects))
        n_test = int(round(test_fraction * len(subjects)))
        test_ids = {subjects[i] for i in order[:n_test]}
        for s in seqs:
            if s.label == label:
                (test if s.subject_id in test_ids else train).append(s)
    return train, test
