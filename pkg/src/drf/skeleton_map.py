"""Two-channel skeleton maps: Gaussian keypoint heatmaps and limb heatmaps.

Grids are returned as ``(height, width)`` arrays, i.e. ``grid[j, i]`` holds the
value at pixel column ``i`` and row ``j``. Values are evaluated at pixel
centres.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .normalize import STANDARD_HEIGHT, NormalizedSequence
from .pose_io import DEFAULT_C_MIN, validity_mask

COCO_LIMBS: tuple[tuple[int, int], ...] = (
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (11, 12), (5, 11), (6, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
    (0, 1), (0, 2), (1, 3), (2, 4),
)


@dataclass
class RenderConfig:
    """Canvas geometry for rendering normalized poses.

    The normalized 128-unit body height is mapped onto ``span_frac * height``
    pixels. The hip midpoint (normalized origin) lands at column ``width / 2``
    and row ``origin_y_frac * height``.
    """

    width: int = 64
    height: int = 64
    sigma: float = 2.0
    span_frac: float = 0.78
    origin_y_frac: float = 0.5
    c_min: float = DEFAULT_C_MIN
    limbs: tuple[tuple[int, int], ...] = field(default=COCO_LIMBS)

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("canvas must be at least 8x8")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self.limbs = tuple((int(a), int(b)) for a, b in self.limbs)
        for a, b in self.limbs:
            if a == b or not (0 <= a <= 16 and 0 <= b <= 16):
                raise ValueError(f"invalid limb ({a}, {b})")

    @property
    def pixels_per_unit(self) -> float:
        return self.span_frac * self.height / STANDARD_HEIGHT

    def to_canvas(self, xy: np.ndarray) -> np.ndarray:
        """Normalized (x, y) -> continuous canvas coordinates (pixel i has centre i + 0.5)."""
        xy = np.asarray(xy, dtype=np.float64)
        k = self.pixels_per_unit
        out = np.empty_like(xy)
        out[..., 0] = 0.5 * self.width + k * xy[..., 0]
        out[..., 1] = self.origin_y_frac * self.height + k * xy[..., 1]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["limbs"] = [list(l) for l in self.limbs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        if "limbs" in d:
            d["limbs"] = tuple(tuple(l) for l in d["limbs"])
        return cls(**d)


def _pixel_centres(cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    return np.arange(cfg.width) + 0.5, np.arange(cfg.height) + 0.5


def render_keypoint_map(frame: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Sum of confidence-weighted isotropic Gaussians, one per valid keypoint."""
    frame = np.asarray(frame, dtype=np.float64)
    valid = validity_mask(frame, cfg.c_min)
    uv = cfg.to_canvas(frame[valid, :2])
    conf = frame[valid, 2]
    gx, gy = _pixel_centres(cfg)
    inv = 1.0 / (2.0 * cfg.sigma**2)
    # the 2D Gaussian factorizes into a row profile times a column profile
    ex = np.exp(-((gx[None, :] - uv[:, 0:1]) ** 2) * inv)
    ey = np.exp(-((gy[None, :] - uv[:, 1:2]) ** 2) * inv)
    return np.einsum("k,kj,ki->ji", conf, ey, ex)


def segment_distance_sq(px, py, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from points (px, py) to segment ab (clamped projection)."""
    d = b - a
    dd = float(d @ d)
    rx, ry = px - a[0], py - a[1]
    if dd == 0.0:
        return rx * rx + ry * ry
    t = np.clip((rx * d[0] + ry * d[1]) / dd, 0.0, 1.0)
    ex, ey = rx - t * d[0], ry - t * d[1]
    return ex * ex + ey * ey


def render_limb_map(
    frame: np.ndarray, cfg: RenderConfig, limbs: Sequence[tuple[int, int]] | None = None
) -> np.ndarray:
    """Line-like heatmap of limb segments weighted by the weaker endpoint confidence."""
    frame = np.asarray(frame, dtype=np.float64)
    limbs = cfg.limbs if limbs is None else limbs
    valid = validity_mask(frame, cfg.c_min)
    uv = cfg.to_canvas(frame[:, :2])
    gx, gy = _pixel_centres(cfg)
    px, py = np.meshgrid(gx, gy)
    inv = 1.0 / (2.0 * cfg.sigma**2)
    out = np.zeros((cfg.height, cfg.width))
    for a, b in limbs:
        if not (valid[a] and valid[b]):
            continue
        w = min(frame[a, 2], frame[b, 2])
        out += w * np.exp(-segment_distance_sq(px, py, uv[a], uv[b]) * inv)
    return out


def render_frame(frame: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """(2, height, width) stack of keypoint and limb channels."""
    return np.stack([render_keypoint_map(frame, cfg), render_limb_map(frame, cfg)])


def render_sequence(seq: NormalizedSequence | np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """(T, 2, height, width) maps, one per frame, in input order."""
    kp = seq.keypoints if isinstance(seq, NormalizedSequence) else np.asarray(seq)
    return np.stack([render_frame(f, cfg) for f in kp])


def to_pgm(grid: np.ndarray) -> str:
    """ASCII PGM (P2) text; values scaled by 255/max and rounded half-up."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    peak = grid.max() if grid.size else 0.0
    if peak > 0:
        levels = np.floor(grid * (255.0 / peak) + 0.5).astype(int)
    else:
        levels = np.zeros((h, w), dtype=int)
    levels = np.clip(levels, 0, 255)
    rows = [" ".join(str(v) for v in row) for row in levels]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def write_pgm(grid: np.ndarray, path) -> None:
    Path(path).write_text(to_pgm(grid), encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4 : 4 + w * h]])
    return vals.reshape(h, w) / maxval
