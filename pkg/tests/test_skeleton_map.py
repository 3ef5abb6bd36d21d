import math

import numpy as np
import pytest
from conftest import random_sequence

from drf.normalize import normalize_sequence
from drf.pose_io import FLIP_INDEX
from drf.skeleton_map import (
    COCO_LIMBS,
    RenderConfig,
    read_pgm,
    render_frame,
    render_keypoint_map,
    render_limb_map,
    render_sequence,
    to_pgm,
    write_pgm,
)
from drf.synth import GaitParams, generate


def canvas_point(x, y, cfg):
    k = cfg.span_frac * cfg.height / 128.0
    return cfg.width / 2 + k * x, cfg.origin_y_frac * cfg.height + k * y


def naive_keypoint_map(frame, cfg):
    out = np.zeros((cfg.height, cfg.width))
    for j in range(cfg.height):
        for i in range(cfg.width):
            total = 0.0
            for x, y, c in frame:
                if c < cfg.c_min:
                    continue
                u, v = canvas_point(x, y, cfg)
                d2 = (i + 0.5 - u) ** 2 + (j + 0.5 - v) ** 2
                total += math.exp(-d2 / (2 * cfg.sigma**2)) * c
            out[j, i] = total
    return out


def point_segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / L2))
    qx, qy = ax + t * dx, ay + t * dy
    return math.hypot(px - qx, py - qy)


def naive_limb_map(frame, cfg):
    out = np.zeros((cfg.height, cfg.width))
    segs = []
    for a, b in cfg.limbs:
        ca, cb = frame[a][2], frame[b][2]
        if ca < cfg.c_min or cb < cfg.c_min:
            continue
        segs.append((*canvas_point(frame[a][0], frame[a][1], cfg), *canvas_point(frame[b][0], frame[b][1], cfg), min(ca, cb)))
    for j in range(cfg.height):
        for i in range(cfg.width):
            total = 0.0
            for ax, ay, bx, by, w in segs:
                d = point_segment_distance(i + 0.5, j + 0.5, ax, ay, bx, by)
                total += math.exp(-d * d / (2 * cfg.sigma**2)) * w
            out[j, i] = total
    return out


def _single_point_frame(x, y, c=1.0):
    f = np.zeros((17, 3))
    f[0] = (x, y, c)
    return f


def test_keypoint_on_pixel_centre_gives_one():
    cfg = RenderConfig(width=16, height=16, sigma=2.0)
    k = cfg.pixels_per_unit
    # pixel (5, 9) centre is canvas (5.5, 9.5)
    x = (5.5 - 8.0) / k
    y = (9.5 - 8.0) / k
    grid = render_keypoint_map(_single_point_frame(x, y), cfg)
    assert grid[9, 5] == pytest.approx(1.0, abs=1e-12)
    # one sigma (2 px) to the right
    assert grid[9, 7] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert grid[9, 7] == pytest.approx(0.606531, abs=1e-6)


def test_full_frame_matches_naive_oracle(rng):
    cfg = RenderConfig(width=24, height=20, sigma=1.7)
    seq = normalize_sequence(random_sequence(rng, n_frames=3))
    for frame in seq.keypoints:
        assert np.abs(render_keypoint_map(frame, cfg) - naive_keypoint_map(frame, cfg)).max() < 1e-9
        assert np.abs(render_limb_map(frame, cfg) - naive_limb_map(frame, cfg)).max() < 1e-9


def _segment_frame(c_a, c_b):
    f = np.zeros((17, 3))
    cfg = RenderConfig(width=32, height=32, sigma=2.0)
    k = cfg.pixels_per_unit
    # horizontal segment 5 -> 6 through pixel row 10 centres (y canvas 10.5), x from 4.5 to 24.5
    f[5] = ((4.5 - 16) / k, (10.5 - 16) / k, c_a)
    f[6] = ((24.5 - 16) / k, (10.5 - 16) / k, c_b)
    return f, cfg


def test_limb_on_segment_uses_min_confidence():
    f, cfg = _segment_frame(0.8, 0.5)
    grid = render_limb_map(f, cfg, limbs=[(5, 6)])
    assert grid[10, 12] == pytest.approx(0.5, abs=1e-12)
    # perpendicular distance sigma from an interior point
    assert grid[12, 12] == pytest.approx(math.exp(-0.5) * 0.5, abs=1e-12)


def test_limb_with_invalid_endpoint_contributes_nothing():
    f, cfg = _segment_frame(0.8, 0.1)
    assert render_limb_map(f, cfg, limbs=[(5, 6)]).max() == 0.0


def test_zero_length_limb_is_point_gaussian():
    cfg = RenderConfig(width=16, height=16, sigma=1.5)
    f = np.zeros((17, 3))
    f[5] = f[6] = (3.0, -4.0, 0.7)
    limb = render_limb_map(f, cfg, limbs=[(5, 6)])
    point = render_keypoint_map(_single_point_frame(3.0, -4.0, 0.7), cfg)
    assert np.abs(limb - point).max() < 1e-12


def test_bounds_and_confidence_scaling(rng):
    cfg = RenderConfig(width=32, height=32, sigma=1.3)
    frame = normalize_sequence(random_sequence(rng, n_frames=1, conf_low=0.5)).keypoints[0]
    J = render_keypoint_map(frame, cfg)
    L = render_limb_map(frame, cfg)
    assert J.min() >= 0 and L.min() >= 0
    assert J.max() <= frame[:, 2].sum()
    assert L.max() <= sum(min(frame[a, 2], frame[b, 2]) for a, b in COCO_LIMBS)
    # scale confidences by lambda; every keypoint stays above c_min
    lam = 0.6
    scaled = frame.copy()
    scaled[:, 2] *= lam
    assert np.abs(render_keypoint_map(scaled, cfg) - lam * J).max() < 1e-12


def test_mirror_symmetry(rng):
    cfg = RenderConfig(width=32, height=32, sigma=1.2)
    frame = normalize_sequence(random_sequence(rng, n_frames=1)).keypoints[0]
    mirrored = frame[FLIP_INDEX].copy()
    mirrored[:, 0] *= -1
    for fn in (render_keypoint_map, render_limb_map):
        assert np.abs(fn(mirrored, cfg) - fn(frame, cfg)[:, ::-1]).max() < 1e-9


def test_render_sequence_order_and_composition():
    cfg = RenderConfig(width=32, height=32, sigma=1.0)
    norm = normalize_sequence(generate(GaitParams(num_frames=30, noise=0.5, seed=3)))
    maps = render_sequence(norm, cfg)
    assert maps.shape == (30, 2, 32, 32)
    for t in range(30):
        assert np.array_equal(maps[t], render_frame(norm.keypoints[t], cfg))
    rev = render_sequence(norm.keypoints[::-1], cfg)
    assert np.array_equal(rev, maps[::-1])
    one = render_sequence(norm.keypoints[:1], cfg)
    assert one.shape == (1, 2, 32, 32)


def test_pgm_export(tmp_path):
    grid = np.array([[0.0, 0.5], [1.0, 2.0]])
    text = to_pgm(grid)
    # 0.5 * 255/2 = 63.75 -> 64; 1.0 -> 127.5 -> 128 (half-up)
    assert text == "P2\n2 2\n255\n0 64\n128 255\n"
    p = tmp_path / "g.pgm"
    write_pgm(grid, p)
    assert np.allclose(read_pgm(p) * 255, [[0, 64], [128, 255]])
    assert to_pgm(np.zeros((2, 3))).endswith("0 0 0\n0 0 0\n")


def test_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(width=4)
    with pytest.raises(ValueError):
        RenderConfig(sigma=0)
    with pytest.raises(ValueError):
        RenderConfig(limbs=((3, 3),))
    cfg = RenderConfig(width=40, sigma=1.5)
    assert RenderConfig.from_dict(cfg.to_dict()) == cfg
