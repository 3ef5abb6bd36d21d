"""Screening metrics, the guidance/branch ablation harness and class activation maps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError
from .model import DRFModel
from .pose_io import LABELS, PoseSequence
from .training import Checkpoint, Example, TrainConfig, predict, prepare, train

log = logging.getLogger(__name__)

NUM_CLASSES = len(LABELS)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # 0/0 counts as 0
    return np.divide(a, b, out=np.zeros(a.shape, dtype=np.float64), where=b > 0)


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray
    per_class: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"acc": self.accuracy, "prec": self.precision, "rec": self.recall, "f1": self.f1}


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise DataError("cannot compute metrics on an empty evaluation set")
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(
        accuracy=float(tp.sum() / total),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        confusion=cm,
        per_class={"precision": precision, "recall": recall, "f1": f1},
    )


def _as_examples(data, ckpt: Checkpoint) -> list[Example]:
    data = list(data)
    if data and isinstance(data[0], PoseSequence):
        return prepare(data, ckpt.render, ckpt.c_min)
    return data


def evaluate(ckpt: Checkpoint, data: Sequence[PoseSequence] | Sequence[Example], model: DRFModel | None = None) -> Metrics:
    examples = _as_examples(data, ckpt)
    if not examples:
        raise DataError("empty evaluation set")
    model = model or ckpt.build_model()
    pred = predict(model, examples, ckpt.stats).argmax(axis=1)
    return metrics_from_confusion(confusion_matrix([e.label for e in examples], pred))


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRun:
    guidance: str = "pav"
    channel: bool = True
    spatial: bool = True
    run_id: str = ""

    def __post_init__(self):
        if not self.run_id:
            self.run_id = f"{self.guidance}-c{int(self.channel)}s{int(self.spatial)}"


@dataclass
class AblationSpec:
    runs: list[AblationRun]

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        return cls([AblationRun(**r) for r in d["runs"]])

    @classmethod
    def guidance_sources(cls) -> "AblationSpec":
        return cls([AblationRun(g) for g in ("self_attention", "all_ones", "random", "learnable", "pav")])

    @classmethod
    def branches(cls, guidance: str = "pav") -> "AblationSpec":
        return cls([AblationRun(guidance, c, s) for c, s in ((False, False), (True, False), (False, True), (True, True))])


ABLATION_COLUMNS = ("run_id", "guidance", "channel", "spatial", "acc", "prec", "rec", "f1")


def run_ablation(
    spec: AblationSpec,
    train_data: Sequence[Example],
    test_data: Sequence[Example],
    cfg: TrainConfig,
) -> list[dict]:
    """Train and evaluate one model per run with a shared seed and split.

    A failing run yields a row with NaN metrics and an ``error`` entry; the
    remaining runs still execute.
    """
    rows = []
    for run in spec.runs:
        row = {"run_id": run.run_id, "guidance": run.guidance, "channel": run.channel, "spatial": run.spatial}
        try:
            run_cfg = replace(cfg, guidance=run.guidance, channel_branch=run.channel, spatial_branch=run.spatial)
            result = train(train_data, run_cfg)
            m = evaluate(result.checkpoint, test_data, model=result.model)
            row.update(m.as_row())
            row["error"] = ""
        except Exception as exc:  # a failed run must not sink the table
            log.warning("ablation run %s failed: %s", run.run_id, exc)
            row.update({k: math.nan for k in ("acc", "prec", "rec", "f1")})
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(ABLATION_COLUMNS)]
    for r in rows:
        vals = []
        for col in ABLATION_COLUMNS:
            v = r[col]
            if isinstance(v, bool):
                vals.append("on" if v else "off")
            elif isinstance(v, float):
                vals.append(f"{v:.6f}")
            else:
                vals.append(str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def metrics_csv(m: Metrics) -> str:
    return "acc,prec,rec,f1\n" + ",".join(f"{v:.6f}" for v in (m.accuracy, m.precision, m.recall, m.f1)) + "\n"


# ---------------------------------------------------------------- CAM


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centre alignment, edge clamped."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    rows = _bilinear_matrix(shape[0], grid.shape[0])
    cols = _bilinear_matrix(shape[1], grid.shape[1])
    return rows @ grid @ cols.T


def minmax_scale(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def class_activation_map(activations: np.ndarray, channel_weights: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Channel-weighted sum of (C, h, w) activations, upsampled to ``shape`` and scaled to [0, 1]."""
    cam = np.tensordot(channel_weights, activations, axes=(0, 0))
    return minmax_scale(upsample_bilinear(cam, shape))


def cam_heatmap(ckpt: Checkpoint, seq: PoseSequence | Example, class_id: int, model: DRFModel | None = None) -> np.ndarray:
    """(height, width) class activation map over the skeleton-map canvas.

    Uses the temporally pooled output of the last conv stage, i.e. the map the
    horizontal strip pooling consumes.
    """
    model = model or ckpt.build_model()
    ex = seq if isinstance(seq, Example) else prepare([seq], ckpt.render, ckpt.c_min)[0]
    with T.no_grad():
        _, acts = model.encode_with_activations([ex.maps])
    weights = model.class_channel_weights()[:, class_id]
    return class_activation_map(acts.data[0], weights, (ckpt.render.height, ckpt.render.width))
