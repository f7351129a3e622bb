"""Confusion matrix, OA / AA / kappa, and classification-map export."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class EvalReport:
    per_class_accuracy: list[float | None]
    oa: float
    aa: float
    kappa: float
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": self.per_class_accuracy,
            "counts": self.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["oa", "aa", "kappa", "per_class", "counts"],
    "additionalProperties": False,
    "properties": {
        "oa": {"type": "number", "minimum": 0, "maximum": 1},
        "aa": {"type": "number", "minimum": 0, "maximum": 1},
        "kappa": {"type": "number", "minimum": -1, "maximum": 1},
        "per_class": {"type": "array", "items": {"type": ["number", "null"]}},
        "counts": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
    },
}


def confusion(pred, truth, mask=None, n_classes: int | None = None) -> np.ndarray:
    """counts[t-1, p-1] = number of pixels with true class t predicted as p.

    Class ids are 1..P; pixels with truth 0 are never counted.
    """
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    sel = truth > 0
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if np.any(m & (truth == 0)):
            raise ContractError("evaluation mask covers unlabelled pixels")
        sel &= m
    P = int(n_classes if n_classes is not None else truth.max(initial=0))
    p, t = pred[sel], truth[sel]
    if p.size and (p.min() < 1 or p.max() > P):
        raise ContractError(f"prediction outside 1..{P}")
    return np.bincount((t - 1) * P + (p - 1), minlength=P * P).reshape(P, P)


def oa_aa_kappa(cm) -> EvalReport:
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    po = diag.sum() / total
    per_class: list[float | None] = []
    for t in range(cm.shape[0]):
        per_class.append(float(diag[t] / rows[t]) if rows[t] > 0 else None)
    defined = [a for a in per_class if a is not None]
    if len(defined) < len(per_class):
        warnings.warn("classes without evaluated pixels are left out of AA", stacklevel=2)
    aa = float(np.mean(defined))
    pe = float(np.sum(rows.astype(np.float64) * cols) / float(total) ** 2)
    if pe == 1.0:
        kappa = 1.0 if po == 1.0 else 0.0
    else:
        kappa = float((po - pe) / (1.0 - pe))
    return EvalReport(per_class, float(po), aa, kappa, cm.astype(np.int64))


def evaluate(pred, truth, mask=None, n_classes: int | None = None) -> EvalReport:
    return oa_aa_kappa(confusion(pred, truth, mask, n_classes))


_BASE_COLOURS = [
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (0, 255, 255), (255, 0, 255),
    (176, 48, 96), (46, 139, 87), (160, 32, 240), (255, 127, 80), (127, 255, 212),
    (218, 112, 214), (160, 82, 45), (127, 255, 0), (216, 191, 216), (238, 0, 0),
]


def default_palette(n_classes: int) -> np.ndarray:
    """Index 0 is black; classes cycle through a fixed colour table."""
    pal = np.zeros((n_classes + 1, 3), dtype=np.uint8)
    for i in range(1, n_classes + 1):
        pal[i] = _BASE_COLOURS[(i - 1) % len(_BASE_COLOURS)]
    return pal


def export_map(pred, palette, path) -> None:
    """Write an M x N class-id grid as a binary PPM (P6)."""
    pred = np.asarray(pred, dtype=np.int64)
    palette = np.asarray(palette, dtype=np.uint8)
    if pred.ndim != 2:
        raise ContractError(f"map must be 2-d, got {pred.shape}")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= len(palette):
        raise ContractError(f"palette has {len(palette)} entries, map uses id {int(pred.max())}")
    M, N = pred.shape
    body = palette[pred].tobytes()
    Path(path).write_bytes(f"P6\n{N} {M}\n255\n".encode("ascii") + body)
