"""Run configuration, data preparation and the multi-run harnesses
(stream ablation, K sweep) shared by the CLI and the scripts."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    LabelMap,
    filter_bands,
    load_cube,
    load_labels_and_split,
    normalize,
    parse_band_list,
)
from .errors import ConfigurationError
from .metrics import EvalReport, evaluate
from .model import STREAMS, ModelConfig
from .trainer import TrainConfig, predict_cube, train

log = logging.getLogger(__name__)

DEFAULT_K_LIST = (5, 10, 15, 20, 25, 30)
ABLATION_COLUMNS = ("without_c", "without_g", "without_n", "without_s", "full")


@dataclass
class DataConfig:
    cube: str = ""
    cube_format: str = "hsc1"
    payload: str | None = None
    labels: str = ""
    split: str | None = None
    remove_bands: str = ""
    normalize: str = "per_band_zscore"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": self.model.to_dict(), "train": self.train.to_dict(), "out": self.out}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            jsonschema.validate(d, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"run config invalid at {where}: {exc.message}") from None
        cfg = cls(
            data=DataConfig(**d.get("data", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            out=d.get("out", "runs/default"),
        )
        cfg.model.validate()
        cfg.train.validate()
        return cfg


_DATA_PROPS = {
    "cube": {"type": "string"},
    "cube_format": {"enum": ["hsc1", "envi_bsq"]},
    "payload": {"type": ["string", "null"]},
    "labels": {"type": "string"},
    "split": {"type": ["string", "null"]},
    "remove_bands": {"type": "string"},
    "normalize": {"enum": ["per_band_zscore", "minmax01", "none"]},
}

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "object", "additionalProperties": False, "properties": _DATA_PROPS},
        # field-level checks for these two live in the dataclasses
        "model": {"type": "object"},
        "train": {"type": "object"},
        "out": {"type": "string"},
    },
}


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply ``dotted.key=value`` strings; values parse as JSON, else as text."""
    doc = copy.deepcopy(doc)
    for item in assignments or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return doc


def load_run_config(path=None, overrides=()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: not valid JSON ({exc})") from None
    return RunConfig.from_dict(apply_overrides(doc, overrides))


def prepare_data(cfg: DataConfig) -> tuple[np.ndarray, LabelMap]:
    """Load, band-filter and normalise the cube; load labels and split."""
    for name in ("cube", "labels"):
        path = getattr(cfg, name)
        if not path or not Path(path).exists():
            raise ConfigurationError(f"data.{name} path does not exist: {path!r}")
    if cfg.split and not Path(cfg.split).exists():
        raise ConfigurationError(f"data.split path does not exist: {cfg.split!r}")
    cube = load_cube(cfg.cube, cfg.cube_format, cfg.payload)
    if cfg.remove_bands:
        cube = filter_bands(cube, parse_band_list(cfg.remove_bands))
    cube = normalize(cube, cfg.normalize)
    labels = load_labels_and_split(cfg.labels, cfg.split)
    if labels.grid.shape != cube.shape[:2]:
        raise ConfigurationError(f"labels {labels.grid.shape} do not match cube {cube.shape[:2]}")
    return cube.values, labels


def fit_and_score(cube, labels: LabelMap, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None):
    """Train, predict the whole raster, score on the test mask."""
    state, report = train(cube, labels, model_cfg, train_cfg, out_dir=out_dir)
    pred = predict_cube(np.asarray(cube, dtype=train_cfg.precision), state, None, train_cfg.batch_unit, train_cfg.patch_size)
    ev = evaluate(pred, labels.grid, labels.test_mask, labels.n_classes)
    return state, report, pred, ev


def ablation_variants(model_cfg: ModelConfig) -> dict[str, ModelConfig]:
    """Four leave-one-stream-out configurations plus the full model."""
    out = {}
    for s in STREAMS:
        v = copy.deepcopy(model_cfg)
        v.streams_enabled = {t: t != s for t in STREAMS}
        out[f"without_{s}"] = v
    full = copy.deepcopy(model_cfg)
    full.streams_enabled = {t: True for t in STREAMS}
    out["full"] = full
    return out


@dataclass
class AblationResult:
    reports: dict[str, EvalReport]
    fusion_widths: dict[str, int]
    stream_widths: dict[str, dict[str, int]]

    def ordering(self) -> str:
        full = self.reports["full"].oa
        best = max(self.reports[c].oa for c in ABLATION_COLUMNS[:-1])
        rel = ">=" if full >= best else "<"
        return f"full OA {full:.4f} {rel} best single-removal OA {best:.4f}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", *ABLATION_COLUMNS])
            for row, get in (("OA", lambda r: r.oa), ("AA", lambda r: r.aa), ("kappa_x100", lambda r: r.kappa)):
                w.writerow([row, *(f"{100 * get(self.reports[c]):.4f}" for c in ABLATION_COLUMNS)])


def run_ablation(cube, labels: LabelMap, model_cfg: ModelConfig, train_cfg: TrainConfig) -> AblationResult:
    reports, widths, per_stream = {}, {}, {}
    for name, cfg in ablation_variants(model_cfg).items():
        widths[name] = cfg.fusion_width()
        per_stream[name] = cfg.stream_widths()
        log.info("ablation %s: streams %s, fusion width %d", name, cfg.enabled(), widths[name])
        _, _, _, ev = fit_and_score(cube, labels, cfg, train_cfg)
        reports[name] = ev
        log.info("ablation %s: OA %.4f AA %.4f kappa %.4f", name, ev.oa, ev.aa, ev.kappa)
    return AblationResult(reports, widths, per_stream)


def run_ksweep(cube, labels: LabelMap, model_cfg: ModelConfig, train_cfg: TrainConfig, k_list=DEFAULT_K_LIST) -> list[tuple[int, float]]:
    rows = []
    for k in k_list:
        cfg = copy.deepcopy(model_cfg)
        cfg.knn.k = int(k)
        _, _, _, ev = fit_and_score(cube, labels, cfg, train_cfg)
        log.info("ksweep K=%d: OA %.4f", k, ev.oa)
        rows.append((int(k), ev.oa))
    return rows


def write_ksweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "OA"])
        for k, oa in rows:
            w.writerow([k, repr(oa)])
