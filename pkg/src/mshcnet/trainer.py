"""Minibatch training with step learning-rate decay, L2 weight penalty,
Adam updates, gradient clipping and checkpoint/resume."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, NumericalError
from .graph import GraphConfig, KnnGraph, build_knn_graph
from .model import (
    ModelConfig,
    ModelState,
    compute_streams,
    cross_entropy_loss,
    forward_full,
    fuse_and_classify,
    init_state,
    load_checkpoint,
    predict,
    save_checkpoint,
)

log = logging.getLogger(__name__)

BATCH_UNITS = ("node_batch", "patch")


@dataclass
class TrainConfig:
    epochs: int = 200
    minibatch_size: int = 7
    lr_initial: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    weight_reg: float = 0.001
    seed: int = 0
    batch_unit: str = "node_batch"
    patch_size: int = 27
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float = 5.0
    precision: str = "float32"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1]")
        if self.minibatch_size < 1:
            raise ConfigurationError("minibatch_size must be >= 1")
        if self.lr_decay_every < 1:
            raise ConfigurationError("lr_decay_every must be >= 1")
        if self.batch_unit not in BATCH_UNITS:
            raise ConfigurationError(f"batch_unit must be one of {BATCH_UNITS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigurationError("patch_size must be odd and >= 3")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    train_oa: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_lrs: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "lr", "loss", "train_oa"])
            for e in self.epochs:
                w.writerow([e.epoch, e.step, repr(e.lr), repr(e.loss), repr(e.train_oa)])


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    return cfg.lr_initial * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Independent stream per epoch, so a resumed run reshuffles identically."""
    return np.random.default_rng([seed, epoch])


def make_batches(train_pixels, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle and split into groups of ``minibatch_size``; the last short group is kept."""
    pix = np.asarray(train_pixels, dtype=np.intp)
    if pix.size == 0:
        raise ContractError("make_batches: empty training set")
    order = rng.permutation(pix)
    k = cfg.minibatch_size
    return [order[i:i + k] for i in range(0, order.size, k)]


class Adam:
    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def state_records(self) -> dict[str, np.ndarray]:
        recs = {"opt.t": np.array([self.t], dtype=np.float64)}
        for k in self.params:
            recs[f"opt.m.{k}"] = self.m[k]
            recs[f"opt.v.{k}"] = self.v[k]
        return recs

    def load_records(self, recs: dict[str, np.ndarray]) -> None:
        self.t = int(recs["opt.t"][0])
        for k in self.params:
            self.m[k] = recs[f"opt.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = recs[f"opt.v.{k}"].astype(self.v[k].dtype)


class MomentumSGD:
    def __init__(self, params: dict[str, T.Tensor], momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.t = 0
        self.vel = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.vel[k] = self.momentum * self.vel[k] + g
            p.data = (p.data - lr * self.vel[k]).astype(p.data.dtype)

    def state_records(self):
        recs = {"opt.t": np.array([self.t], dtype=np.float64)}
        recs.update({f"opt.vel.{k}": v for k, v in self.vel.items()})
        return recs

    def load_records(self, recs):
        self.t = int(recs["opt.t"][0])
        for k in self.params:
            self.vel[k] = recs[f"opt.vel.{k}"].astype(self.vel[k].dtype)


def make_optimizer(state: ModelState, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(state.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return MomentumSGD(state.params, cfg.momentum)


def weight_penalty(state: ModelState) -> T.Tensor:
    """Sum of squared entries of all weight matrices and kernels (no biases, no BN)."""
    terms = [T.square_sum(state.params[n]) for n in state.weight_names()]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return norm


def pixel_graph(cube: np.ndarray, cfg: GraphConfig) -> KnnGraph:
    M, N, B = cube.shape
    if M * N > cfg.max_nodes:
        raise ConfigurationError(
            f"{M * N} pixels exceed the graph cap of {cfg.max_nodes}; use batch_unit='patch'"
        )
    coords = np.stack(np.divmod(np.arange(M * N), N), axis=1) if cfg.feature_space == "spectral_spatial" else None
    return build_knn_graph(cube.reshape(M * N, B), cfg, coords=coords)


def _patch_window(center: int, size: int, M: int, N: int) -> tuple[slice, slice, int]:
    """Window of up to size x size pixels around ``center`` clipped to the raster,
    and the index of the centre inside the window."""
    r, c = divmod(int(center), N)
    h = size // 2
    r0, r1 = max(0, r - h), min(M, r + h + 1)
    c0, c1 = max(0, c - h), min(N, c + h + 1)
    return slice(r0, r1), slice(c0, c1), (r - r0) * (c1 - c0) + (c - c0)


def _batch_loss(cube, graph, labels, state, batch, cfg: TrainConfig, model_cfg: ModelConfig):
    if cfg.batch_unit == "node_batch":
        _, loss = forward_full(cube, graph, state, labels, None, training=True, rows=batch)
        return loss
    # patch mode: each sampled pixel brings its own window and local graph;
    # the centre rows are fused together so the head sees a real batch
    M, N, _ = cube.shape
    per_stream: dict[str, list] = {}
    for p in batch:
        rs, cs, centre = _patch_window(p, cfg.patch_size, M, N)
        sub = cube[rs, cs]
        g = pixel_graph(sub, model_cfg.knn) if model_cfg.uses_graph() else None
        for s, out in compute_streams(sub, g, state, training=True, rows=[centre]).items():
            per_stream.setdefault(s, []).append(out)
    outs = {s: T.concat(v, axis=0) for s, v in per_stream.items()}
    logits = fuse_and_classify(outs, state, training=True)
    return cross_entropy_loss(logits, labels.reshape(-1)[np.asarray(batch)])


def predict_tiled(cube: np.ndarray, state: ModelState, tile: int) -> np.ndarray:
    """Eval-mode prediction on non-overlapping tiles, each with its own graph."""
    M, N, _ = cube.shape
    out = np.zeros((M, N), dtype=np.int64)
    for r in range(0, M, tile):
        for c in range(0, N, tile):
            sub = np.ascontiguousarray(cube[r:r + tile, c:c + tile])
            k = state.config.knn.k
            g = pixel_graph(sub, state.config.knn) if state.config.uses_graph() and sub.shape[0] * sub.shape[1] > k else None
            if g is None and state.config.uses_graph():
                continue
            out[r:r + tile, c:c + tile] = predict(sub, g, state)
    return out


def predict_cube(cube: np.ndarray, state: ModelState, graph: KnnGraph | None = None, batch_unit: str = "node_batch", patch_size: int = 27) -> np.ndarray:
    if batch_unit == "patch":
        return predict_tiled(cube, state, patch_size)
    if graph is None and state.config.uses_graph():
        graph = pixel_graph(cube, state.config.knn)
    return predict(cube, graph, state)


def train(
    cube: np.ndarray,
    labels,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    graph: KnnGraph | None = None,
    out_dir=None,
    resume_from=None,
    stop_after_epoch: int | None = None,
):
    """Train on the pixels of ``labels.train_mask``; returns ``(state, report)``.

    ``labels`` is a :class:`~mshcnet.data.LabelMap`.  With ``resume_from`` the
    model and optimiser state come from a checkpoint written by an earlier
    run of the same configuration, and training continues at the next epoch.
    ``stop_after_epoch`` ends the run early (the schedule is unchanged).
    """
    train_cfg.validate()
    model_cfg.validate()
    grid = np.asarray(labels.grid)
    train_mask = np.asarray(labels.train_mask, dtype=bool)
    train_pixels = np.flatnonzero(train_mask.reshape(-1) & (grid.reshape(-1) > 0))
    if train_pixels.size == 0:
        raise ContractError("training mask selects no labelled pixel")
    report = TrainReport()
    t0 = time.perf_counter()
    with T.default_dtype(train_cfg.precision):
        cube = np.asarray(cube, dtype=train_cfg.precision)
        if train_cfg.batch_unit == "node_batch" and model_cfg.uses_graph() and graph is None:
            graph = pixel_graph(cube, model_cfg.knn)
        n_classes = len(labels.class_names)
        start_epoch, step = 0, 0
        if resume_from is not None:
            state, extra, meta = load_checkpoint(resume_from)
            if state.config.to_dict() != model_cfg.to_dict():
                raise ConfigurationError("checkpoint model config differs from the requested one")
            opt = make_optimizer(state, train_cfg)
            opt.load_records(extra)
            start_epoch = int(meta.get("epochs_completed", 0))
            step = int(meta.get("steps", 0))
        else:
            state = init_state(model_cfg, cube.shape[2], n_classes, seed=train_cfg.seed)
            opt = make_optimizer(state, train_cfg)
        state.astype(train_cfg.precision)
        end_epoch = train_cfg.epochs if stop_after_epoch is None else min(train_cfg.epochs, stop_after_epoch + 1)
        flat_grid = grid.reshape(-1)
        for epoch in range(start_epoch, end_epoch):
            lr = lr_at_epoch(train_cfg, epoch)
            batches = make_batches(train_pixels, train_cfg, epoch_rng(train_cfg.seed, epoch))
            epoch_loss = 0.0
            for bi, batch in enumerate(batches):
                data_loss = _batch_loss(cube, graph, grid, state, batch, train_cfg, model_cfg)
                loss = data_loss
                if train_cfg.weight_reg > 0:
                    loss = T.add(loss, T.scale(weight_penalty(state), train_cfg.weight_reg))
                value = float(loss.data)
                if not math.isfinite(value):
                    worst = max(state.params, key=lambda n: float(np.nan_to_num(np.linalg.norm(state.params[n].data), nan=np.inf)))
                    T.get_tape().clear()
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {bi}; "
                        f"largest parameter norm: {worst}={np.linalg.norm(state.params[worst].data):.4g}"
                    )
                state.zero_grad()
                T.backward(loss)
                grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
                clip_gradients(grads, train_cfg.clip_norm)
                opt.step(grads, lr)
                report.step_lrs.append(lr)
                report.step_losses.append(value)
                epoch_loss += value * len(batch)
                step += 1
            pred = predict_cube(cube, state, graph, train_cfg.batch_unit, train_cfg.patch_size)
            sel = train_pixels
            train_oa = float(np.mean(pred.reshape(-1)[sel] == flat_grid[sel]))
            rec = EpochRecord(epoch, step, lr, epoch_loss / train_pixels.size, train_oa)
            report.epochs.append(rec)
            log.info("epoch %d lr %.3g loss %.5f train OA %.4f", epoch, lr, rec.loss, train_oa)
        report.wall_time = time.perf_counter() - t0
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            ckpt = out / "checkpoint.mshc"
            save_checkpoint(
                ckpt,
                state,
                extra=opt.state_records(),
                meta={"epochs_completed": end_epoch, "steps": step, "train": train_cfg.to_dict()},
            )
            report.checkpoint_path = str(ckpt)
            report.write_csv(out / "train_report.csv")
    return state, report
