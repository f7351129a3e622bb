"""Central finite-difference gradient checks.

:func:`check_gradients` compares tape gradients of ``sum(f(inputs) * R)`` for
a fixed random weighting ``R`` against central differences.  The relative
error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
and the reported figure is the maximum over all entries of all inputs.

:func:`run_suite` covers every differentiable operation of the model over
many seeds and is what ``mshcnet gradcheck`` runs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_STEP = 1e-4
DEFAULT_FLOOR = 1e-5


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.reduce_sum(T.mul(out, weights))


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    seed: int = 0,
    h: float = DEFAULT_STEP,
    floor: float = DEFAULT_FLOOR,
) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    with T.default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*leaves)
        weights = np.random.default_rng(seed + 7919).uniform(0.5, 1.5, size=out.shape)
        loss = _weighted_sum(out, weights)
        T.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

        def value(vals):
            with T.no_grad():
                return float(np.sum(fn(*[Tensor(v) for v in vals]).data * weights))

        worst = 0.0
        for k, base in enumerate(arrays):
            flat = base.reshape(-1)
            for i in range(flat.size):
                vals = [a.copy() for a in arrays]
                vals[k].reshape(-1)[i] = flat[i] + h
                up = value(vals)
                vals[k].reshape(-1)[i] = flat[i] - h
                down = value(vals)
                num = (up - down) / (2 * h)
                ana = analytic[k].reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
        return worst


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def _spaced(rng, shape, gap=0.01):
    """Distinct values at least ``gap`` apart, so max-type ops have no near ties."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 10)
    return vals.reshape(shape)


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _cases(rng) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    from .graph import GraphConfig, build_knn_graph, spmv
    from .layers import graph_neighbor_maxpool, gsop, sop
    from .model import ModelConfig, cross_entropy_loss, fuse_and_classify, init_state

    g = build_knn_graph(rng.normal(size=(9, 3)), GraphConfig(k=3))
    bn = T.BatchNorm(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.normal(size=3)
    targets = rng.integers(1, 4, size=5)

    def bn_fn(x, gamma, beta):
        bn.gamma, bn.beta = gamma, beta
        return T.batch_norm(x, bn, training=True)

    def gconv(h, w, b):
        from .layers import GraphConvLayer, graph_conv_forward

        layer = GraphConvLayer(W=w, b=b, bn=bn)
        return graph_conv_forward(h, layer, g, training=True)

    cfg = ModelConfig(
        streams_enabled={"g": True, "c": False, "n": False, "s": False}, g_widths=[4], fusion_hidden=[6, 5]
    )
    head = init_state(cfg, n_bands=2, n_classes=3, seed=int(rng.integers(1 << 30)))

    def fusion(x):
        return fuse_and_classify([x], head, training=True)

    cases = {
        "matmul": (T.matmul, [rng.normal(size=(4, 3)), rng.normal(size=(3, 5))]),
        "add_broadcast": (T.add, [rng.normal(size=(4, 3)), rng.normal(size=(3,))]),
        "mul_broadcast": (T.mul, [rng.normal(size=(4, 3)), rng.normal(size=(4, 1))]),
        "conv2d": (T.conv2d, [rng.normal(size=(5, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)]),
        "maxpool2d_same": (T.maxpool2d_same, [_spaced(rng, (6, 6, 2))]),
        "batch_norm": (bn_fn, [rng.normal(size=(7, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3)]),
        "relu": (T.relu, [_away_from_zero(rng, (4, 5))]),
        "leaky_relu": (T.leaky_relu, [_away_from_zero(rng, (4, 5))]),
        "softmax": (T.softmax, [rng.normal(size=(4, 5))]),
        "log_softmax": (T.log_softmax, [rng.normal(size=(4, 5))]),
        "reduce_max": (lambda x: T.reduce_max(x, axis=1), [_spaced(rng, (4, 5))]),
        "signed_sqrt": (T.signed_sqrt, [_away_from_zero(rng, (3, 4), lo=0.1)]),
        "box_sum2d": (lambda x: T.box_sum2d(x, 1), [rng.normal(size=(4, 5, 2))]),
        "spmv": (lambda x: spmv(g.laplacian_sym, x), [rng.normal(size=(9, 2))]),
        "graph_conv": (gconv, [rng.normal(size=(9, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)]),
        "graph_neighbor_maxpool": (lambda h: graph_neighbor_maxpool(h, g), [_spaced(rng, (9, 2))]),
        "sop": (lambda h: sop(h).vectorized, [rng.uniform(0.5, 1.5, size=(6, 3))]),
        "gsop_global": (lambda h: gsop(h, g, mode="global"), [rng.uniform(0.5, 1.5, size=(9, 2))]),
        "gsop_per_node": (lambda h: gsop(h, g, mode="per_node"), [rng.uniform(0.5, 1.5, size=(9, 2))]),
        "fusion_head": (fusion, [rng.normal(size=(5, 4))]),
        "cross_entropy": (lambda z: cross_entropy_loss(z, targets), [rng.normal(size=(5, 3))]),
    }
    return cases


def run_suite(seeds: int = 20, names: Sequence[str] | None = None) -> list[CheckResult]:
    results: dict[str, CheckResult] = {}
    with T.default_dtype(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            for name, (fn, arrays) in _cases(rng).items():
                if names is not None and name not in names:
                    continue
                t0 = time.perf_counter()
                err = check_gradients(fn, arrays, seed=seed)
                dt = time.perf_counter() - t0
                prev = results.get(name)
                if prev is None:
                    results[name] = CheckResult(name, err, 1, dt)
                else:
                    prev.max_rel_error = max(prev.max_rel_error, err)
                    prev.seeds += 1
                    prev.seconds += dt
    return list(results.values())
