"""Four-stream model: graph (G), convolutional (C), second-order (N) and
graph second-order (S) streams fused by a per-pixel MLP head.

Pixels are indexed in row-major order, ``i = row * n_cols + col``, and every
stream returns an ``n x width`` matrix aligned to that order.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DataError, DimensionError, FormatError
from .graph import GraphConfig, KnnGraph
from .layers import (
    ConvBlock,
    GraphConvLayer,
    Linear,
    conv_block_forward,
    graph_conv_forward,
    graph_neighbor_maxpool,
    gsop,
    patch_sop,
)
from .tensor import BatchNorm, Tensor

STREAMS = ("g", "c", "n", "s")
CHECKPOINT_MAGIC = b"MSHC"
CHECKPOINT_VERSION = 1


def _default_streams() -> dict[str, bool]:
    return {s: True for s in STREAMS}


@dataclass
class ModelConfig:
    g_widths: list[int] = field(default_factory=lambda: [64, 32])
    # (kernel size, output channels) per C-stream block
    c_blocks: list[list[int]] = field(default_factory=lambda: [[3, 32], [3, 64], [1, 128]])
    n_extractor: list[int] = field(default_factory=lambda: [3, 32])
    n_patch_radius: int = 2
    n_projection: int = 128
    s_projection: int = 16
    fusion_hidden: list[int] = field(default_factory=lambda: [512, 128])
    streams_enabled: dict[str, bool] = field(default_factory=_default_streams)
    propagation: str = "laplacian"
    gsop_mode: str = "per_node"
    shared_trunk: bool = True
    knn: GraphConfig = field(default_factory=GraphConfig)

    def enabled(self) -> list[str]:
        return [s for s in STREAMS if self.streams_enabled.get(s, False)]

    def uses_graph(self) -> bool:
        return bool({"g", "s"} & set(self.enabled()))

    def stream_widths(self) -> dict[str, int]:
        widths = {
            "g": self.g_widths[-1],
            "c": self.c_blocks[-1][1],
            "n": self.n_projection or self.n_extractor[1] ** 2,
            "s": self.s_projection**2,
        }
        return {s: widths[s] for s in self.enabled()}

    def fusion_width(self) -> int:
        return sum(self.stream_widths().values())

    def validate(self) -> None:
        if set(self.streams_enabled) - set(STREAMS):
            raise ConfigurationError(f"unknown streams {sorted(set(self.streams_enabled) - set(STREAMS))}")
        if not self.enabled():
            raise ConfigurationError("at least one stream must be enabled")
        if not self.g_widths or not self.c_blocks:
            raise ConfigurationError("g_widths and c_blocks must be non-empty")
        for k, _ in self.c_blocks + [self.n_extractor]:
            if k % 2 == 0:
                raise ConfigurationError(f"conv kernel extents must be odd, got {k}")
        if self.propagation not in ("laplacian", "renorm_adjacency", "identity"):
            raise ConfigurationError(f"unknown propagation {self.propagation!r}")
        if self.gsop_mode not in ("per_node", "global"):
            raise ConfigurationError(f"unknown gsop_mode {self.gsop_mode!r}")
        self.knn.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        knn = d.pop("knn", None)
        if isinstance(knn, dict):
            gknown = {f.name for f in fields(GraphConfig)}
            if set(knn) - gknown:
                raise ConfigurationError(f"unknown knn config keys: {sorted(set(knn) - gknown)}")
            knn = GraphConfig(**knn)
        cfg = cls(**d, **({"knn": knn} if knn is not None else {}))
        if "streams_enabled" in d:
            cfg.streams_enabled = {s: bool(cfg.streams_enabled.get(s, False)) for s in STREAMS}
        return cfg


class ModelState:
    """All parameters and batch-norm statistics of one model instance."""

    def __init__(self, config: ModelConfig, n_bands: int, n_classes: int, seed: int):
        self.config = config
        self.n_bands = n_bands
        self.n_classes = n_classes
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.bns: dict[str, BatchNorm] = {}
        self.trunk: list[GraphConvLayer] = []
        self.s_trunk: list[GraphConvLayer] = []
        self.c_blocks: list[ConvBlock] = []
        self.n_extractor: ConvBlock | None = None
        self.n_bn: BatchNorm | None = None
        self.n_proj: Linear | None = None
        self.s_proj: Linear | None = None
        self.fusion: list[tuple[Linear, BatchNorm | None]] = []

    # registry helpers -------------------------------------------------
    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name: str, width: int) -> BatchNorm:
        bn = BatchNorm(width)
        bn.gamma.name, bn.beta.name = f"{name}.gamma", f"{name}.beta"
        self.params[bn.gamma.name] = bn.gamma
        self.params[bn.beta.name] = bn.beta
        self.bns[name] = bn
        return bn

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def weight_names(self) -> list[str]:
        """Names of regularised weights: dense matrices and conv kernels."""
        return [n for n in self.params if n.endswith(".W") or n.endswith(".kernel")]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, bn in self.bns.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        bn_name, _, which = name.rpartition(".")
        setattr(self.bns[bn_name], which, np.array(value, dtype=T.get_default_dtype()))

    def parameter_count(self, prefix: str | None = None) -> int:
        return sum(t.size for n, t in self.params.items() if prefix is None or n.startswith(prefix + "."))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ModelState":
        dt = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(dt)
        for bn in self.bns.values():
            bn.running_mean = bn.running_mean.astype(dt)
            bn.running_var = bn.running_var.astype(dt)
        return self


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _graph_trunk(state: ModelState, rng, prefix: str, n_in: int) -> list[GraphConvLayer]:
    layers = []
    width = n_in
    for l, out in enumerate(state.config.g_widths):
        name = f"{prefix}.gc{l}"
        bn = state._bn(f"{name}.bn", width)
        W = state._param(f"{name}.W", _glorot(rng, (width, out), width, out))
        b = state._param(f"{name}.b", np.zeros(out))
        layers.append(GraphConvLayer(W=W, b=b, bn=bn))
        width = out
    return layers


def _conv_block(state: ModelState, rng, name: str, k: int, cin: int, cout: int) -> ConvBlock:
    kernel = state._param(f"{name}.kernel", _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
    bias = state._param(f"{name}.bias", np.zeros(cout))
    return ConvBlock(kernel=kernel, bias=bias, bn=state._bn(f"{name}.bn", cout))


def _linear(state: ModelState, rng, name: str, n_in: int, n_out: int, bias: bool = True) -> Linear:
    W = state._param(f"{name}.W", _glorot(rng, (n_in, n_out), n_in, n_out))
    b = state._param(f"{name}.b", np.zeros(n_out)) if bias else None
    return Linear(W, b)


def init_state(config: ModelConfig, n_bands: int, n_classes: int, seed: int = 0) -> ModelState:
    """Glorot-uniform weights, zero biases, BN scale 1 / shift 0."""
    config.validate()
    if n_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {n_classes}")
    state = ModelState(config, n_bands, n_classes, seed)
    on = set(config.enabled())
    # each section draws from its own child stream, so toggling one stream
    # leaves the initial values of the others unchanged
    sub = {name: np.random.default_rng([seed, i]) for i, name in enumerate(("trunk", "s_trunk", "c", "n", "s", "fuse"))}
    if on & {"g", "s"}:
        state.trunk = _graph_trunk(state, sub["trunk"], "trunk", n_bands)
    if "s" in on:
        if not config.shared_trunk:
            state.s_trunk = _graph_trunk(state, sub["s_trunk"], "s.trunk", n_bands)
        state.s_proj = _linear(state, sub["s"], "s.proj", config.g_widths[-1], config.s_projection, bias=False)
    if "c" in on:
        cin = n_bands
        for i, (k, cout) in enumerate(config.c_blocks):
            state.c_blocks.append(_conv_block(state, sub["c"], f"c.block{i}", k, cin, cout))
            cin = cout
    if "n" in on:
        k, f = config.n_extractor
        state.n_extractor = _conv_block(state, sub["n"], "n.extract", k, n_bands, f)
        state.n_bn = state._bn("n.bn", f)
        if config.n_projection:
            state.n_proj = _linear(state, sub["n"], "n.proj", f * f, config.n_projection)
    width = config.fusion_width()
    for i, h in enumerate(config.fusion_hidden):
        state.fusion.append((_linear(state, sub["fuse"], f"fuse.fc{i}", width, h), state._bn(f"fuse.fc{i}.bn", h)))
        width = h
    state.fusion.append((_linear(state, sub["fuse"], f"fuse.fc{len(config.fusion_hidden)}", width, n_classes), None))
    return state


# ----------------------------------------------------------------------
# streams


def _as_cube(cube) -> Tensor:
    c = T.as_tensor(cube)
    if c.ndim != 3:
        raise DimensionError(f"cube must be M x N x B, got {c.shape}")
    return c


def run_graph_trunk(x_nodes, graph: KnnGraph, layers, training: bool = True, propagation: str = "laplacian") -> Tensor:
    """Stacked graph convolutions with ReLU between layers (none after the last)."""
    h = T.as_tensor(x_nodes)
    for l, layer in enumerate(layers):
        if l > 0:
            h = T.relu(h)
        h = graph_conv_forward(h, layer, graph, training=training, propagation=propagation)
    return h


def run_g_stream(cube_features, graph: KnnGraph, state: ModelState, training: bool = True, trunk_out=None, rows=None) -> Tensor:
    if trunk_out is None:
        trunk_out = run_graph_trunk(cube_features, graph, state.trunk, training, state.config.propagation)
    return graph_neighbor_maxpool(trunk_out, graph, rows=rows)


def run_c_stream(cube, state: ModelState, training: bool = True, rows=None) -> Tensor:
    x = _as_cube(cube)
    M, N, _ = x.shape
    for block in state.c_blocks:
        x = conv_block_forward(x, block, training)
    flat = T.reshape(x, (M * N, x.shape[2]))
    return flat if rows is None else T.take_rows(flat, rows)


def run_n_stream(cube, state: ModelState, training: bool = True, rows=None, return_raw: bool = False) -> Tensor:
    """Extractor block, BN, per-pixel SOP over a square patch, then projection."""
    x = _as_cube(cube)
    feat = conv_block_forward(x, state.n_extractor, training)
    feat = T.batch_norm(feat, state.n_bn, training=training)
    raw = patch_sop(feat, state.config.n_patch_radius, rows=rows)
    if return_raw or state.n_proj is None:
        return raw
    return state.n_proj(raw)


def run_s_stream(h_trunk, graph: KnnGraph, state: ModelState, training: bool = True, rows=None) -> Tensor:
    z = state.s_proj(T.as_tensor(h_trunk))
    if state.config.gsop_mode == "global":
        vec = gsop(z, graph, mode="global")
        count = graph.n if rows is None else len(rows)
        return T.mul(T.reshape(vec, (1, vec.shape[0])), np.ones((count, 1), dtype=vec.data.dtype))
    return gsop(z, graph, mode="per_node", rows=rows)


def fuse_and_classify(outs, state: ModelState, training: bool = True) -> Tensor:
    """Concatenate stream outputs and apply the per-pixel MLP (1x1 convs)."""
    outs = list(outs.values()) if isinstance(outs, dict) else list(outs)
    if not outs:
        raise DimensionError("fuse_and_classify: no stream outputs")
    x = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    expected = state.fusion[0][0].W.shape[0]
    if x.shape[1] != expected:
        raise DimensionError(f"fusion input width {x.shape[1]} != configured {expected}")
    for lin, bn in state.fusion:
        x = lin(x)
        if bn is not None:
            x = T.leaky_relu(T.batch_norm(x, bn, training=training))
    return x


def cross_entropy_loss(logits, labels, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[true class] over labelled pixels.

    ``labels`` holds class ids 1..P with 0 meaning unlabelled; ``mask``
    optionally restricts which pixels count.
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    P = logits.shape[1]
    if labels.max(initial=0) > P or labels.min(initial=0) < 0:
        raise DataError(f"labels must lie in 0..{P}")
    keep = labels > 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).reshape(-1)
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise ContractError("cross_entropy_loss: no labelled pixel in the batch")
    logp = T.log_softmax(T.take_rows(logits, rows), axis=1)
    return T.scale(T.reduce_sum(T.pick(logp, labels[rows] - 1)), -1.0 / rows.size)


def compute_streams(cube, graph: KnnGraph | None, state: ModelState, training: bool = True, rows=None) -> dict[str, Tensor]:
    """Outputs of every enabled stream, one row per pixel (or per entry of ``rows``).

    Trunks (convolutions, graph convolutions) always see the whole raster and
    graph; ``rows`` only limits the per-pixel pooling heads.
    """
    cfg = state.config
    x = _as_cube(cube)
    M, N, B = x.shape
    if B != state.n_bands:
        raise DimensionError(f"cube has {B} bands, model expects {state.n_bands}")
    if rows is not None:
        rows = np.asarray(rows, dtype=np.intp)
    outs: dict[str, Tensor] = {}
    trunk_out = None
    if cfg.uses_graph():
        if graph is None or graph.n != M * N:
            raise DimensionError("graph streams need a KNN graph over all M*N pixels")
        nodes = T.reshape(x, (M * N, B))
        trunk_out = run_graph_trunk(nodes, graph, state.trunk, training, cfg.propagation)
    for s in cfg.enabled():
        if s == "g":
            outs["g"] = run_g_stream(None, graph, state, training, trunk_out=trunk_out, rows=rows)
        elif s == "c":
            outs["c"] = run_c_stream(x, state, training, rows=rows)
        elif s == "n":
            outs["n"] = run_n_stream(x, state, training, rows=rows)
        elif s == "s":
            h = trunk_out
            if not cfg.shared_trunk:
                h = run_graph_trunk(T.reshape(x, (M * N, B)), graph, state.s_trunk, training, cfg.propagation)
            outs["s"] = run_s_stream(h, graph, state, training, rows=rows)
    return outs


def forward_full(cube, graph: KnnGraph | None, state: ModelState, labels=None, mask=None, training: bool = False, rows=None):
    """Streams, fusion and (when labels are given) the masked loss.

    Returns ``(logits, loss)``; ``loss`` is None without labels.  Labels and
    mask cover the whole raster; with ``rows`` they are sliced to match.
    """
    outs = compute_streams(cube, graph, state, training, rows=rows)
    logits = fuse_and_classify(outs, state, training)
    loss = None
    if labels is not None:
        lab = np.asarray(labels).reshape(-1)
        msk = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        if rows is not None:
            lab = lab[rows]
            msk = None if msk is None else msk[rows]
        loss = cross_entropy_loss(logits, lab, msk)
    return logits, loss


def predict(cube, graph: KnnGraph | None, state: ModelState) -> np.ndarray:
    """Eval-mode class ids 1..P as an M x N grid."""
    M, N = np.shape(cube.data if isinstance(cube, Tensor) else cube)[:2]
    with T.no_grad():
        logits, _ = forward_full(cube, graph, state, training=False)
    return (np.argmax(logits.data, axis=1) + 1).reshape(M, N).astype(np.int64)


# ----------------------------------------------------------------------
# checkpoint container


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def state_records(state: ModelState) -> dict[str, np.ndarray]:
    recs = {name: t.data for name, t in state.params.items()}
    recs.update(state.buffers())
    return recs


def save_checkpoint(path, state: ModelState, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    header = {
        "model": state.config.to_dict(),
        "n_bands": state.n_bands,
        "n_classes": state.n_classes,
        "seed": state.seed,
        "meta": meta or {},
    }
    records = state_records(state)
    for k, v in (extra or {}).items():
        records[f"extra.{k}"] = v
    buf = io.BytesIO()
    hb = _canonical_json(header)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(state, extra_records, meta)``; arrays take the global precision."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}, need {size} more")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, hlen = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = take("<I")
    records = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: record {name!r} needs {nbytes} bytes at offset {pos}, file has {len(raw) - pos}")
        records[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        pos += nbytes
    cfg = ModelConfig.from_dict(header["model"])
    state = init_state(cfg, header["n_bands"], header["n_classes"], header["seed"])
    dt = T.get_default_dtype()
    extra = {}
    buffers = state.buffers()
    for name, arr in records.items():
        if name.startswith("extra."):
            extra[name[len("extra."):]] = arr.astype(dt)
        elif name in state.params:
            if state.params[name].shape != arr.shape:
                raise FormatError(f"{path}: record {name!r} has shape {arr.shape}, expected {state.params[name].shape}")
            state.params[name].data = arr.astype(dt)
        elif name in buffers:
            state.set_buffer(name, arr)
        else:
            raise FormatError(f"{path}: unexpected record {name!r}")
    missing = set(state_records(state)) - set(records)
    if missing:
        raise FormatError(f"{path}: missing records {sorted(missing)[:5]}")
    return state, extra, header.get("meta", {})
