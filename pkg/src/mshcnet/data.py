"""Hyperspectral cubes, label maps and splits: file formats, preprocessing and
a synthetic blob generator.

Native containers
-----------------
``hsc1`` cube: ``b"HSC1\\n"``, one line of canonical JSON
``{"b","class_names","dtype":"f32","m","n","order":"bsq"}``, newline, then
little-endian float32 values, band-sequential.

``HSL1`` grids: ``b"HSL1\\n"``, one line of canonical JSON
``{"class_names","dtype":"u16","grids":[...],"m","n"}``, newline, then one
little-endian uint16 M x N grid per name in ``grids``.  A ``labels`` grid
holds class ids (0 = unlabelled); a ``split`` grid holds 0 = unused,
1 = train, 2 = test.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, GenerationError

CUBE_MAGIC = b"HSC1\n"
GRID_MAGIC = b"HSL1\n"
SPLIT_UNUSED, SPLIT_TRAIN, SPLIT_TEST = 0, 1, 2

# per-class (train, test) counts of the reference splits
REFERENCE_SPLITS: dict[str, list[tuple[str, int, int]]] = {
    "indian_pines": [
        ("Alfalfa", 15, 39),
        ("Corn-notill", 50, 1384),
        ("Corn-mintill", 50, 784),
        ("Corn", 50, 184),
        ("Grass-pasture", 50, 447),
        ("Grass-trees", 50, 697),
        ("Grass-pasture-mowed", 15, 11),
        ("Hay-windrowed", 50, 439),
        ("Oats", 15, 5),
        ("Soybean-notill", 50, 918),
        ("Soybean-mintill", 50, 2418),
        ("Soybean-clean", 50, 564),
        ("Wheat", 50, 162),
        ("Woods", 50, 1244),
        ("Bldg-grass-tree-drives", 50, 330),
        ("Stone-steel-towers", 50, 45),
    ],
    "pavia_university": [
        ("Asphalt", 548, 6631),
        ("Meadows", 540, 18649),
        ("Gravel", 392, 2099),
        ("Trees", 524, 3064),
        ("Metal-sheets", 265, 1345),
        ("Bare-soil", 532, 5029),
        ("Bitumen", 375, 1330),
        ("Bricks", 514, 3682),
        ("Shadows", 231, 947),
    ],
    "houston2013": [
        ("Healthy grass", 198, 1053),
        ("Stressed grass", 190, 1064),
        ("Synthetic grass", 192, 505),
        ("Trees", 188, 1056),
        ("Soil", 186, 1056),
        ("Water", 182, 143),
        ("Residential", 196, 1072),
        ("Commercial", 191, 1053),
        ("Road", 193, 1059),
        ("Highway", 191, 1036),
        ("Railway", 181, 1054),
        ("Parking Lot1", 192, 1041),
        ("Parking Lot2", 184, 285),
        ("Tennis court", 181, 247),
        ("Running track", 187, 473),
    ],
}

# 1-based noisy / water-absorption bands of the 220-band Indian Pines scene
INDIAN_PINES_REMOVED_BANDS = "104-108,150-163,220"


@dataclass
class HsiCube:
    values: np.ndarray  # M x N x B
    band_mask: np.ndarray | None = None  # over the original bands
    provenance: str = ""
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise DataError(f"cube values must be M x N x B, got {self.values.shape}")
        if self.band_mask is None:
            self.band_mask = np.ones(self.values.shape[2], dtype=bool)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    grid: np.ndarray  # M x N ids, 0 = unlabelled
    class_names: list[str]
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        self.test_mask = np.asarray(self.test_mask, dtype=bool)
        self.validate()

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        g = self.grid
        if self.train_mask.shape != g.shape or self.test_mask.shape != g.shape:
            raise DataError("masks must match the label grid shape")
        if np.any(self.train_mask & self.test_mask):
            raise DataError("train and test masks overlap")
        if np.any((self.train_mask | self.test_mask) & (g == 0)):
            raise DataError("masks select unlabelled pixels")
        P = self.n_classes
        if g.min(initial=0) < 0 or g.max(initial=0) > P:
            raise DataError(f"class id outside 0..{P}")
        present = set(np.unique(g[g > 0]).tolist())
        missing = sorted(set(range(1, P + 1)) - present)
        if missing:
            raise DataError(f"classes {missing} have no labelled pixel")

    def split_counts(self) -> list[tuple[int, int]]:
        """Per-class (train, test) pixel counts, class 1 first."""
        return [
            (int(np.sum(self.train_mask & (self.grid == c))), int(np.sum(self.test_mask & (self.grid == c))))
            for c in range(1, self.n_classes + 1)
        ]


# ----------------------------------------------------------------------
# native containers


def _header_line(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def _read_header(raw: bytes, magic: bytes, path) -> tuple[dict, int]:
    if not raw.startswith(magic):
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise FormatError(f"{path}: header line not terminated")
    try:
        header = json.loads(raw[len(magic):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    return header, end + 1


def save_cube(path, cube: HsiCube) -> None:
    M, N, B = cube.shape
    header = {"m": M, "n": N, "b": B, "dtype": "f32", "order": "bsq", "class_names": list(cube.class_names)}
    payload = np.ascontiguousarray(np.transpose(cube.values, (2, 0, 1)), dtype="<f4").tobytes()
    Path(path).write_bytes(CUBE_MAGIC + _header_line(header) + payload)


def load_cube(path, format: str = "hsc1", payload_path=None) -> HsiCube:
    """Read a cube; values are returned in native units with no normalisation."""
    if format == "envi_bsq":
        return load_envi(path, payload_path)
    if format != "hsc1":
        raise ConfigurationError(f"unknown cube format {format!r}")
    raw = Path(path).read_bytes()
    header, off = _read_header(raw, CUBE_MAGIC, path)
    if header.get("dtype") != "f32" or header.get("order") != "bsq":
        raise FormatError(f"{path}: only f32 band-sequential payloads are supported")
    M, N, B = int(header["m"]), int(header["n"]), int(header["b"])
    expected = 4 * M * N * B
    actual = len(raw) - off
    if actual != expected:
        raise FormatError(
            f"{path}: payload starting at byte {off} should hold {expected} bytes, found {actual}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=off).reshape(B, M, N).transpose(1, 2, 0)
    values = values.astype(np.float32)
    _check_finite(values, path)
    return HsiCube(values, provenance=f"hsc1:{path}", class_names=list(header.get("class_names", [])))


def _check_finite(values: np.ndarray, path) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        r, c, b = np.argwhere(bad)[0]
        raise DataError(f"{path}: non-finite value at row {r}, col {c}, band {b}")


def save_grids(path, grids: dict[str, np.ndarray], class_names: list[str]) -> None:
    names = list(grids)
    shapes = {np.shape(g) for g in grids.values()}
    if len(shapes) != 1:
        raise DataError(f"grids have differing shapes {shapes}")
    M, N = shapes.pop()
    header = {"m": M, "n": N, "dtype": "u16", "grids": names, "class_names": list(class_names)}
    body = b"".join(np.ascontiguousarray(grids[k], dtype="<u2").tobytes() for k in names)
    Path(path).write_bytes(GRID_MAGIC + _header_line(header) + body)


def load_grids(path) -> tuple[dict[str, np.ndarray], list[str]]:
    raw = Path(path).read_bytes()
    header, off = _read_header(raw, GRID_MAGIC, path)
    M, N = int(header["m"]), int(header["n"])
    names = list(header.get("grids", ["labels"]))
    expected = 2 * M * N * len(names)
    if len(raw) - off != expected:
        raise FormatError(
            f"{path}: payload starting at byte {off} should hold {expected} bytes, found {len(raw) - off}"
        )
    grids = {}
    for i, name in enumerate(names):
        grids[name] = np.frombuffer(raw, dtype="<u2", count=M * N, offset=off + 2 * M * N * i).reshape(M, N).astype(np.int64)
    return grids, list(header.get("class_names", []))


def save_labels(path, labels: LabelMap) -> None:
    split = np.zeros(labels.grid.shape, dtype=np.int64)
    split[labels.train_mask] = SPLIT_TRAIN
    split[labels.test_mask] = SPLIT_TEST
    save_grids(path, {"labels": labels.grid, "split": split}, labels.class_names)


def load_labels_and_split(path_labels, path_split=None) -> LabelMap:
    """Label grid plus train/test masks.

    The split grid is read from ``path_split`` when given, otherwise from a
    ``split`` grid stored alongside the labels.
    """
    grids, names = load_grids(path_labels)
    if "labels" not in grids:
        raise FormatError(f"{path_labels}: no 'labels' grid")
    grid = grids["labels"]
    if path_split is not None:
        sgrids, _ = load_grids(path_split)
        split = sgrids.get("split", next(iter(sgrids.values())))
    elif "split" in grids:
        split = grids["split"]
    else:
        raise FormatError(f"{path_labels}: no split grid and no split file given")
    if split.shape != grid.shape:
        raise DataError(f"split grid {split.shape} does not match labels {grid.shape}")
    if not set(np.unique(split).tolist()) <= {SPLIT_UNUSED, SPLIT_TRAIN, SPLIT_TEST}:
        raise DataError("split grid values must be 0 (unused), 1 (train) or 2 (test)")
    if not names:
        names = [f"class_{i}" for i in range(1, int(grid.max()) + 1)]
    if int(grid.max(initial=0)) > len(names):
        raise DataError(f"class id {int(grid.max())} exceeds the {len(names)} named classes")
    return LabelMap(grid, names, split == SPLIT_TRAIN, split == SPLIT_TEST)


# ----------------------------------------------------------------------
# ENVI-style band-sequential input

_ENVI_DTYPES = {1: "u1", 2: "i2", 4: "f4", 5: "f8", 12: "u2"}


def parse_envi_header(path) -> dict[str, str]:
    text = Path(path).read_text()
    if not text.lstrip().startswith("ENVI"):
        raise FormatError(f"{path}: ENVI header must start with 'ENVI'")
    out = {}
    # values may be brace-delimited and span lines
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", text, flags=re.MULTILINE):
        out[m.group(1).strip().lower()] = m.group(2).strip()
    return out


def load_envi(header_path, payload_path=None) -> HsiCube:
    hdr = parse_envi_header(header_path)
    try:
        samples, lines, bands = int(hdr["samples"]), int(hdr["lines"]), int(hdr["bands"])
        dtype_code = int(hdr["data type"])
    except KeyError as exc:
        raise FormatError(f"{header_path}: missing header key {exc}") from None
    interleave = hdr.get("interleave", "bsq").lower()
    if interleave != "bsq":
        raise ConfigurationError(f"{header_path}: unsupported interleave {interleave!r} (only bsq)")
    if dtype_code not in _ENVI_DTYPES:
        raise FormatError(f"{header_path}: unsupported data type {dtype_code}")
    order = "<" if int(hdr.get("byte order", "0")) == 0 else ">"
    offset = int(hdr.get("header offset", "0"))
    if payload_path is None:
        base = Path(header_path).with_suffix("")
        for cand in (base, base.with_suffix(".img"), base.with_suffix(".raw"), base.with_suffix(".dat"), base.with_suffix(".bsq")):
            if cand.exists() and cand != Path(header_path):
                payload_path = cand
                break
        else:
            raise FormatError(f"{header_path}: payload file not found next to header")
    raw = Path(payload_path).read_bytes()
    dt = np.dtype(order + _ENVI_DTYPES[dtype_code])
    expected = offset + dt.itemsize * samples * lines * bands
    if len(raw) != expected:
        raise FormatError(f"{payload_path}: expected {expected} bytes (header offset {offset}), found {len(raw)}")
    values = np.frombuffer(raw, dtype=dt, offset=offset).reshape(bands, lines, samples).transpose(1, 2, 0)
    values = values.astype(np.float32)
    _check_finite(values, payload_path)
    return HsiCube(values, provenance=f"envi:{header_path}")


def write_envi(header_path, payload_path, values: np.ndarray, dtype_code: int = 4) -> None:
    """Write an M x N x B array as an ENVI bsq pair (fixtures and tests)."""
    M, N, B = values.shape
    dt = np.dtype("<" + _ENVI_DTYPES[dtype_code])
    Path(payload_path).write_bytes(np.ascontiguousarray(values.transpose(2, 0, 1), dtype=dt).tobytes())
    Path(header_path).write_text(
        "ENVI\n"
        f"samples = {N}\nlines = {M}\nbands = {B}\nheader offset = 0\n"
        f"data type = {dtype_code}\ninterleave = bsq\nbyte order = 0\n"
    )


# ----------------------------------------------------------------------
# preprocessing


def parse_band_list(spec: str) -> list[int]:
    """'104-108,150-163,220' -> [104, ..., 108, 150, ..., 163, 220]."""
    out: list[int] = []
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise ConfigurationError(f"empty band range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def filter_bands(cube: HsiCube, remove) -> HsiCube:
    """Drop 1-based band indices (relative to the cube's current bands)."""
    remove = list(remove)
    B = cube.bands
    if len(set(remove)) != len(remove):
        raise ConfigurationError("duplicate band index in removal list")
    bad = [b for b in remove if not 1 <= b <= B]
    if bad:
        raise ConfigurationError(f"band indices {bad} outside 1..{B}")
    if len(remove) == B:
        raise ConfigurationError("cannot remove every band")
    keep = np.ones(B, dtype=bool)
    keep[np.asarray(remove, dtype=np.intp) - 1] = False
    mask = cube.band_mask.copy()
    mask[np.flatnonzero(mask)[~keep]] = False
    return HsiCube(cube.values[:, :, keep], mask, cube.provenance, list(cube.class_names))


def normalize(cube: HsiCube, mode: str = "per_band_zscore") -> HsiCube:
    v = cube.values.astype(np.float64)
    if mode == "per_band_zscore":
        mu = v.mean(axis=(0, 1))
        sd = np.maximum(v.std(axis=(0, 1)), 1e-8)
        out = (v - mu) / sd
    elif mode == "minmax01":
        lo, hi = v.min(axis=(0, 1)), v.max(axis=(0, 1))
        out = (v - lo) / np.maximum(hi - lo, 1e-8)
    elif mode == "none":
        out = v
    else:
        raise ConfigurationError(f"unknown normalisation {mode!r}")
    return HsiCube(out, cube.band_mask.copy(), cube.provenance, list(cube.class_names))


def split_by_counts(grid: np.ndarray, counts: list[tuple[int, int]], class_names: list[str], seed: int = 0) -> LabelMap:
    """Random per-class train/test split with fixed (train, test) counts."""
    grid = np.asarray(grid, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train = np.zeros(grid.shape, dtype=bool)
    test = np.zeros(grid.shape, dtype=bool)
    for c, (ntr, nte) in enumerate(counts, start=1):
        pix = np.flatnonzero(grid.reshape(-1) == c)
        if pix.size < ntr + nte:
            raise DataError(f"class {c} has {pix.size} pixels, split needs {ntr + nte}")
        pix = rng.permutation(pix)
        train.reshape(-1)[pix[:ntr]] = True
        test.reshape(-1)[pix[ntr:ntr + nte]] = True
    return LabelMap(grid, class_names, train, test)


def stratified_split(grid: np.ndarray, class_names: list[str], train_fraction: float = 0.2, seed: int = 0) -> LabelMap:
    grid = np.asarray(grid, dtype=np.int64)
    counts = []
    for c in range(1, len(class_names) + 1):
        n = int(np.sum(grid == c))
        ntr = min(n - 1, max(1, int(round(train_fraction * n)))) if n > 1 else n
        counts.append((ntr, n - ntr))
    return split_by_counts(grid, counts, class_names, seed)


# ----------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    m: int = 32
    n: int = 32
    b: int = 8
    p: int = 4
    noise_sigma: float = 0.05
    separation: float = 1.0
    blobs_per_class: int = 2
    min_pixels_per_class: int = 10
    train_fraction: float = 0.2
    seed: int = 0
    signatures: np.ndarray | None = None

    def validate(self) -> None:
        if self.p < 2:
            raise ConfigurationError(f"need P >= 2 classes, got {self.p}")
        if self.m < 4 or self.n < 4 or self.b < 1:
            raise ConfigurationError("raster must be at least 4 x 4 with one band")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.signatures is not None:
            s = np.asarray(self.signatures)
            if s.shape != (self.p, self.b):
                raise ConfigurationError(f"signatures must be {self.p} x {self.b}")
            d = np.linalg.norm(s[:, None] - s[None], axis=2) + np.eye(self.p)
            if np.any(d == 0):
                raise ConfigurationError("class signatures must be pairwise distinct")


def class_signatures(p: int, b: int, separation: float, rng) -> np.ndarray:
    """Random signatures rescaled so the closest pair is ``separation`` apart."""
    s = rng.normal(size=(p, b))
    d = np.linalg.norm(s[:, None] - s[None], axis=2)
    d[np.diag_indices(p)] = np.inf
    return s * (separation / d.min())


def synthetic_signatures(spec: SyntheticSpec) -> np.ndarray:
    """The class signatures :func:`generate_synthetic` uses for ``spec``."""
    if spec.signatures is not None:
        return np.asarray(spec.signatures)
    return class_signatures(spec.p, spec.b, spec.separation, np.random.default_rng(spec.seed))


def generate_synthetic(spec: SyntheticSpec, max_tries: int = 100) -> tuple[HsiCube, LabelMap]:
    """Elliptical class blobs (classes 2..P) over a background class 1."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sig = np.asarray(spec.signatures) if spec.signatures is not None else class_signatures(spec.p, spec.b, spec.separation, rng)
    rr, cc = np.mgrid[0:spec.m, 0:spec.n]
    for _ in range(max_tries):
        grid = np.ones((spec.m, spec.n), dtype=np.int64)
        for cls in range(2, spec.p + 1):
            for _ in range(spec.blobs_per_class):
                r0, c0 = rng.uniform(0, spec.m), rng.uniform(0, spec.n)
                a = rng.uniform(spec.m / 10, spec.m / 4)
                b = rng.uniform(spec.n / 10, spec.n / 4)
                th = rng.uniform(0, np.pi)
                dr, dc = rr - r0, cc - c0
                u = dr * np.cos(th) + dc * np.sin(th)
                v = -dr * np.sin(th) + dc * np.cos(th)
                grid[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = cls
        counts = np.bincount(grid.reshape(-1), minlength=spec.p + 1)[1:]
        if counts.min() >= spec.min_pixels_per_class:
            break
    else:
        raise GenerationError(f"could not place blobs with >= {spec.min_pixels_per_class} pixels per class in {max_tries} tries")
    values = sig[grid - 1] + (rng.normal(scale=spec.noise_sigma, size=(spec.m, spec.n, spec.b)) if spec.noise_sigma > 0 else 0.0)
    names = [f"class_{i}" for i in range(1, spec.p + 1)]
    labels = stratified_split(grid, names, spec.train_fraction, seed=int(rng.integers(1 << 31)))
    cube = HsiCube(values.astype(np.float32), provenance=f"synthetic:seed={spec.seed}", class_names=names)
    return cube, labels


def nearest_signature(values: np.ndarray, signatures: np.ndarray) -> np.ndarray:
    """Class id (1-based) of the closest signature for every pixel."""
    flat = values.reshape(-1, values.shape[-1])
    d = np.linalg.norm(flat[:, None, :] - signatures[None], axis=2)
    return (np.argmin(d, axis=1) + 1).reshape(values.shape[:-1])
