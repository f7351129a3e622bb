import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mshcnet.data import (
    INDIAN_PINES_REMOVED_BANDS,
    REFERENCE_SPLITS,
    HsiCube,
    LabelMap,
    SyntheticSpec,
    filter_bands,
    generate_synthetic,
    load_cube,
    load_envi,
    load_grids,
    load_labels_and_split,
    nearest_signature,
    normalize,
    parse_band_list,
    save_cube,
    save_grids,
    save_labels,
    split_by_counts,
    stratified_split,
    synthetic_signatures,
    write_envi,
)
from mshcnet.errors import ConfigurationError, DataError, FormatError, GenerationError


def grid_with_counts(sizes, shape):
    """Label grid holding ``sizes[c-1]`` pixels of class c, rest unlabelled."""
    flat = np.zeros(int(np.prod(shape)), dtype=np.int64)
    start = 0
    for c, n in enumerate(sizes, start=1):
        flat[start:start + n] = c
        start += n
    return flat.reshape(shape)


class TestCubeFile:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        values = rng.normal(size=(4, 5, 3)).astype(np.float32)
        save_cube(tmp_path / "c.hsc1", HsiCube(values, class_names=["a", "b"]))
        back = load_cube(tmp_path / "c.hsc1")
        assert back.values.tobytes() == values.tobytes()
        assert back.class_names == ["a", "b"]

    def test_layout_is_band_sequential(self, tmp_path):
        values = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        save_cube(tmp_path / "c.hsc1", HsiCube(values))
        raw = (tmp_path / "c.hsc1").read_bytes()
        assert raw.startswith(b"HSC1\n")
        payload = np.frombuffer(raw[raw.index(b"\n", 5) + 1:], dtype="<f4")
        np.testing.assert_array_equal(payload, values.transpose(2, 0, 1).reshape(-1))

    def test_truncated_payload(self, tmp_path, rng):
        save_cube(tmp_path / "c.hsc1", HsiCube(rng.normal(size=(4, 5, 3))))
        raw = (tmp_path / "c.hsc1").read_bytes()
        (tmp_path / "t.hsc1").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="240 bytes, found 232"):
            load_cube(tmp_path / "t.hsc1")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"JUNK\n{}\n")
        with pytest.raises(FormatError):
            load_cube(tmp_path / "x")

    def test_nan_rejected(self, tmp_path):
        v = np.zeros((2, 2, 2), dtype=np.float32)
        v[1, 0, 1] = np.nan
        save_cube(tmp_path / "n.hsc1", HsiCube(v))
        with pytest.raises(DataError, match="row 1, col 0, band 1"):
            load_cube(tmp_path / "n.hsc1")


class TestEnvi:
    def test_hand_written_u16_fixture(self, tmp_path):
        (tmp_path / "f.hdr").write_text(
            "ENVI\ndescription = {tiny\n fixture}\nsamples = 2\nlines = 2\nbands = 2\n"
            "header offset = 0\ndata type = 12\ninterleave = bsq\nbyte order = 0\n"
        )
        # band 0 rows (1, 2) (3, 4); band 1 rows (100, 200) (300, 65535)
        (tmp_path / "f.img").write_bytes(struct.pack("<8H", 1, 2, 3, 4, 100, 200, 300, 65535))
        cube = load_envi(tmp_path / "f.hdr")
        np.testing.assert_array_equal(cube.values[:, :, 0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(cube.values[:, :, 1], [[100, 200], [300, 65535]])

    def test_f32_roundtrip(self, tmp_path, rng):
        v = rng.normal(size=(3, 4, 5)).astype(np.float32)
        write_envi(tmp_path / "a.hdr", tmp_path / "a.img", v)
        assert load_cube(tmp_path / "a.hdr", "envi_bsq").values.tobytes() == v.tobytes()

    def test_big_endian(self, tmp_path):
        (tmp_path / "b.hdr").write_text("ENVI\nsamples = 1\nlines = 1\nbands = 2\ndata type = 2\nbyte order = 1\n")
        (tmp_path / "b.img").write_bytes(struct.pack(">2h", -5, 7))
        np.testing.assert_array_equal(load_envi(tmp_path / "b.hdr").values.reshape(-1), [-5, 7])

    def test_unsupported_interleave(self, tmp_path):
        (tmp_path / "c.hdr").write_text("ENVI\nsamples = 1\nlines = 1\nbands = 1\ndata type = 4\ninterleave = bil\n")
        (tmp_path / "c.img").write_bytes(bytes(4))
        with pytest.raises(ConfigurationError, match="interleave"):
            load_envi(tmp_path / "c.hdr")

    def test_size_mismatch(self, tmp_path):
        (tmp_path / "d.hdr").write_text("ENVI\nsamples = 2\nlines = 1\nbands = 1\ndata type = 4\n")
        (tmp_path / "d.img").write_bytes(bytes(4))
        with pytest.raises(FormatError, match="expected 8 bytes"):
            load_envi(tmp_path / "d.hdr")


class TestBands:
    def test_indian_pines_removal(self, rng):
        cube = HsiCube(rng.normal(size=(2, 2, 220)))
        out = filter_bands(cube, parse_band_list(INDIAN_PINES_REMOVED_BANDS))
        assert out.bands == 200
        assert not out.band_mask[103] and out.band_mask[102] and not out.band_mask[219]
        np.testing.assert_array_equal(out.values[:, :, 103], cube.values[:, :, 108])

    def test_remove_nothing(self, rng):
        cube = HsiCube(rng.normal(size=(2, 2, 5)))
        np.testing.assert_array_equal(filter_bands(cube, []).values, cube.values)

    def test_remove_all(self, rng):
        with pytest.raises(ConfigurationError):
            filter_bands(HsiCube(rng.normal(size=(2, 2, 3))), [1, 2, 3])

    @pytest.mark.parametrize("bad", [[0], [4], [1, 1]])
    def test_bad_indices(self, rng, bad):
        with pytest.raises(ConfigurationError):
            filter_bands(HsiCube(rng.normal(size=(2, 2, 3))), bad)

    def test_parse_band_list(self):
        assert parse_band_list("1-3, 7") == [1, 2, 3, 7]


class TestNormalize:
    def test_constant_band_zscore(self):
        v = np.ones((3, 3, 2))
        v[:, :, 1] = np.arange(9).reshape(3, 3)
        out = normalize(HsiCube(v)).values
        np.testing.assert_array_equal(out[:, :, 0], 0.0)

    def test_minmax_midpoint(self):
        v = np.array([10.0, 20.0, 30.0]).reshape(1, 3, 1)
        np.testing.assert_allclose(normalize(HsiCube(v), "minmax01").values.reshape(-1), [0, 0.5, 1])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_zscore_statistics(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(6, 7, 4)) * rng.uniform(0.1, 100, 4) + rng.normal(size=4) * 50
        out = normalize(HsiCube(v)).values
        assert np.abs(out.mean(axis=(0, 1))).max() < 1e-9
        np.testing.assert_allclose(out.std(axis=(0, 1)), 1.0, atol=1e-6)

    def test_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            normalize(HsiCube(np.ones((2, 2, 1))), "l2")


class TestLabels:
    @pytest.mark.parametrize("scene, train, test", [("indian_pines", 695, 9671), ("pavia_university", 3921, 42776), ("houston2013", 2832, 12197)])
    def test_reference_split_totals(self, scene, train, test, tmp_path):
        counts = [(tr, te) for _, tr, te in REFERENCE_SPLITS[scene]]
        names = [n for n, _, _ in REFERENCE_SPLITS[scene]]
        grid = grid_with_counts([tr + te + 3 for tr, te in counts], (230, 230))
        labels = split_by_counts(grid, counts, names, seed=0)
        save_labels(tmp_path / "l.hsl", labels)
        back = load_labels_and_split(tmp_path / "l.hsl")
        assert int(back.train_mask.sum()) == train and int(back.test_mask.sum()) == test
        assert back.split_counts() == counts

    def test_separate_split_file(self, tmp_path):
        grid = np.array([[1, 2], [2, 1]])
        split = np.array([[1, 2], [1, 0]])
        save_grids(tmp_path / "l.hsl", {"labels": grid}, ["a", "b"])
        save_grids(tmp_path / "s.hsl", {"split": split}, [])
        lm = load_labels_and_split(tmp_path / "l.hsl", tmp_path / "s.hsl")
        np.testing.assert_array_equal(lm.train_mask, [[True, False], [True, False]])
        np.testing.assert_array_equal(lm.test_mask, [[False, True], [False, False]])

    def test_empty_class(self):
        with pytest.raises(DataError, match=r"\[2\]"):
            LabelMap(np.array([[1, 1], [3, 0]]), ["a", "b", "c"], np.zeros((2, 2), bool), np.zeros((2, 2), bool))

    def test_overlapping_masks(self):
        m = np.array([[True, False]])
        with pytest.raises(DataError):
            LabelMap(np.array([[1, 2]]), ["a", "b"], m, m)

    def test_mask_on_unlabelled(self):
        with pytest.raises(DataError):
            LabelMap(np.array([[1, 0, 2]]), ["a", "b"], np.array([[False, True, False]]), np.zeros((1, 3), bool))

    def test_split_too_large(self):
        with pytest.raises(DataError):
            split_by_counts(np.array([[1, 1, 2]]), [(1, 1), (1, 1)], ["a", "b"])

    def test_grid_file_layout(self, tmp_path):
        save_grids(tmp_path / "g.hsl", {"labels": np.array([[1, 2]])}, ["a", "b"])
        raw = (tmp_path / "g.hsl").read_bytes()
        assert raw.startswith(b"HSL1\n") and raw.endswith(struct.pack("<2H", 1, 2))
        grids, names = load_grids(tmp_path / "g.hsl")
        assert names == ["a", "b"] and list(grids) == ["labels"]

    def test_stratified_has_train_and_test_per_class(self):
        grid = grid_with_counts([20, 5, 2], (6, 6))
        lm = stratified_split(grid, ["a", "b", "c"], 0.2, seed=1)
        assert all(tr >= 1 and te >= 1 for tr, te in lm.split_counts())


class TestSynthetic:
    def test_noiseless_pixels_equal_signatures(self):
        spec = SyntheticSpec(m=16, n=16, b=5, p=3, noise_sigma=0.0, seed=2)
        cube, labels = generate_synthetic(spec)
        sig = synthetic_signatures(spec).astype(np.float32)
        np.testing.assert_array_equal(cube.values, sig[labels.grid - 1])

    def test_deterministic(self):
        a, la = generate_synthetic(SyntheticSpec(seed=4))
        b, lb = generate_synthetic(SyntheticSpec(seed=4))
        assert a.values.tobytes() == b.values.tobytes()
        np.testing.assert_array_equal(la.train_mask, lb.train_mask)

    @pytest.mark.parametrize("seed", range(5))
    def test_nearest_signature_is_perfect(self, seed):
        spec = SyntheticSpec(seed=seed)
        cube, labels = generate_synthetic(spec)
        pred = nearest_signature(cube.values, synthetic_signatures(spec))
        np.testing.assert_array_equal(pred, labels.grid)

    def test_signatures_unit_separated(self):
        s = synthetic_signatures(SyntheticSpec(p=5, b=8, seed=1))
        d = np.linalg.norm(s[:, None] - s[None], axis=2) + np.diag(np.full(5, np.inf))
        assert d.min() == pytest.approx(1.0)

    def test_every_class_present(self):
        _, labels = generate_synthetic(SyntheticSpec(p=6, seed=9))
        assert set(np.unique(labels.grid)) == set(range(1, 7))

    def test_one_class_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticSpec(p=1))

    def test_impossible_layout(self):
        with pytest.raises(GenerationError):
            generate_synthetic(SyntheticSpec(m=4, n=4, p=4, min_pixels_per_class=10), max_tries=3)
