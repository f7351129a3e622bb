import math

import numpy as np
import pytest

from mshcnet import tensor as T
from mshcnet.data import SyntheticSpec, generate_synthetic, normalize
from mshcnet.errors import ConfigurationError, ContractError, NumericalError
from mshcnet.graph import GraphConfig
from mshcnet.model import ModelConfig, init_state
from mshcnet.trainer import (
    Adam,
    MomentumSGD,
    TrainConfig,
    TrainReport,
    clip_gradients,
    epoch_rng,
    lr_at_epoch,
    make_batches,
    pixel_graph,
    predict_cube,
    train,
    weight_penalty,
)

SMALL_MODEL = dict(
    g_widths=[8, 6], c_blocks=[[3, 6], [1, 8]], n_extractor=[3, 3], n_projection=8,
    s_projection=3, fusion_hidden=[16], knn=GraphConfig(k=4),
)


@pytest.fixture(scope="module")
def tiny():
    cube, labels = generate_synthetic(SyntheticSpec(m=12, n=12, b=4, p=3, seed=3, min_pixels_per_class=6))
    return normalize(cube).values, labels


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (49, 1e-3), (50, 5e-4), (150, 1.25e-4), (199, 1.25e-4)])
    def test_step_decay(self, epoch, lr):
        assert lr_at_epoch(TrainConfig(), epoch) == pytest.approx(lr, rel=1e-15)

    def test_no_decay(self):
        cfg = TrainConfig(lr_decay_factor=1.0)
        assert {lr_at_epoch(cfg, e) for e in range(200)} == {1e-3}

    def test_out_of_range_epoch(self):
        with pytest.raises(ContractError):
            lr_at_epoch(TrainConfig(epochs=10), 10)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.minibatch_size, cfg.lr_initial, cfg.weight_reg) == (200, 7, 1e-3, 0.001)
        assert (cfg.lr_decay_factor, cfg.lr_decay_every) == (0.5, 50)

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(minibatch_size=0), dict(batch_unit="tile"), dict(patch_size=4)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad).validate()


class TestBatches:
    def test_21_pixels(self):
        batches = make_batches(np.arange(21), TrainConfig(), np.random.default_rng(0))
        assert [len(b) for b in batches] == [7, 7, 7]
        assert sorted(np.concatenate(batches)) == list(range(21))

    def test_10_pixels(self):
        assert [len(b) for b in make_batches(np.arange(10), TrainConfig(), np.random.default_rng(0))] == [7, 3]

    def test_same_seed_same_sequence(self):
        a = make_batches(np.arange(30), TrainConfig(), epoch_rng(4, 2))
        b = make_batches(np.arange(30), TrainConfig(), epoch_rng(4, 2))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_empty(self):
        with pytest.raises(ContractError):
            make_batches([], TrainConfig(), np.random.default_rng(0))


class TestOptimisers:
    def test_adam_first_steps_match_formula(self, rng):
        p = T.Tensor(rng.normal(size=3), requires_grad=True)
        x0 = p.data.copy()
        opt = Adam({"p": p})
        g1, g2 = rng.normal(size=3), rng.normal(size=3)
        opt.step({"p": g1}, 0.01)
        # first bias-corrected step moves every entry by lr * sign(g) (up to eps)
        np.testing.assert_allclose(p.data, x0 - 0.01 * g1 / (np.abs(g1) + 1e-8), atol=1e-12)
        x1 = p.data.copy()
        opt.step({"p": g2}, 0.01)
        m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9**2)
        v = (0.999 * 0.001 * g1**2 + 0.001 * g2**2) / (1 - 0.999**2)
        np.testing.assert_allclose(p.data, x1 - 0.01 * m / (np.sqrt(v) + 1e-8), atol=1e-12)

    def test_sgd_momentum(self):
        p = T.Tensor(np.zeros(2), requires_grad=True)
        opt = MomentumSGD({"p": p}, momentum=0.5)
        opt.step({"p": np.ones(2)}, 0.1)
        opt.step({"p": np.ones(2)}, 0.1)
        np.testing.assert_allclose(p.data, -0.1 - 0.15)

    def test_clip(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        assert clip_gradients(grads, 1.0) == pytest.approx(5.0)
        norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        assert norm == pytest.approx(1.0)

    def test_clip_leaves_small_gradients(self):
        grads = {"a": np.array([0.3])}
        clip_gradients(grads, 5.0)
        np.testing.assert_array_equal(grads["a"], [0.3])

    def test_penalty_only_weights(self):
        state = init_state(ModelConfig(**SMALL_MODEL), 4, 3)
        ref = sum(float((state.params[n].data ** 2).sum()) for n in state.params if n.endswith((".W", ".kernel")))
        assert weight_penalty(state).item() == pytest.approx(ref)
        assert not any(n.endswith((".b", ".bias", ".gamma", ".beta")) for n in state.weight_names())


class TestTrain:
    def test_one_epoch_step_count(self, tiny):
        cube, labels = tiny
        _, report = train(cube, labels, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=1))
        n = int(labels.train_mask.sum())
        assert len(report.step_losses) == math.ceil(n / 7)
        assert report.epochs[0].step == math.ceil(n / 7)

    def test_weight_reg_shrinks_weights(self, tiny):
        cube, labels = tiny

        def norm(reg):
            state, _ = train(cube, labels, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=3, weight_reg=reg, lr_initial=1e-2))
            return math.sqrt(weight_penalty(state).item())

        assert norm(0.001) < norm(0.0)

    def test_loss_decreases(self, tiny):
        cube, labels = tiny
        _, report = train(cube, labels, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=8))
        assert report.losses[-1] < report.losses[0]

    def test_non_finite_loss_reports_epoch(self, tiny):
        cube, labels = tiny
        cfg = TrainConfig(epochs=2, lr_initial=1e36, optimizer="sgd", clip_norm=0.0)
        with np.errstate(all="ignore"), pytest.raises(NumericalError, match=r"epoch \d+, batch \d+; largest parameter norm"):
            train(cube, labels, ModelConfig(**SMALL_MODEL), cfg)

    def test_patch_mode(self, tiny):
        cube, labels = tiny
        state, report = train(cube, labels, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=1, batch_unit="patch", patch_size=7))
        assert np.isfinite(report.losses[0])
        pred = predict_cube(cube.astype(np.float32), state, batch_unit="patch", patch_size=7)
        assert pred.shape == (12, 12) and pred.min() >= 1

    def test_graph_cap_suggests_patch_mode(self, tiny):
        with pytest.raises(ConfigurationError, match="patch"):
            pixel_graph(tiny[0], GraphConfig(k=4, max_nodes=100))

    def test_report_csv(self, tiny, tmp_path):
        cube, labels = tiny
        _, report = train(cube, labels, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=2), out_dir=tmp_path)
        lines = (tmp_path / "train_report.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,lr,loss,train_oa" and len(lines) == 3
        assert (tmp_path / "checkpoint.mshc").exists()

    def test_resume_matches_uninterrupted(self, tiny, tmp_path):
        cube, labels = tiny
        mcfg, tcfg = ModelConfig(**SMALL_MODEL), TrainConfig(epochs=3)
        full_state, full = train(cube, labels, mcfg, tcfg)
        train(cube, labels, mcfg, tcfg, out_dir=tmp_path, stop_after_epoch=0)
        state, rest = train(cube, labels, mcfg, tcfg, resume_from=tmp_path / "checkpoint.mshc")
        np.testing.assert_allclose(rest.losses, full.losses[1:], atol=1e-10, rtol=0)
        for name, p in full_state.params.items():
            np.testing.assert_array_equal(state.params[name].data, p.data)

    def test_empty_train_mask(self, tiny):
        cube, labels = tiny
        import copy

        empty = copy.deepcopy(labels)
        empty.train_mask[:] = False
        with pytest.raises(ContractError):
            train(cube, empty, ModelConfig(**SMALL_MODEL), TrainConfig(epochs=1))


def test_report_losses_property():
    assert TrainReport().losses == []
