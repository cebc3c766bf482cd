import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from famsec.data import Batcher, LabeledBatch, SyntheticSpec, synthetic_imageset
from famsec.errors import ConfigurationError, ContractViolation, NumericDomainError, TrainingDivergence
from famsec.lora import FamConfig, adapter_sites, inject
from famsec.sec import (
    TrainConfig,
    cosine_similarity,
    make_state,
    moving_average,
    pair_labels,
    read_history,
    sec_loss,
    similarity_matrix,
    train,
    train_step,
)
from famsec.vit import TOY_SPEC, EncoderPair, build_encoder, embed, parameter_checksum

# N = 2 fixture: p = [[1, -1], [-1, 1]], l = I, tau = 1.  All four terms equal -log(sigmoid(1)).
N2_EXPECTED = math.log1p(math.exp(-1.0))


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


class TestCosine:
    def test_self(self):
        assert cosine_similarity([3.0, -4.0, 1.0], [3.0, -4.0, 1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_hand_value(self):
        assert cosine_similarity([1, 2, 2], [2, 1, 2]) == pytest.approx(8 / 9, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(NumericDomainError):
            cosine_similarity([0, 0], [1, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_symmetric_and_scale_invariant(self, u, v, a, b):
        u, v = np.array(u), np.array(v)
        if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
            return
        c = cosine_similarity(u, v)
        assert c == pytest.approx(cosine_similarity(v, u), abs=1e-12)
        assert c == pytest.approx(cosine_similarity(a * u, b * v), abs=1e-12)
        assert -1 - 1e-12 <= c <= 1 + 1e-12

    def test_matrix_bounds(self):
        g = torch.Generator().manual_seed(0)
        p = similarity_matrix(torch.randn(16, 8, generator=g), torch.randn(16, 8, generator=g))
        assert p.shape == (16, 16)
        assert float(p.abs().max()) <= 1 + 1e-6

    def test_matrix_zero_row(self):
        with pytest.raises(NumericDomainError):
            similarity_matrix(torch.zeros(2, 4), torch.ones(2, 4))


class TestPairLabels:
    def test_same(self):
        assert pair_labels([1, 1]).tolist() == [[1, 1], [1, 1]]

    def test_mixed(self):
        assert pair_labels([1, 0]).tolist() == [[1, 0], [0, 1]]

    def test_three(self):
        l = pair_labels([0, 0, 1])
        assert l[0, 1] == 1 and l[0, 2] == 0 and l[1, 2] == 0
        assert torch.all(torch.diagonal(l) == 1)

    def test_non_binary(self):
        with pytest.raises(ContractViolation):
            pair_labels([0, 2])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=20))
    def test_xnor_algebra(self, y):
        l = pair_labels(y)
        assert torch.equal(l, l.T)
        assert torch.equal(l, pair_labels([1 - v for v in y]))
        for i, a in enumerate(y):
            for j, b in enumerate(y):
                assert l[i, j] == (1 if a == b else 0)


class TestSecLoss:
    def test_n1_zero(self):
        assert float(sec_loss(t64([[0.0]]), t64([[1.0]]), 0.3)) == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("s, tau", [(0.5, 0.07), (-0.8, 1.0), (1.0, 0.5)])
    def test_n1(self, s, tau):
        expected = -math.log(1 / (1 + math.exp(-s / tau)))
        assert abs(float(sec_loss(t64([[s]]), t64([[1.0]]), tau)) - expected) < 1e-10

    def test_n2(self):
        got = float(sec_loss(t64([[1.0, -1.0], [-1.0, 1.0]]), t64([[1.0, 0.0], [0.0, 1.0]]), 1.0))
        assert abs(got - N2_EXPECTED) < 1e-10
        assert abs(got - oracles.loss_by_hand([[1, -1], [-1, 1]], [[1, 0], [0, 1]], 1.0)) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.floats(0.01, 2.0), st.integers(0, 2**31 - 1))
    def test_matches_oracle(self, n, tau, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(-1, 1, (n, n))
        y = rng.integers(0, 2, n)
        l = (y[:, None] == y[None, :]).astype(float)
        got = float(sec_loss(t64(p), t64(l), tau))
        assert abs(got - oracles.loss_by_hand(p.tolist(), l.tolist(), tau)) < 1e-10
        assert got >= 0

    def test_saturated_clamp(self):
        # sigmoid(50) rounds to 1; the clamp caps each term at -log(1e-12)
        got = float(sec_loss(t64([[-1.0]]), t64([[1.0]]), 0.02))
        assert got == pytest.approx(-math.log(1e-12), rel=1e-12)
        assert abs(got - oracles.loss_by_hand([[-1.0]], [[1]], 0.02)) < 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        p = t64(rng.uniform(-1, 1, (n, n)))
        l = pair_labels(rng.integers(0, 2, n))
        perm = torch.as_tensor(rng.permutation(n))
        a = float(sec_loss(p, l, 0.07))
        b = float(sec_loss(p[perm][:, perm], l[perm][:, perm], 0.07))
        assert abs(a - b) < 1e-12

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ContractViolation):
            sec_loss(t64([[0.0]]), t64([[1.0]]), tau)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            sec_loss(t64([[0.0, 1.0]]), t64([[1.0]]), 1.0)


class TestGradient:
    def test_finite_differences_small(self):
        errors, n = oracles.sec_gradient_check(depth=2, width=32, adapted=1, n_images=4)
        assert n == 1 * 4 * 2 * 2 * 32 + 1
        assert float(errors.max()) < 1e-4

    def test_tau_receives_gradient(self, toy_pair, images):
        state = make_state(toy_pair, TrainConfig(seed=0))
        before = state.log_tau.detach().clone()
        batch = LabeledBatch(torch.from_numpy(images).permute(0, 3, 1, 2), torch.tensor([1, 0] * 4), np.arange(8))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            train_step(state, batch, toy_pair)
        assert not torch.equal(state.log_tau.detach(), before)
        assert state.tau > 0


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs, field",
        [({"steps": -1}, "steps"), ({"batch_size": 1}, "batch_size"), ({"lr": 0.0}, "lr"),
         ({"tau_init": 0.0}, "tau_init"), ({"objective": "mse"}, "objective")],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ConfigurationError) as exc:
            TrainConfig(**kwargs)
        assert exc.value.field == field

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.betas, cfg.eps, cfg.tau_init) == (1e-4, (0.9, 0.999), 1e-8, 0.07)


def _batch(images, labels):
    return LabeledBatch(torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2),
                        torch.as_tensor(labels), np.arange(len(labels)))


class TestTrainStep:
    def test_frozen_conservation(self, toy_pair, images):
        base = parameter_checksum(toy_pair.extractor)
        guide = parameter_checksum(toy_pair.guide, include_adapters=True)
        guide_emb = embed(toy_pair.guide, images)
        state = make_state(toy_pair, TrainConfig(lr=1e-2))
        for _ in range(3):
            train_step(state, _batch(images, [1, 0] * 4), toy_pair)
        assert parameter_checksum(toy_pair.extractor) == base
        assert parameter_checksum(toy_pair.guide, include_adapters=True) == guide
        assert np.array_equal(embed(toy_pair.guide, images), guide_emb)
        assert any(torch.count_nonzero(f.up) for f in adapter_sites(toy_pair.extractor).values())

    def test_returns_pre_update_loss(self, toy_pair, images):
        from famsec.sec import batch_loss

        state = make_state(toy_pair, TrainConfig(lr=1e-2))
        batch = _batch(images, [1, 0] * 4)
        toy_pair.extractor.eval()  # no dropout: the loss is a deterministic function of the parameters
        with torch.no_grad():
            expected = float(batch_loss(state, toy_pair, batch.pixels, batch.labels))
        for f in adapter_sites(toy_pair.extractor).values():
            f.dropout.p = 0.0
        assert train_step(state, batch, toy_pair) == pytest.approx(expected, rel=1e-6)

    def test_single_class_warns(self, toy_pair, images):
        state = make_state(toy_pair, TrainConfig())
        with pytest.warns(RuntimeWarning, match="single-class"):
            train_step(state, _batch(images, [1] * 8), toy_pair)

    def test_batch_of_one(self, toy_pair, images):
        state = make_state(toy_pair, TrainConfig())
        with pytest.raises(ContractViolation):
            train_step(state, _batch(images[:1], [1]), toy_pair)

    def test_divergence(self, toy_pair, images):
        state = make_state(toy_pair, TrainConfig())
        bad = images.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergence) as exc:
            train_step(state, _batch(bad, [1, 0] * 4), toy_pair)
        assert exc.value.payload["step"] == 0
        assert "loss" in exc.value.payload

    def test_nothing_trainable(self):
        pair = EncoderPair.from_encoder(build_encoder(TOY_SPEC))
        with pytest.raises(ConfigurationError):
            make_state(pair, TrainConfig())


class TestTrain:
    def test_zero_steps_identity(self, toy_pair, small_synth):
        train_set, test_set = small_synth
        state = train(TrainConfig(steps=0), train_set, toy_pair)
        assert state.step == 0 and state.history == []
        x = test_set.images[:8]
        assert np.array_equal(embed(toy_pair.extractor, x), embed(toy_pair.guide, x))

    def test_empty_dataset(self, toy_pair, small_synth):
        with pytest.raises(ConfigurationError):
            train(TrainConfig(steps=1), small_synth[0].subset([]), toy_pair)

    def test_history_and_checkpoints(self, tmp_path, toy_pair, small_synth):
        cfg = TrainConfig(steps=6, batch_size=8, checkpoint_every=3)
        state = train(cfg, small_synth[0], toy_pair, out_dir=tmp_path, fam_config=FamConfig(adapted_block_count=2))
        rows = read_history(tmp_path / "losses.csv")
        assert [r["step"] for r in rows] == [1, 2, 3, 4, 5, 6]
        assert rows[0]["tau"] == pytest.approx(0.07)
        assert all(r["tau"] > 0 for r in rows)
        assert (tmp_path / "losses.csv").read_text().splitlines()[0] == "step,loss,tau,wall_ms"
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["final.safetensors", "step_000003.safetensors", "step_000006.safetensors"]
        assert state.step == 6

    def test_deterministic(self, small_synth):
        def run():
            pair = EncoderPair.from_encoder(build_encoder(TOY_SPEC, seed=0))
            inject(pair.extractor, FamConfig(adapted_block_count=2))
            return [r["loss"] for r in train(TrainConfig(steps=5, batch_size=8, lr=1e-3), small_synth[0], pair).history]

        assert run() == run()

    def test_global_rng_untouched(self, toy_pair, small_synth):
        torch.manual_seed(99)
        expected = torch.rand(3)
        torch.manual_seed(99)
        train(TrainConfig(steps=2, batch_size=8), small_synth[0], toy_pair)
        assert torch.equal(torch.rand(3), expected)

    def test_separates_classes(self, toy_pair):
        """A short run makes same-class similarities exceed cross-class ones on held-out images."""
        train_set = synthetic_imageset([SyntheticSpec("A", "train", 100)])
        held = synthetic_imageset([SyntheticSpec("A", "test", 16)])
        state = train(TrainConfig(steps=200, batch_size=16, lr=1e-3), train_set, toy_pair)
        g = torch.from_numpy(embed(toy_pair.guide, held.images))
        t = torch.from_numpy(embed(toy_pair.extractor, held.images))
        p = similarity_matrix(g, t).numpy()
        l = pair_labels(held.labels).numpy().astype(bool)
        assert p[l].mean() > p[~l].mean()
        losses = [r["loss"] for r in state.history]
        smooth = moving_average(losses, 50)
        assert smooth[-1] < smooth[0]


def test_moving_average():
    assert moving_average([1, 2, 3, 4], 2).tolist() == [1.5, 2.5, 3.5]
    with pytest.raises(ContractViolation):
        moving_average([1.0], 2)


def test_batcher_used_by_train_is_balanced(small_synth):
    b = Batcher(small_synth[0], 8, seed=0)
    first = next(b.stream())
    assert int(first.labels.sum()) == 4
