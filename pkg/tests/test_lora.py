import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from famsec.errors import ConfigurationError, ContractViolation, LoadError
from famsec.lora import (
    INIT_STD,
    AdapterSite,
    FamConfig,
    LoraFactors,
    adapter_sites,
    apply_delta,
    expected_parameter_count,
    init_factors,
    inject,
    load_adapters,
    merge_factors,
    merged_copy,
    remove_adapters,
    save_adapters,
    trainable_parameter_count,
    unmerge_factors,
)
from famsec.vit import TOY_SPEC, VIT_L14_SPEC, VisionEncoder, build_encoder, embed, parameter_checksum


def factors_from(up, down, scale=1.0):
    up, down = torch.as_tensor(up, dtype=torch.float64), torch.as_tensor(down, dtype=torch.float64)
    f = LoraFactors(up.shape[0], down.shape[1], up.shape[1], scale=scale).double()
    with torch.no_grad():
        f.up.copy_(up)
        f.down.copy_(down)
    return f


class TestFamConfig:
    def test_defaults(self):
        cfg = FamConfig()
        assert (cfg.rank, cfg.dropout_p, cfg.adapted_block_count, cfg.scale) == (2, 0.25, 12, 1.0)
        assert cfg.projections == ("query", "key", "value", "output")

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            ({"rank": 0}, "rank"),
            ({"dropout_p": 1.0}, "dropout_p"),
            ({"dropout_p": -0.1}, "dropout_p"),
            ({"adapted_block_count": 0}, "adapted_block_count"),
            ({"projections": ("query", "mlp")}, "projections"),
            ({"projections": ("query", "query")}, "projections"),
            ({"scale": 0.0}, "scale"),
        ],
    )
    def test_invalid(self, kwargs, field):
        with pytest.raises(ConfigurationError) as exc:
            FamConfig(**kwargs)
        assert exc.value.field == field


class TestInitFactors:
    def test_zero_delta(self):
        f = init_factors(4, 4, FamConfig(rank=2), seed=3)
        assert torch.count_nonzero(f.up) == 0
        assert torch.count_nonzero(f.delta()) == 0
        assert torch.count_nonzero(f.down) == f.down.numel()

    def test_same_seed_bitwise(self):
        a = init_factors(3, 5, FamConfig(rank=2), seed=11)
        b = init_factors(3, 5, FamConfig(rank=2), seed=11)
        c = init_factors(3, 5, FamConfig(rank=2), seed=12)
        assert torch.equal(a.down, b.down)
        assert not torch.equal(a.down, c.down)

    def test_down_std(self):
        f = init_factors(512, 512, FamConfig(rank=8), seed=0)
        down = f.down.detach()
        assert abs(float(down.std()) - INIT_STD) < 0.002
        assert abs(float(down.mean())) < 0.002

    def test_rank_too_large(self):
        with pytest.raises(ConfigurationError):
            init_factors(3, 5, FamConfig(rank=4))

    def test_rank_bound_after_updates(self):
        f = init_factors(8, 8, FamConfig(rank=2, dropout_p=0.0), seed=0).double()
        opt = torch.optim.SGD(f.parameters(), lr=0.5)
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            x = torch.randn(16, 8, generator=g, dtype=torch.float64)
            target = torch.randn(16, 8, generator=g, dtype=torch.float64)
            opt.zero_grad()
            ((f(x) - target) ** 2).mean().backward()
            opt.step()
        sv = torch.linalg.svdvals(f.delta().detach())
        assert int((sv > 1e-8).sum()) <= 2
        assert float(sv[0]) > 1e-3


class TestApplyAndMerge:
    def test_zero_delta_identity(self):
        f = factors_from(np.zeros((2, 1)), [[0.3, -0.2]])
        out = apply_delta(torch.eye(2, dtype=torch.float64), f, torch.tensor([3.0, -1.0], dtype=torch.float64))
        assert out.tolist() == [3.0, -1.0]

    def test_hand_product(self):
        f = factors_from([[1.0], [0.0]], [[0.0, 1.0]])
        out = apply_delta(torch.zeros(2, 2, dtype=torch.float64), f, torch.tensor([5.0, 7.0], dtype=torch.float64))
        assert out.tolist() == [7.0, 0.0]

    def test_merge_hand(self):
        f = factors_from([[1.0], [1.0]], [[2.0, 0.0]], scale=0.5)
        assert merge_factors(torch.zeros(2, 2, dtype=torch.float64), f).tolist() == [[1.0, 0.0], [1.0, 0.0]]

    def test_merge_identity(self):
        f = factors_from(np.zeros((2, 1)), [[1.0, 1.0]])
        assert torch.equal(merge_factors(torch.eye(2, dtype=torch.float64), f), torch.eye(2, dtype=torch.float64))

    def test_merge_does_not_modify_base(self):
        g = torch.Generator().manual_seed(0)
        w0 = torch.randn(16, 16, generator=g)
        before = w0.clone()
        f = init_factors(16, 16, FamConfig(rank=2), seed=0)
        with torch.no_grad():
            f.up.normal_(generator=g)
        merged = merge_factors(w0, f)
        assert torch.equal(w0, before)
        assert float((unmerge_factors(merged, f) - w0).abs().max()) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_eval_apply_equals_merged(self, d, k, r, seed):
        r = min(r, d, k)
        g = torch.Generator().manual_seed(seed)
        f = factors_from(torch.randn(d, r, generator=g, dtype=torch.float64),
                         torch.randn(r, k, generator=g, dtype=torch.float64), scale=0.7)
        w0 = torch.randn(d, k, generator=g, dtype=torch.float64)
        x = torch.randn(5, k, generator=g, dtype=torch.float64)
        live = apply_delta(w0, f, x)
        merged = x @ merge_factors(w0, f).T
        assert torch.allclose(live, merged, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        f = init_factors(4, 3, FamConfig(rank=1))
        with pytest.raises(ContractViolation):
            merge_factors(torch.zeros(3, 4), f)
        with pytest.raises(ContractViolation):
            apply_delta(torch.zeros(4, 3), f, torch.zeros(5))

    def test_dropout_only_in_training(self):
        f = init_factors(8, 8, FamConfig(rank=2, dropout_p=0.5)).double()
        with torch.no_grad():
            f.up.fill_(1.0)
        w0 = torch.zeros(8, 8, dtype=torch.float64)
        x = torch.ones(4, 8, dtype=torch.float64)
        f.eval()
        torch.manual_seed(0)
        train_out = apply_delta(w0, f, x, training=True)
        eval_out = apply_delta(w0, f, x, training=False)
        assert torch.allclose(eval_out, x @ merge_factors(w0, f).T)
        assert not torch.allclose(train_out, eval_out)
        assert not f.training


class TestInject:
    def test_vit_l14_default_sites(self):
        with torch.device("meta"):
            encoder = VisionEncoder(VIT_L14_SPEC)
        registry = inject(encoder, FamConfig())
        assert len(registry) == 48
        assert {s.block_index for s in registry} == set(range(12, 24))
        assert trainable_parameter_count(registry) == expected_parameter_count(VIT_L14_SPEC, FamConfig())
        assert expected_parameter_count(VIT_L14_SPEC, FamConfig()) == 48 * 2 * (1024 + 1024)

    def test_toy_query_value(self, toy_encoder):
        registry = inject(toy_encoder, FamConfig(adapted_block_count=2, projections=("query", "value")))
        assert sorted(registry) == [AdapterSite(2, "query"), AdapterSite(2, "value"),
                                    AdapterSite(3, "query"), AdapterSite(3, "value")]

    def test_too_many_blocks(self, toy_encoder):
        with pytest.raises(ConfigurationError) as exc:
            inject(toy_encoder, FamConfig(adapted_block_count=5))
        assert exc.value.field == "adapted_block_count"

    def test_double_injection(self, toy_encoder):
        inject(toy_encoder, FamConfig(adapted_block_count=1))
        with pytest.raises(ContractViolation):
            inject(toy_encoder, FamConfig(adapted_block_count=1))

    def test_only_factors_trainable(self, toy_encoder):
        registry = inject(toy_encoder, FamConfig(adapted_block_count=3))
        trainable = {id(p) for p in toy_encoder.parameters() if p.requires_grad}
        factor_params = {id(p) for f in registry.values() for p in f.parameters()}
        assert trainable == factor_params
        n = sum(p.numel() for p in toy_encoder.parameters() if p.requires_grad)
        assert n == expected_parameter_count(TOY_SPEC, FamConfig(adapted_block_count=3))

    def test_zero_init_identity(self, toy_encoder, images):
        ref = embed(toy_encoder, images)
        checksum = parameter_checksum(toy_encoder)
        inject(toy_encoder, FamConfig(adapted_block_count=4))
        out = embed(toy_encoder, images)
        assert np.array_equal(out, ref)
        assert parameter_checksum(toy_encoder) == checksum

    def test_site_str_roundtrip(self):
        site = AdapterSite(7, "output")
        assert str(site) == "block7.output"
        assert AdapterSite.parse(str(site)) == site


def _perturb(registry, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for f in registry.values():
            f.up.copy_(torch.randn(f.up.shape, generator=g) * 0.05)


class TestMergedEncoders:
    def test_merged_copy_matches_live(self, toy_encoder, rng):
        registry = inject(toy_encoder, FamConfig(adapted_block_count=2))
        _perturb(registry)
        x = rng.random((100, 32, 32, 3)).astype(np.float32)
        live = embed(toy_encoder, x)
        merged = embed(merged_copy(toy_encoder), x)
        rel = np.linalg.norm(live - merged, axis=1) / np.linalg.norm(live, axis=1)
        assert rel.max() < 1e-5
        assert adapter_sites(toy_encoder)

    def test_remove_without_merge_restores(self, toy_encoder, images):
        ref = embed(toy_encoder, images)
        registry = inject(toy_encoder, FamConfig(adapted_block_count=2))
        _perturb(registry)
        assert not np.allclose(embed(toy_encoder, images), ref)
        remove_adapters(toy_encoder)
        assert np.array_equal(embed(toy_encoder, images), ref)

    def test_remove_with_merge(self, toy_encoder, images):
        registry = inject(toy_encoder, FamConfig(adapted_block_count=2))
        _perturb(registry)
        live = embed(toy_encoder, images)
        remove_adapters(toy_encoder, merge=True)
        assert not adapter_sites(toy_encoder)
        assert np.allclose(embed(toy_encoder, images), live, rtol=1e-5, atol=1e-6)


class TestAdapterFile:
    def test_roundtrip(self, tmp_path, images):
        enc = build_encoder(TOY_SPEC, seed=0)
        cfg = FamConfig(adapted_block_count=2, rank=3)
        _perturb(inject(enc, cfg))
        path = tmp_path / "a.safetensors"
        save_adapters(path, enc, cfg, extra={"log_tau": torch.tensor(-2.5)})
        fresh = build_encoder(TOY_SPEC, seed=0)
        loaded_cfg, extras = load_adapters(path, fresh)
        assert loaded_cfg == cfg
        assert float(extras["log_tau"]) == -2.5
        assert np.array_equal(embed(fresh, images), embed(enc, images))

    def test_header_and_layout(self, tmp_path):
        from safetensors import safe_open

        enc = build_encoder(TOY_SPEC, seed=0)
        cfg = FamConfig(adapted_block_count=1)
        inject(enc, cfg)
        path = tmp_path / "a.safetensors"
        save_adapters(path, enc, cfg)
        with safe_open(path, framework="pt") as f:
            meta = f.metadata()
            keys = set(f.keys())
            up = f.get_tensor("block3.query.up")
        assert meta["rank"] == "2" and float(meta["scale"]) == 1.0 and float(meta["dropout_p"]) == 0.25
        assert meta["encoder_fingerprint"]
        assert keys == {f"block3.{p}.{m}" for p in ("query", "key", "value", "output") for m in ("up", "down")}
        assert up.dtype == torch.float32 and tuple(up.shape) == (64, 2)

    def test_wrong_base(self, tmp_path):
        enc = build_encoder(TOY_SPEC, seed=0)
        cfg = FamConfig(adapted_block_count=1)
        inject(enc, cfg)
        save_adapters(tmp_path / "a.safetensors", enc, cfg)
        with pytest.raises(LoadError):
            load_adapters(tmp_path / "a.safetensors", build_encoder(TOY_SPEC, seed=1))

    def test_missing(self, tmp_path, toy_encoder):
        with pytest.raises(LoadError):
            load_adapters(tmp_path / "none.safetensors", toy_encoder)
