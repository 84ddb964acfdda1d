import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pemma.adaptation import (AdaptationConfig, AdapterLayer, DoraParams, LowRankPair, ParamLedger, adapt,
                              adapter_forward, dora_linear, dora_weight, extend_multimodal, inject_adapters,
                              lora_linear, param_report, set_peft_delta_zero)
from pemma.autodiff import Tensor
from pemma.backbone import ModelConfig, SegmentationModel, skip_combine
from pemma.exceptions import ConfigError, ShapeError
from pemma.rng import Rng
from pemma.nn import ADAPTER, BASE, PEFT, PET_EMBEDDING, PET_SKIP, Parameter
from conftest import f64_model
from oracles import dense_dora, dense_lora


def _pair(A, B, s=1.0):
    d = A.shape[1]
    pair = LowRankPair(d, A.shape[0], scale=s, rng=Rng(0))
    pair.A.data, pair.B.data = np.asarray(A, float), np.asarray(B, float)
    return pair


def test_lora_hand_example():
    pair = _pair(np.array([[1.0, 0.0]]), np.array([[1.0], [0.0]]))
    out = lora_linear(Tensor(np.array([[3.0, 5.0]])), Tensor(np.eye(2)), pair, 1.0).data[0]
    np.testing.assert_array_equal(out, [6.0, 5.0])
    np.testing.assert_array_equal(out, dense_lora(np.eye(2), pair.A.data, pair.B.data, 1.0, np.array([3.0, 5.0])))


def test_lora_zero_b_is_exact_identity():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(6, 6))
    pair = _pair(rng.normal(size=(2, 6)), np.zeros((6, 2)), s=2.0)
    h = rng.normal(size=(3, 6))
    np.testing.assert_array_equal(lora_linear(Tensor(h), Tensor(W), pair, 2.0).data, h @ W.T)


@pytest.mark.parametrize("seed", range(10))
def test_lora_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    W, A, B = rng.normal(size=(5, 5)), rng.normal(size=(2, 5)), rng.normal(size=(5, 2))
    h = rng.normal(size=5)
    out = lora_linear(Tensor(h[None]), Tensor(W), _pair(A, B), 0.7).data[0]
    np.testing.assert_allclose(out, dense_lora(W, A, B, 0.7, h), rtol=1e-12)


def test_lora_rank_bound():
    with pytest.raises(ShapeError):
        LowRankPair(4, 4)


def _dora(W, A, B, m=None, form="canonical", s=1.0):
    dp = DoraParams(Parameter(W, dtype=np.float64), A.shape[0], scale=s, form=form, rng=Rng(0))
    dp.pair.A.data, dp.pair.B.data = A.astype(float), B.astype(float)
    if m is not None:
        dp.magnitude.data = np.asarray(m, float)
    return dp


def test_dora_canonical_identity_at_init():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 4))
    dp = _dora(W, rng.normal(size=(2, 4)), np.zeros((4, 2)))
    h = rng.normal(size=(2, 4))
    np.testing.assert_allclose(dora_linear(Tensor(h), Tensor(W), dp, 1.0).data, h @ W.T, rtol=1e-13)
    np.testing.assert_allclose(dora_weight(W, dp, 1.0), W, rtol=1e-13)


@pytest.mark.parametrize("seed", range(10))
def test_dora_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    W, A, B = rng.normal(size=(2, 2)), rng.normal(size=(1, 2)), rng.normal(size=(2, 1))
    m = rng.uniform(0.5, 2.0, size=2)
    h = rng.normal(size=2)
    out = dora_linear(Tensor(h[None]), Tensor(W), _dora(W, A, B, m, s=1.5), 1.5).data[0]
    np.testing.assert_allclose(out, dense_dora(W, A, B, m, 1.5, h), rtol=1e-12)


def test_dora_paper_literal_form():
    rng = np.random.default_rng(2)
    W, A, B = rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), rng.normal(size=(3, 1))
    dp = _dora(W, A, B, form="paper_literal")
    expected = W / np.linalg.norm(W, axis=1, keepdims=True) + B @ A
    np.testing.assert_allclose(dora_weight(W, dp, 1.0), expected, rtol=1e-13)
    h = rng.normal(size=(1, 3))
    np.testing.assert_allclose(dora_linear(Tensor(h), Tensor(W), dp, 1.0).data, h @ expected.T, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dora_norms_equal_magnitude(seed):
    rng = np.random.default_rng(seed)
    W, A, B = rng.normal(size=(6, 6)), rng.normal(size=(2, 6)), rng.normal(size=(6, 2))
    m = rng.uniform(0.1, 3.0, size=6)
    Wp = dora_weight(W, _dora(W, A, B, m), 1.0)
    np.testing.assert_allclose(np.linalg.norm(Wp, axis=1), m, rtol=1e-10)


def test_full_geometry_lora_count():
    cfg = ModelConfig.full_geometry()
    model = SegmentationModel(cfg, lazy=True)
    ledger = inject_adapters(model, AdaptationConfig(rank=8, targets=("q", "v")), lazy=True)
    assert ledger.counts()[PEFT] == 12 * 2 * (8 * 768 + 768 * 8) == 294_912


def test_desk_ledger_closed_form():
    cfg = ModelConfig()
    model = SegmentationModel(cfg, lazy=True)
    base = model.num_parameters()
    counts = adapt(model, AdaptationConfig(rank=4), lazy=True).counts()
    d, L, r, p, n, c = cfg.dim, cfg.depth, 4, cfg.patch, cfg.tokens, cfg.skip_channels
    assert counts[BASE] == base
    assert counts[PEFT] == L * 2 * (2 * r * d)
    assert counts[PET_EMBEDDING] == p**3 * d + d + n * d
    assert counts[PET_SKIP] == 2 * c + 1
    assert counts[ADAPTER] == 4


def test_dora_ledger_counts_magnitudes():
    model = SegmentationModel(ModelConfig(), lazy=True)
    counts = inject_adapters(model, AdaptationConfig(method="dora", rank=4), lazy=True).counts()
    assert counts[PEFT] == 4 * 2 * (2 * 4 * 64 + 64)


def test_inject_freezes_base_only():
    model = f64_model(0)
    adapt(model, AdaptationConfig(rank=2))
    for name, p in model.named_parameters():
        assert p.frozen == (p.group == BASE), name
    ledger = ParamLedger.from_model(model)
    rep = param_report(ledger)
    assert rep["trainable"] == ledger.total - ledger.counts()[BASE]
    assert 0 < rep["ratio"] < 1


def test_double_injection_rejected():
    model = f64_model(0)
    inject_adapters(model, AdaptationConfig(rank=2))
    with pytest.raises(ConfigError):
        inject_adapters(model, AdaptationConfig(rank=2))


def test_zero_delta_identity_ct_mode():
    model = f64_model(2)
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 8))
    before = model.logits(x).data
    adapt(model, AdaptationConfig(method="dora", rank=2))
    np.testing.assert_array_equal(model.logits(x).data, before)


def test_set_peft_delta_zero_restores_identity():
    model = f64_model(5)
    x = np.random.default_rng(1).normal(size=(1, 8, 8, 8))
    before = model.logits(x).data
    adapt(model, AdaptationConfig(method="dora", rank=2))
    for p in model.parameters():
        if p.group == PEFT:
            p.data = p.data + 0.1
    model.beta.data = np.array(0.3)
    assert not np.array_equal(model.logits(x).data, before)
    set_peft_delta_zero(model)
    np.testing.assert_array_equal(model.logits(x).data, before)
    assert float(model.beta.data) == 0.0


def test_pet_init_strategies():
    model = extend_multimodal(f64_model(0), "cross_modal")
    np.testing.assert_array_equal(model.pet_embedding.weight.data, model.embedding.weight.data)

    zero = extend_multimodal(f64_model(0), "zero")
    tokens = zero.pet_embedding(Tensor(np.random.default_rng(0).normal(size=(1, 8, 8, 8, 1)))).tokens.data
    np.testing.assert_array_equal(tokens, np.zeros_like(tokens))

    r1 = extend_multimodal(f64_model(0), "random", seed=4).pet_embedding.weight.data
    r2 = extend_multimodal(f64_model(0), "random", seed=4).pet_embedding.weight.data
    np.testing.assert_array_equal(r1, r2)
    assert not np.array_equal(r1, model.embedding.weight.data)


def test_extend_twice_rejected():
    model = extend_multimodal(f64_model(0))
    with pytest.raises(ConfigError):
        extend_multimodal(model)


def test_skip_combine_examples():
    rng = np.random.default_rng(0)
    zc = Tensor(rng.normal(size=(1, 2, 2, 2, 3)))
    zp = Tensor(rng.normal(size=(1, 2, 2, 2, 3)))
    np.testing.assert_array_equal(skip_combine(zc, zp, Tensor(np.array(0.0))).data, zc.data)
    np.testing.assert_array_equal(skip_combine(zc, Tensor(-zc.data), Tensor(np.array(1.0))).data, 0.0)
    with pytest.raises(ShapeError):
        skip_combine(zc, Tensor(np.zeros((1, 2, 2, 2, 2))), 1.0)


def test_adapter_examples():
    layer = AdapterLayer(weight=(1.0, 0.0)).astype(np.float64)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4, 4, 1)))
    out = adapter_forward(layer, pet=x).data
    assert out.shape == (4, 4, 4, 2)
    np.testing.assert_array_equal(out[..., 0], x.data[..., 0])
    np.testing.assert_array_equal(out[..., 1], 0.0)
    both = adapter_forward(layer, ct=x, pet=Tensor(x.data * 2)).data
    np.testing.assert_array_equal(both, np.concatenate([x.data, x.data * 2], axis=-1))


def test_default_adapter_routes_to_pet_slot():
    ct, pet = AdapterLayer().astype(np.float64)(Tensor(np.ones((2, 1))))
    np.testing.assert_array_equal(ct.data, 0.0)
    np.testing.assert_array_equal(pet.data, 1.0)


def test_pet_mode_runs_through_adapter():
    model = f64_model(0)
    adapt(model, AdaptationConfig(rank=2))
    out = model.forward(pet=np.random.default_rng(0).normal(size=(1, 8, 8, 8)), mode="pet").data
    assert out.shape == (1, 8, 8, 8, 3)


def test_config_validation():
    for bad in (dict(method="ia3"), dict(rank=0), dict(alpha=0), dict(targets=("x",)), dict(dora_form="z"),
                dict(pet_init="copy")):
        with pytest.raises(ConfigError):
            AdaptationConfig(**bad)
    assert AdaptationConfig(rank=4, alpha=8).scale == 2.0
