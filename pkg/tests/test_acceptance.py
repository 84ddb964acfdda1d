"""End-to-end acceptance suite.

Each test covers one numbered criterion and logs a PASS/FAIL line that is
printed in the pytest terminal summary.  The desk-scale training criteria
(3, 9, 10, 11) share one pretrained CT model and one set of adapted models.
"""

import copy
import json
import time
from pathlib import Path

import numpy as np
import pytest

from pemma import autodiff as ad
from pemma import exceptions
from pemma.adaptation import (AdaptationConfig, AdapterLayer, DoraParams, LowRankPair, adapt, adapter_forward,
                              dora_weight, param_report)
from pemma.autodiff import Tensor, finite_difference_check
from pemma.backbone import Attention, ModelConfig, PrognosisHead, SegmentationModel, model_forward, skip_combine
from pemma.checkpoint import load_into, load_model, params_hash, save_model
from pemma.data import default_manifest_dict, ehr_matrix, generate_phantom, manifest_from_dict, read_nifti, write_nifti
from pemma.data.nifti import DT_INT16
from pemma.fusion import (LateFusion, build_early_fusion, early_fusion_delta, early_fusion_ledger,
                          late_fusion_combine, late_fusion_ledger)
from pemma.nn import PEFT
from pemma.objectives import dice_ce_loss
from pemma.rng import Rng
from pemma.survival import antolini_cindex, assign_bins, deephit_loss, discretize_times
from pemma.training import (ADAPT_GROUPS, FeatureScaler, TrainConfig, encoder_features, evaluate_segmentation,
                            predict_pmf, set_trainable, train_prognosis_head, train_segmentation)
from conftest import f64_model
from oracles import cindex_bruteforce, survival_from_pmf

GRAD_TOL = 1e-4
SEEDS = (1, 2, 3)
METHODS = ("lora", "dora")
# desk budget: large enough steps for the small phantom model to converge in minutes
PRETRAIN = dict(steps=500, lr=3e-3)
ADAPT = dict(steps=500, lr=3e-3)
CORPUS = Path(__file__).parent / "fixtures" / "nifti"


# 1 --------------------------------------------------------------------------------


def _attention(rng, method):
    attn = Attention(8, 2, Rng(int(rng.integers(1 << 30)))).astype(np.float64)
    for t in ("q", "v"):
        if method == "lora":
            mod = LowRankPair(8, 2, t, scale=2.0, rng=Rng(1))
            mod.astype(np.float64)
            mod.A.data, mod.B.data = rng.normal(size=(2, 8)), rng.normal(size=(8, 2)) * 0.5
            leaves = [mod.A, mod.B]
        else:
            mod = DoraParams(getattr(attn, t).weight, 2, t, scale=2.0, rng=Rng(1))
            mod.astype(np.float64)
            mod.pair.A.data, mod.pair.B.data = rng.normal(size=(2, 8)), rng.normal(size=(8, 2)) * 0.5
            mod.magnitude.data = mod.magnitude.data * rng.uniform(0.5, 1.5, 8)
            leaves = [mod.pair.A, mod.pair.B, mod.magnitude]
        attn.adapters[t] = mod
    return attn, leaves


def _gradient_cases(seed):
    """(name, f, leaf) triples for one random instance of every differentiable block."""
    rng = np.random.default_rng(seed)
    out = []
    for method in METHODS:
        attn, leaves = _attention(rng, method)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        w = rng.normal(size=(2, 5, 8))
        f = lambda _, attn=attn, x=x, w=w: ad.sum(attn(x) * w)  # noqa: E731
        out += [(f"attention_{method}", f, leaf) for leaf in (x, *leaves)]

    logits = Tensor(rng.normal(size=(2, 3, 3, 3, 3)))
    labels = rng.integers(0, 3, size=(2, 3, 3, 3))
    out.append(("dice_ce", lambda t: dice_ce_loss(t, labels), logits))

    n, k = 8, 5
    times = rng.exponential(5.0, n)
    events = rng.random(n) < 0.6
    events[0] = True
    _, bins = discretize_times(times, k)
    out.append(("deephit", lambda t: deephit_loss(ad.softmax(t, axis=-1), times, events, bins),
                Tensor(rng.normal(size=(n, k)))))

    z_c, z_p = Tensor(rng.normal(size=(1, 4, 4, 4, 2))), Tensor(rng.normal(size=(1, 4, 4, 4, 2)))
    beta = Tensor(np.array(rng.normal()))
    w_skip = rng.normal(size=(1, 4, 4, 4, 2))
    f = lambda _: ad.sum(skip_combine(z_c, z_p, beta) * w_skip)  # noqa: E731
    out += [("skip_combine", f, leaf) for leaf in (z_c, z_p, beta)]

    layer = AdapterLayer(rng.normal(size=2), rng.normal(size=2)).astype(np.float64)
    vol = Tensor(rng.normal(size=(1, 3, 3, 3, 1)))
    w_ad = rng.normal(size=(1, 3, 3, 3, 2))
    f = lambda _: ad.sum(adapter_forward(layer, pet=vol) * w_ad)  # noqa: E731
    out += [("adapter", f, leaf) for leaf in (layer.weight, layer.bias, vol)]

    head = PrognosisHead(6, 4, hidden=5, bins=4, seed=int(rng.integers(1 << 30))).astype(np.float64)
    feats, ehr = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 4)))
    w_head = rng.normal(size=(3, 4))
    f = lambda _: ad.sum(ad.softmax(head(feats, ehr), axis=-1) * w_head)  # noqa: E731
    out += [("prognosis_head", f, leaf) for leaf in (head.fc1.weight, head.fc2.weight, feats, ehr)]
    return out


def test_criterion_01_gradients(criterion):
    with criterion(1, "gradient correctness (float64 central differences)") as c:
        t0 = time.perf_counter()
        worst: dict[str, float] = {}
        for seed in range(20):
            for name, f, leaf in _gradient_cases(seed):
                worst[name] = max(worst.get(name, 0.0), finite_difference_check(f, leaf))
        elapsed = time.perf_counter() - t0
        c.detail = f"max rel err {max(worst.values()):.1e} over {len(worst)} blocks x 20 seeds, {elapsed:.1f}s"
        assert set(worst) == {"attention_lora", "attention_dora", "dice_ce", "deephit", "skip_combine", "adapter",
                              "prognosis_head"}
        assert max(worst.values()) < GRAD_TOL, worst
        assert elapsed < 60.0


# 2 --------------------------------------------------------------------------------


def test_criterion_02_zero_delta_identity(criterion, tmp_path):
    with criterion(2, "zero-delta identity after injection") as c:
        t0 = time.perf_counter()
        manifest = manifest_from_dict(default_manifest_dict())
        cases = manifest.cases("adapt_test")[:10]
        path = save_model(tmp_path / "base.ckpt", SegmentationModel(ModelConfig(), seed=4))
        base, _, _ = load_model(path)
        reference = [model_forward(base, case, "ct") for case in cases]
        for method in METHODS:
            model, _, _ = load_model(path)
            adapt(model, AdaptationConfig(method=method))
            assert float(model.beta.data) == 0.0
            for case, ref in zip(cases, reference):
                np.testing.assert_array_equal(model_forward(model, case, "ct"), ref)
        elapsed = time.perf_counter() - t0
        c.detail = f"10 cases x (lora, dora), {elapsed:.1f}s"
        assert elapsed < 10.0


# 4 --------------------------------------------------------------------------------


def test_criterion_04_parameter_arithmetic(criterion):
    with criterion(4, "parameter arithmetic at reference geometry") as c:
        cfg = ModelConfig.full_geometry()
        base = SegmentationModel(cfg, lazy=True)
        late = param_report(late_fusion_ledger(base, SegmentationModel(cfg, primary="pet", lazy=True)))
        early_model = build_early_fusion(SegmentationModel(cfg, lazy=True), lazy=True)
        early = param_report(early_fusion_ledger(early_model, base.num_parameters()))
        pemma = param_report(adapt(SegmentationModel(cfg, lazy=True), AdaptationConfig(rank=8), lazy=True))
        c.detail = (f"late {late['total_vs_base']:.1f}x, early +{early_model.num_parameters() - base.num_parameters()}"
                    f", pemma ratio {pemma['ratio']:.4f} vs early {early['ratio']:.2f}")
        assert late["total"] == 2 * base.num_parameters()
        assert early_model.num_parameters() - base.num_parameters() == early_fusion_delta(cfg)
        assert early_fusion_delta(cfg) == cfg.patch**3 * cfg.dim + cfg.skip_channels
        assert pemma["ratio"] <= 0.10
        assert pemma["ratio"] < early["ratio"]


# 5 --------------------------------------------------------------------------------


def test_criterion_05_dora_magnitude(criterion):
    with criterion(5, "DoRA magnitude preservation") as c:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(1000):
            d_out, d_in = (int(v) for v in rng.integers(2, 10, size=2))
            r = int(rng.integers(1, d_in))
            W = rng.normal(size=(d_out, d_in))
            dp = DoraParams(Tensor(W), r, rng=Rng(0))
            dp.astype(np.float64)
            dp.pair.A.data, dp.pair.B.data = rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r))
            m = rng.uniform(0.1, 3.0, d_out)
            dp.magnitude.data = m
            adapted = dora_weight(W, dp, float(rng.uniform(0.5, 4.0)))
            worst = max(worst, float(np.max(np.abs(np.linalg.norm(adapted, axis=1) - m))))
        c.detail = f"max |norm - m| = {worst:.1e}"
        assert worst < 1e-6


# 6 --------------------------------------------------------------------------------


def test_criterion_06_late_fusion(criterion):
    with criterion(6, "late fusion endpoints and convexity") as c:
        ct, pet = f64_model(0), f64_model(1, primary="pet")
        rng = np.random.default_rng(6)
        x_ct, x_pet = rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(2, 8, 8, 8))
        m_c, m_p = ct.forward(x_ct).data, pet.forward(pet=x_pet, mode="pet").data
        np.testing.assert_array_equal(LateFusion(ct, pet, 1.0).predict_proba(x_ct, x_pet), m_c)
        np.testing.assert_array_equal(LateFusion(ct, pet, 0.0).predict_proba(x_ct, x_pet), m_p)
        worst = 0.0
        for w in np.linspace(0.0, 1.0, 11):
            fused = LateFusion(ct, pet, float(w)).predict_proba(x_ct, x_pet)
            np.testing.assert_array_equal(fused, late_fusion_combine(m_c, m_p, float(w)))
            worst = max(worst, float(np.max(np.abs(fused.sum(-1) - 1.0))))
        c.detail = f"max |row sum - 1| = {worst:.1e}"
        assert worst < 1e-6


# 7 --------------------------------------------------------------------------------


def test_criterion_07_cindex_oracle(criterion):
    with criterion(7, "C-index equals brute-force oracle") as c:
        rng = np.random.default_rng(7)
        done, censored = 0, []
        while done < 50:
            n = int(rng.integers(4, 21))
            times = rng.exponential(10.0, n)
            events = rng.random(n) < 0.3
            if not any(events[i] and times[i] < times[j] for i in range(n) for j in range(n)):
                continue
            k = int(rng.integers(2, 8))
            _, bins = discretize_times(times, k)
            pmf = rng.random((n, k))
            pmf /= pmf.sum(1, keepdims=True)
            assert antolini_cindex(pmf, times, events, bins) == cindex_bruteforce(
                survival_from_pmf(pmf), times, events, bins)
            censored.append(1.0 - events.mean())
            done += 1
        times = np.arange(1.0, 9.0)
        events = np.ones(8, bool)
        _, bins = discretize_times(times, 8)
        surv = np.tile(np.linspace(0.1, 0.8, 8)[:, None], (1, 8))
        perfect = antolini_cindex(surv, times, events, bins, kind="survival")
        anti = antolini_cindex(surv[::-1], times, events, bins, kind="survival")
        c.detail = f"50 instances, mean censoring {np.mean(censored):.2f}, perfect {perfect}, anti {anti}"
        assert perfect == 1.0 and anti == 0.0


# 8 --------------------------------------------------------------------------------


def test_criterion_08_quantile_bins(criterion):
    with criterion(8, "quantile discretisation of 488 records") as c:
        times = np.random.default_rng(8).exponential(30.0, 488)
        assert len(np.unique(times)) == 488
        _, bins = discretize_times(times, 20)
        counts = np.bincount(bins, minlength=20)
        c.detail = f"bin sizes {sorted(set(counts.tolist()))}"
        assert len(counts) == 20 and set(counts.tolist()) <= {24, 25}


# 12 -------------------------------------------------------------------------------


def test_criterion_12_nifti(criterion, tmp_path):
    with criterion(12, "NIfTI-1 round trip and parser corpus") as c:
        index = json.loads((CORPUS / "index.json").read_text())
        shape = tuple(index["shape"])
        grid = np.arange(np.prod(shape), dtype=np.float64).reshape(shape) + index["offset"]
        ok = bad = 0
        for name, info in index["files"].items():
            if info["expect"] == "ok":
                slope, inter = info["scale"]
                np.testing.assert_array_equal(read_nifti(CORPUS / name).grid, (grid * slope + inter).astype(np.float32))
                ok += 1
            else:
                with pytest.raises(getattr(exceptions, info["expect"])):
                    read_nifti(CORPUS / name)
                bad += 1
        assert {"le_float32.nii", "be_float32.nii", "le_int16.nii", "be_int16.nii"} <= set(index["files"])
        case = generate_phantom(12)
        for endian in "<>":
            back = read_nifti(write_nifti(tmp_path / f"ct{endian == '<'}.nii", case.ct, endian=endian))
            np.testing.assert_array_equal(back.grid, case.ct.grid)
            assert back.spacing == case.ct.spacing
        mask = read_nifti(write_nifti(tmp_path / "m.nii", case.mask.astype(np.int16), datatype=DT_INT16), "mask")
        np.testing.assert_array_equal(mask.grid, case.mask)
        c.detail = f"{ok} valid + {bad} malformed fixtures"
        assert ok + bad >= 12


# desk-scale experiments (3, 9, 10, 11) ---------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    manifest = manifest_from_dict(default_manifest_dict())
    path = tmp_path_factory.mktemp("desk") / "base.ckpt"
    model = SegmentationModel(ModelConfig(), seed=0)
    t0 = time.process_time()
    train_segmentation(model, manifest.cases("pretrain", with_pet=False), TrainConfig(mode="ct", **PRETRAIN))
    save_model(path, model)
    return {"manifest": manifest, "base_path": path, "pretrain_cpu": time.process_time() - t0,
            "test": manifest.cases("adapt_test"), "train": manifest.cases("adapt_train")}


@pytest.fixture(scope="module")
def arms(desk):
    """Adapted model, timings and the base-group hash after 100 steps for every (method, seed)."""
    base, _, _ = load_model(desk["base_path"])
    baseline = evaluate_segmentation(base, desk["test"], ["ct"])["ct"]["average"]
    out = {"baseline": baseline, "theta": params_hash(base)}
    for method in METHODS:
        for seed in SEEDS:
            model, _, _ = load_model(desk["base_path"])
            adapt(model, AdaptationConfig(method=method), seed=seed)
            set_trainable(model, ADAPT_GROUPS)
            seen = {}

            def probe(step, _loss, model=model, seen=seen):
                if step + 1 == 100:
                    seen["hash"] = params_hash(model)

            t0 = time.process_time()
            train_segmentation(model, desk["train"], TrainConfig(mode=None, seed=seed, **ADAPT), callback=probe)
            dice = evaluate_segmentation(model, desk["test"], ["ctpet"])["ctpet"]["average"]
            out[method, seed] = {"model": model, "hash100": seen.get("hash"), "dice": dice,
                                 "cpu": time.process_time() - t0}
    return out


@pytest.mark.slow
def test_criterion_03_freeze_invariance(criterion, desk, arms):
    with criterion(3, "base parameters untouched after 100 adapt steps") as c:
        reloaded, _, _ = load_model(desk["base_path"])
        expected = params_hash(reloaded)
        hashes = [arms[m, s]["hash100"] for m in METHODS for s in SEEDS]
        c.detail = f"{len(hashes)} runs, theta sha256 {expected[:12]}"
        assert all(h == expected for h in hashes)
        assert all(params_hash(arms[m, s]["model"]) == expected for m in METHODS for s in SEEDS)


@pytest.mark.slow
def test_criterion_09_adaptation_benefit(criterion, desk, arms):
    with criterion(9, "adapted ctpet Dice exceeds CT baseline by >= 0.15") as c:
        gains = {(m, s): arms[m, s]["dice"] - arms["baseline"] for m in METHODS for s in SEEDS}
        slowest = max(arms[m, s]["cpu"] for m in METHODS for s in SEEDS) + desk["pretrain_cpu"]
        c.detail = (f"baseline {arms['baseline']:.3f}; min gain {min(gains.values()):.3f}; "
                    f"slowest arm incl. pretrain {slowest / 60:.1f} CPU-min")
        assert all(g >= 0.15 for g in gains.values()), gains
        assert slowest <= 300.0


@pytest.mark.slow
def test_criterion_10_continual(criterion, desk, arms, tmp_path):
    with criterion(10, "PEFT-only CT fine-tuning keeps ctpet Dice") as c:
        train = desk["manifest"].cases("continual_F_train", with_pet=False)
        drops = []
        for method in METHODS:
            model = copy.deepcopy(arms[method, 1]["model"])
            theta = params_hash(model)
            before = evaluate_segmentation(model, desk["test"], ["ctpet"])
            delta = save_model(tmp_path / f"{method}.ckpt", model, AdaptationConfig(method=method), groups=ADAPT_GROUPS)
            set_trainable(model, (PEFT,))
            train_segmentation(model, train, TrainConfig(steps=100, lr=1e-4, mode="ct", seed=10))
            assert params_hash(model) == theta
            after = evaluate_segmentation(model, desk["test"], ["ctpet"])
            drops.append(before["ctpet"]["average"] - after["ctpet"]["average"])
            load_into(model, delta, strict=False)
            assert evaluate_segmentation(model, desk["test"], ["ctpet"]) == before
        c.detail = f"Dice drop lora {drops[0]:+.4f}, dora {drops[1]:+.4f}; restore exact"
        assert all(d < 0.05 for d in drops)


@pytest.mark.slow
def test_criterion_11_prognosis_trend(criterion, desk, arms):
    with criterion(11, "prognosis C-index trend CT <= CP <= CPT") as c:
        doc = default_manifest_dict()
        doc["splits"]["prognosis_train"][0]["count"] = 300
        doc["splits"]["prognosis_test"][0]["count"] = 200
        manifest = manifest_from_dict(doc)
        train, test = manifest.cases("prognosis_train"), manifest.cases("prognosis_test")
        model = arms["lora", 1]["model"]

        def survival(cases):
            return (np.array([x.survival.time for x in cases]), np.array([x.survival.event for x in cases]))

        t_tr, e_tr = survival(train)
        t_te, e_te = survival(test)
        edges, b_tr = discretize_times(t_tr, 20)
        b_te = assign_bins(t_te, edges)
        ehr_tr, ehr_te = ehr_matrix([x.ehr for x in train]), ehr_matrix([x.ehr for x in test])
        feats = {mode: (encoder_features(model, train, mode), encoder_features(model, test, mode))
                 for mode in ("ct", "ctpet")}
        settings = {"CT": ("ct", False), "CP": ("ctpet", False), "CPT": ("ctpet", True)}
        passed, results, untrained = 0, {}, []
        for seed in SEEDS:
            res = {}
            for name, (mode, use_ehr) in settings.items():
                f_tr, f_te = feats[mode]
                scale = FeatureScaler.fit(f_tr)
                e_train, e_test = (ehr_tr, ehr_te) if use_ehr else (None, None)
                head = PrognosisHead(model.config.dim, ehr_tr.shape[1] if use_ehr else 0, seed=seed)
                untrained.append(antolini_cindex(predict_pmf(head, scale(f_te), e_test), t_te, e_te, b_te))
                train_prognosis_head(head, scale(f_tr), t_tr, e_tr, b_tr, e_train, steps=300, lr=1e-3)
                res[name] = antolini_cindex(predict_pmf(head, scale(f_te), e_test), t_te, e_te, b_te)
            results[seed] = res
            passed += res["CPT"] >= res["CP"] >= res["CT"] and res["CPT"] - res["CT"] >= 0.05
        c.detail = "; ".join(f"s{s} " + " ".join(f"{k}={v:.3f}" for k, v in r.items()) for s, r in results.items())
        c.detail += f"; untrained in [{min(untrained):.3f}, {max(untrained):.3f}]"
        assert passed >= 2
        assert all(abs(u - 0.5) <= 0.1 for u in untrained)
