"""Staged experiment runners behind the ``pemma`` command.

Every stage writes one run directory under ``config.out``::

    pretrain/                  base.ckpt
    adapt/<method>/            model.ckpt, delta.ckpt (pemma_*), pet.ckpt (late)
    continual/<method>/<C>_<modalities>_<scope>/   delta_before.ckpt, delta.ckpt
    eval/<method>/ , eval/base/
    prognosis/<method>/
    report/                    table.csv, table.md

and each of them holds ``metrics.csv``, ``summary.json``, ``run_record.json``
and ``config.yaml`` (the snapshot the run can be repeated from).  Adapt runs
also hold ``param_report.json``.

``metrics.csv`` columns are fixed: run, method, train_modality, split,
center, mode, class, metric, value.  Dice rows use metric ``dice`` and class
tumor, lymph or average; prognosis rows use metric ``cindex`` or ``pairs``
with the setting (CT, CP, CPT) in the mode column.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from pemma.adaptation import ParamLedger, adapt, param_report
from pemma.backbone import PrognosisHead, SegmentationModel
from pemma.checkpoint import load_into, load_model, params_hash, save_model
from pemma.config import MODES, RunConfig, save_config
from pemma.data.ehr import ehr_matrix
from pemma.data.manifest import CenterManifest, default_manifest_dict, load_manifest, manifest_from_dict
from pemma.exceptions import ConfigError, DataError, ModalityError
from pemma.fusion import LateFusion, build_early_fusion, early_fusion_ledger, late_fusion_ledger
from pemma.survival import antolini_cindex, assign_bins, discretize_times
from pemma.training import (ADAPT_GROUPS, CONTINUAL_SCOPES, FeatureScaler, TrainConfig, available_modes,
                            encoder_features, evaluate_segmentation, predict_pmf, set_trainable,
                            train_prognosis_head, train_segmentation)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("run", "method", "train_modality", "split", "center", "mode", "class", "metric", "value")
CLASSES = ("tumor", "lymph", "average")
PEMMA_METHODS = ("pemma_lora", "pemma_dora")
NA = "NA"


# plumbing ---------------------------------------------------------------------


def resolve_manifest(cfg: RunConfig) -> CenterManifest:
    if cfg.manifest.startswith("default:"):
        scale = cfg.manifest.split(":", 1)[1]
        if scale not in ("desk", "tiny"):
            raise ConfigError(f"unknown default manifest {cfg.manifest!r}")
        return manifest_from_dict(default_manifest_dict(scale), cfg.root)
    return load_manifest(cfg.resolve(cfg.manifest))


def stage_dir(cfg: RunConfig, *parts: str) -> Path:
    return cfg.out_dir.joinpath(*parts)


def _train_config(cfg: RunConfig, stage: str, **over) -> TrainConfig:
    p = cfg.stage_params(stage)
    return TrainConfig(steps=int(p["steps"]), lr=float(p["lr"]), weight_decay=float(p["weight_decay"]),
                       batch_size=int(p["batch_size"]), val_every=int(p["val_every"]),
                       patience=int(p["patience"]), seed=cfg.seed, **over)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in METRIC_COLUMNS})
    return path


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != METRIC_COLUMNS:
        raise DataError(f"{path}: unexpected metrics columns {list(rows[0])}")
    return rows


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def snapshot(cfg: RunConfig, stage: str) -> RunConfig:
    """The config with every path made absolute, so it can be re-run from anywhere."""
    manifest = cfg.manifest if cfg.manifest.startswith("default:") else str(cfg.resolve(cfg.manifest).resolve())
    ckpts = {k: str(cfg.resolve(v).resolve()) for k, v in cfg.checkpoints.items()}
    return replace(cfg, stage=stage, out=str(cfg.out_dir.resolve()), manifest=manifest, checkpoints=ckpts)


def finish_run(cfg: RunConfig, stage: str, run_dir: Path, rows: list[dict], summary: dict,
               checkpoints: dict[str, str], t0: float, theta_hash: str | None = None) -> dict:
    """Write metrics, summary, config snapshot and the run record."""
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = snapshot(cfg, stage)
    save_config(snap, run_dir / "config.yaml")
    write_metrics(run_dir / "metrics.csv", rows)
    _write_json(run_dir / "summary.json", summary)
    record = {
        "stage": stage,
        "config": snap.to_dict(),
        "checkpoints": checkpoints,
        "metrics": ["metrics.csv", "summary.json"],
        "seed": cfg.seed,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "theta_hash": theta_hash,
    }
    _write_json(run_dir / "run_record.json", record)
    return record


def _dice_rows(run: str, method: str, train_modality: str, split: str, center: str, result: dict,
               metric: str = "dice") -> list[dict]:
    rows = []
    for mode, scores in result.items():
        for cls in CLASSES:
            rows.append({"run": run, "method": method, "train_modality": train_modality, "split": split,
                         "center": center, "mode": mode, "class": cls, "metric": metric, "value": scores[cls]})
    return rows


def _centers(cases) -> str:
    return "+".join(sorted({c.center for c in cases}))


# checkpoint lookup ------------------------------------------------------------


def base_checkpoint(cfg: RunConfig) -> Path:
    path = cfg.resolve(cfg.checkpoints["base"]) if "base" in cfg.checkpoints else stage_dir(cfg, "pretrain", "base.ckpt")
    if not path.exists():
        raise ConfigError(f"no pretrained checkpoint at {path}; run 'pemma pretrain' first")
    return path


def adapt_dir(cfg: RunConfig) -> Path:
    path = cfg.resolve(cfg.checkpoints["adapt"]) if "adapt" in cfg.checkpoints else stage_dir(cfg, "adapt", cfg.method)
    if not (path / "run_record.json").exists():
        raise ConfigError(f"no {cfg.method} adaptation run at {path}; run 'pemma adapt' first")
    return path


def load_base(cfg: RunConfig) -> SegmentationModel:
    model, _, _ = load_model(base_checkpoint(cfg))
    return model


def load_adapted(cfg: RunConfig):
    """The adapted predictor for ``cfg.method``: a model or a :class:`LateFusion`."""
    d = adapt_dir(cfg)
    if cfg.method == "late":
        pet_model, _, _ = load_model(d / "pet.ckpt")
        return LateFusion(load_base(cfg), pet_model, cfg.late_w_ct)
    if cfg.method == "early":
        return load_model(d / "model.ckpt")[0]
    return load_model(base_checkpoint(cfg), delta=d / "delta.ckpt")[0]


TRAIN_MODALITY = {"pemma_lora": "ctpet", "pemma_dora": "ctpet", "early": "ctpet", "late": "ct+pet", "base": "ct"}


# stages -------------------------------------------------------------------------


def run_pretrain(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    manifest = resolve_manifest(cfg)
    cases = manifest.cases("pretrain", with_pet=False)
    val = manifest.cases("adapt_val", with_pet=False) if manifest.has("adapt_val") else None
    model = SegmentationModel(cfg.model, seed=cfg.seed)
    result = train_segmentation(model, cases, _train_config(cfg, "pretrain", mode="ct"), val_cases=val,
                                val_modes=["ct"])
    run_dir = stage_dir(cfg, "pretrain")
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = save_model(run_dir / "base.ckpt", model, stage="pretrain", seed=cfg.seed)
    report = param_report(ParamLedger.from_model(model, scheme="base"))
    _write_json(run_dir / "param_report.json", report)
    rows = _loss_rows("pretrain", "base", "ct", result)
    summary = {"steps_run": len(result.losses), "final_loss": result.losses[-1], "best_step": result.best_step,
               "stopped_early": result.stopped_early, "parameters": model.num_parameters()}
    return finish_run(cfg, "pretrain", run_dir, rows, summary, {"base": ckpt.name}, t0, params_hash(model))


def _loss_rows(run, method, train_modality, result) -> list[dict]:
    rows = [{"run": run, "method": method, "train_modality": train_modality, "split": "train", "center": "",
             "mode": "", "class": "", "metric": "train_loss_final", "value": result.losses[-1]}]
    if result.val_losses:
        best = min(v for _, v in result.val_losses)
        rows.append({**rows[0], "split": "val", "metric": "val_loss_best", "value": best})
    return rows


def run_adapt(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    base = load_base(cfg)
    theta = params_hash(base)
    manifest = resolve_manifest(cfg)
    cases = manifest.cases("adapt_train")
    if any(c.pet is None for c in cases):
        raise DataError("adaptation needs PET for every adapt_train case")
    val = manifest.cases("adapt_val") if manifest.has("adapt_val") else None
    run_dir = stage_dir(cfg, "adapt", cfg.method)
    run_dir.mkdir(parents=True, exist_ok=True)
    acfg = cfg.adaptation_config()
    checkpoints = {"base": str(base_checkpoint(cfg))}
    summary: dict = {"method": cfg.method}

    if cfg.method in PEMMA_METHODS:
        model = base
        adapt(model, acfg, seed=cfg.seed)
        set_trainable(model, ADAPT_GROUPS)
        p = cfg.stage_params("adapt")
        tcfg = _train_config(cfg, "adapt", mode=None, mode_probs=p["mode_probs"])
        result = train_segmentation(model, cases, tcfg, val_cases=val, val_modes=list(cfg.modes))
        if params_hash(model) != theta:
            raise ConfigError("base parameters changed during adaptation")
        save_model(run_dir / "model.ckpt", model, acfg, stage="adapt", method=cfg.method)
        save_model(run_dir / "delta.ckpt", model, acfg, groups=ADAPT_GROUPS, stage="adapt", method=cfg.method)
        checkpoints.update(model="model.ckpt", delta="delta.ckpt")
        ledger = ParamLedger.from_model(model)
        summary["beta"] = float(np.asarray(model.beta.data).ravel()[0])
    elif cfg.method == "early":
        model = build_early_fusion(base, acfg.pet_init, seed=cfg.seed)
        result = train_segmentation(model, cases, _train_config(cfg, "adapt", mode="ctpet"), val_cases=val,
                                    val_modes=["ctpet"])
        save_model(run_dir / "model.ckpt", model, stage="adapt", method="early")
        checkpoints["model"] = "model.ckpt"
        ledger = early_fusion_ledger(model, base.num_parameters())
    else:
        pet_model = SegmentationModel(cfg.model, seed=cfg.seed, primary="pet")
        result = train_segmentation(pet_model, cases, _train_config(cfg, "late", mode="pet"), val_cases=val,
                                    val_modes=["pet"])
        save_model(run_dir / "pet.ckpt", pet_model, stage="adapt", method="late")
        checkpoints["pet"] = "pet.ckpt"
        ledger = late_fusion_ledger(base, pet_model)
        summary["w_ct"] = cfg.late_w_ct

    report = param_report(ledger)
    _write_json(run_dir / "param_report.json", report)
    summary.update(steps_run=len(result.losses), final_loss=result.losses[-1], best_step=result.best_step,
                   stopped_early=result.stopped_early, trainable_ratio=report["ratio"])
    rows = _loss_rows("adapt", cfg.method, TRAIN_MODALITY[cfg.method], result)
    return finish_run(cfg, "adapt", run_dir, rows, summary, checkpoints, t0, theta)


def continual_scope(cfg: RunConfig) -> tuple[str, ...]:
    p = cfg.stage_params("continual")
    extra = tuple(p.get("extra_groups") or ())
    groups = CONTINUAL_SCOPES[cfg.scope]
    if extra and cfg.scope == "peft_only":
        raise ConfigError(f"scope widened without flag: extra groups {list(extra)} need --scope wide")
    bad = set(extra) - set(ADAPT_GROUPS)
    if bad:
        raise ConfigError(f"continual extra_groups may only name {ADAPT_GROUPS}, got {sorted(bad)}")
    return tuple(dict.fromkeys(groups + extra))


def run_continual(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    if cfg.method not in PEMMA_METHODS:
        raise ConfigError("continual fine-tuning applies to pemma_lora and pemma_dora runs")
    p = cfg.stage_params("continual")
    center, modalities = str(p["center"]), str(p["modalities"])
    if center not in ("F", "G"):
        raise ConfigError(f"continual center must be F or G, got {center!r}")
    if modalities not in ("ct", "ctpet"):
        raise ConfigError(f"continual modalities must be ct or ctpet, got {modalities!r}")
    groups = continual_scope(cfg)
    src = adapt_dir(cfg)
    model = load_adapted(cfg)
    theta = params_hash(model)
    manifest = resolve_manifest(cfg)
    train = manifest.cases(f"continual_{center}_train", with_pet=modalities == "ctpet")
    tests = {f"continual_{center}_test": manifest.cases(f"continual_{center}_test")}
    if manifest.has("adapt_test"):
        tests["adapt_test"] = manifest.cases("adapt_test")

    run_dir = stage_dir(cfg, "continual", cfg.method, f"{center}_{modalities}_{cfg.scope}")
    run_dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src / "delta.ckpt", run_dir / "delta_before.ckpt")
    train_modality = f"{modalities}@{center}"
    rows, before = [], {}
    for split, cases in tests.items():
        before[split] = evaluate_segmentation(model, cases, cfg.modes)
        rows += _dice_rows("continual", cfg.method, train_modality, split, _centers(cases), before[split],
                           metric="dice_before")

    set_trainable(model, groups)
    over = {"mode": "ct"} if modalities == "ct" else {"mode": None, "mode_probs": cfg.stage_params("adapt")["mode_probs"]}
    result = train_segmentation(model, train, _train_config(cfg, "continual", **over))
    theta_after = params_hash(model)
    if theta_after != theta:
        raise ConfigError("base parameters changed during continual fine-tuning")
    acfg = cfg.adaptation_config()
    save_model(run_dir / "delta.ckpt", model, acfg, groups=ADAPT_GROUPS, stage="continual", method=cfg.method)

    after = {}
    for split, cases in tests.items():
        after[split] = evaluate_segmentation(model, cases, cfg.modes)
        rows += _dice_rows("continual", cfg.method, train_modality, split, _centers(cases), after[split])

    # restoring the saved pre-fine-tuning delta must give the old numbers back
    load_into(model, run_dir / "delta_before.ckpt", strict=False)
    restored = {split: evaluate_segmentation(model, cases, cfg.modes) for split, cases in tests.items()}
    summary = {
        "center": center, "modalities": modalities, "scope": cfg.scope, "groups": list(groups),
        "steps_run": len(result.losses), "final_loss": result.losses[-1],
        "before": before, "after": after,
        "theta_unchanged": theta_after == theta,
        "restore_exact": restored == before,
    }
    checkpoints = {"delta_before": "delta_before.ckpt", "delta": "delta.ckpt", "base": str(base_checkpoint(cfg))}
    return finish_run(cfg, "continual", run_dir, rows, summary, checkpoints, t0, theta_after)


def run_eval(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    which = str(cfg.eval.get("checkpoint", "auto"))
    if which == "base":
        predictor, method = load_base(cfg), "base"
        report_path = stage_dir(cfg, "pretrain", "param_report.json")
        ckpts = {"base": str(base_checkpoint(cfg))}
    elif which == "auto":
        predictor, method = load_adapted(cfg), cfg.method
        report_path = adapt_dir(cfg) / "param_report.json"
        ckpts = {"adapt": str(adapt_dir(cfg))}
    else:
        raise ConfigError(f"eval.checkpoint must be 'auto' or 'base', got {which!r}")
    avail = available_modes(predictor)
    missing = [m for m in cfg.modes if m not in avail]
    if missing:
        raise ModalityError(f"mode(s) {missing} unavailable for the {method} checkpoint (has {list(avail)})")
    manifest = resolve_manifest(cfg)
    rows, summary = [], {"method": method, "modes": list(cfg.modes), "splits": {}}
    for split in cfg.eval.get("splits", ["adapt_test"]):
        cases = manifest.cases(split, with_pet=any(m != "ct" for m in cfg.modes))
        res = evaluate_segmentation(predictor, cases, cfg.modes)
        rows += _dice_rows("eval", method, TRAIN_MODALITY[method], split, _centers(cases), res)
        summary["splits"][split] = res
    run_dir = stage_dir(cfg, "eval", method)
    run_dir.mkdir(parents=True, exist_ok=True)
    if report_path.exists():
        shutil.copyfile(report_path, run_dir / "param_report.json")
    return finish_run(cfg, "eval", run_dir, rows, summary, ckpts, t0)


SETTINGS = {"CT": ("ct", False), "CP": ("ctpet", False), "CPT": ("ctpet", True)}


def _survival_arrays(cases, split):
    if any(c.survival is None for c in cases):
        raise DataError(f"split {split} is missing survival labels")
    return (np.array([c.survival.time for c in cases], dtype=np.float64),
            np.array([c.survival.event for c in cases], dtype=bool))


def run_prognosis(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    if cfg.method not in PEMMA_METHODS:
        raise ConfigError("prognosis uses the encoder of a pemma_lora or pemma_dora adaptation")
    p = cfg.stage_params("prognosis")
    unknown = set(p["settings"]) - set(SETTINGS)
    if unknown:
        raise ConfigError(f"unknown prognosis settings {sorted(unknown)}")
    model = load_adapted(cfg)
    manifest = resolve_manifest(cfg)
    train, test = manifest.cases("prognosis_train"), manifest.cases("prognosis_test")
    t_tr, e_tr = _survival_arrays(train, "prognosis_train")
    t_te, e_te = _survival_arrays(test, "prognosis_test")
    edges, b_tr = discretize_times(t_tr, int(p["bins"]))
    b_te = assign_bins(t_te, edges)
    ehr_tr, ehr_te = ehr_matrix([c.ehr or {} for c in train]), ehr_matrix([c.ehr or {} for c in test])
    feats = {}
    rows, summary = [], {"settings": {}, "bin_edges": edges.tolist()}
    for name in p["settings"]:
        mode, use_ehr = SETTINGS[name]
        if mode not in feats:
            feats[mode] = (encoder_features(model, train, mode), encoder_features(model, test, mode))
        f_tr, f_te = feats[mode]
        scale = FeatureScaler.fit(f_tr)
        head = PrognosisHead(model.config.dim, ehr_tr.shape[1] if use_ehr else 0, int(p["hidden"]), int(p["bins"]),
                             seed=cfg.seed)
        untrained = antolini_cindex(predict_pmf(head, scale(f_te), ehr_te if use_ehr else None), t_te, e_te, b_te)
        train_prognosis_head(head, scale(f_tr), t_tr, e_tr, b_tr, ehr_tr if use_ehr else None, steps=int(p["steps"]),
                             lr=float(p["lr"]), weight_decay=float(p["weight_decay"]), eta=float(p["eta"]),
                             sigma=float(p["sigma"]))
        c, pairs = antolini_cindex(predict_pmf(head, scale(f_te), ehr_te if use_ehr else None), t_te, e_te, b_te,
                                   return_pairs=True)
        base = {"run": "prognosis", "method": cfg.method, "train_modality": "ctpet", "split": "prognosis_test",
                "center": _centers(test), "mode": name, "class": ""}
        rows += [{**base, "metric": "cindex", "value": c}, {**base, "metric": "pairs", "value": pairs},
                 {**base, "metric": "cindex_untrained", "value": untrained}]
        summary["settings"][name] = {"cindex": c, "pairs": pairs, "cindex_untrained": untrained}
    run_dir = stage_dir(cfg, "prognosis", cfg.method)
    return finish_run(cfg, "prognosis", run_dir, rows, summary, {"adapt": str(adapt_dir(cfg))}, t0)


# report -----------------------------------------------------------------------------


def report_columns() -> list[str]:
    return [f"{m}:{c}" for m in MODES for c in CLASSES]


def run_report(cfg: RunConfig) -> dict:
    """Merge every Dice row under ``out`` into one method x train-modality table.

    One row per (method, train_modality, split); columns are infer-mode:class
    pairs plus the parameter ratios from the matching param_report.  Cells
    without a run hold ``NA``.  Two runs disagreeing on the same cell is an error.
    """
    t0 = time.perf_counter()
    records = sorted(p for p in cfg.out_dir.rglob("run_record.json") if "report" not in p.parent.parts[-1:])
    if not records:
        raise DataError(f"no run records under {cfg.out_dir}")
    cells: dict[tuple, dict[str, str]] = {}
    sources: dict[tuple, str] = {}
    ratios: dict[tuple, dict] = {}
    for rec in records:
        run_dir = rec.parent
        metrics = run_dir / "metrics.csv"
        if not metrics.exists():
            continue
        report = run_dir / "param_report.json"
        for r in read_metrics(metrics):
            if r["metric"] != "dice":
                continue
            key = (r["method"], r["train_modality"], r["split"])
            col = f"{r['mode']}:{r['class']}"
            row = cells.setdefault(key, {})
            if col in row and row[col] != r["value"]:
                raise DataError(f"conflicting duplicate runs for {key} {col}: {row[col]} ({sources[key + (col,)]}) "
                                f"vs {r['value']} ({run_dir})")
            row[col] = r["value"]
            sources[key + (col,)] = str(run_dir)
            if report.exists() and key not in ratios:
                ratios[key] = json.loads(report.read_text())
    cols = report_columns()
    header = ["method", "train_modality", "split"] + cols + ["trainable_vs_base", "total_vs_base"]
    table = []
    for key in sorted(cells):
        pr = ratios.get(key, {})
        table.append(list(key) + [cells[key].get(c, NA) for c in cols]
                     + [_fmt(pr[k]) if k in pr else NA for k in ("trainable_vs_base", "total_vs_base")])
    run_dir = stage_dir(cfg, "report")
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(table)
    (run_dir / "table.md").write_text(_markdown(header, table))
    summary = {"rows": len(table), "runs": [str(r.parent.relative_to(cfg.out_dir)) for r in records]}
    return finish_run(cfg, "report", run_dir, [], summary, {}, t0)


def _markdown(header, table) -> str:
    def cell(v):
        try:
            return f"{float(v):.3f}"
        except ValueError:
            return v

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in table]
    return "\n".join(lines) + "\n"


RUNNERS = {"pretrain": run_pretrain, "adapt": run_adapt, "continual": run_continual, "eval": run_eval,
           "prognosis": run_prognosis, "report": run_report}


def run_stage(stage: str, cfg: RunConfig) -> dict:
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    log.info("running %s (method=%s, seed=%d, out=%s)", stage, cfg.method, cfg.seed, cfg.out_dir)
    return RUNNERS[stage](cfg)
