"""Data manifest: named splits of phantom seeds or volume files, per center.

Schema (YAML, ``schema_version: 1``)::

    schema_version: 1
    phantom:            # optional PhantomSpec overrides for every center
      side: 32
    centers:            # optional per-center shift overrides
      G: {intensity_offset: 20.0, noise_scale: 1.6, size_bias: -0.3}
    splits:
      pretrain:
        - {center: A, seeds: [0, 1, 2]}
        - {center: B, seed_start: 100, count: 8}
      adapt_train:
        - {center: E, ct: e0_ct.nii, pet: e0_pet.nii, mask: e0_mask.nii, id: e0}

File paths are resolved relative to the manifest.  ``.nii`` files go through
the NIfTI reader, anything else through the raw volume reader.  A seed may
appear in one split only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from pemma.data.nifti import read_nifti
from pemma.data.phantom import CENTER_SHIFTS, CenterShift, PhantomSpec, generate_phantom
from pemma.data.preprocessing import preprocess_intensities
from pemma.data.rawvolume import read_raw_volume, read_volume
from pemma.data.types import Case
from pemma.exceptions import ConfigError, DataError

SCHEMA_VERSION = 1
KNOWN_SPLITS = (
    "pretrain",
    "adapt_train",
    "adapt_val",
    "adapt_test",
    "continual_F_train",
    "continual_F_test",
    "continual_G_train",
    "continual_G_test",
    "prognosis_train",
    "prognosis_test",
)


@dataclass(frozen=True)
class CaseRef:
    center: str
    seed: int | None = None
    ct: str | None = None
    pet: str | None = None
    mask: str | None = None
    case_id: str | None = None


@dataclass
class CenterManifest:
    splits: dict[str, list[CaseRef]]
    phantom: dict[str, Any] = field(default_factory=dict)
    centers: dict[str, dict[str, float]] = field(default_factory=dict)
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        unknown = set(self.splits) - set(KNOWN_SPLITS)
        if unknown:
            raise ConfigError(f"unknown split name(s) {sorted(unknown)}; allowed: {KNOWN_SPLITS}")
        seen: dict[int, str] = {}
        for name, refs in self.splits.items():
            for ref in refs:
                if ref.center not in CENTER_SHIFTS:
                    raise ConfigError(f"split {name}: unknown center {ref.center!r}")
                if ref.seed is None and ref.ct is None:
                    raise ConfigError(f"split {name}: entry needs a seed or a ct file")
                if ref.seed is not None:
                    if ref.seed in seen:
                        raise ConfigError(f"seed {ref.seed} appears in splits {seen[ref.seed]!r} and {name!r}")
                    seen[ref.seed] = name
        try:
            self.spec_for("A")
        except TypeError as exc:
            raise ConfigError(f"bad phantom overrides: {exc}") from exc

    def spec_for(self, center: str) -> PhantomSpec:
        base = PhantomSpec(**self.phantom).for_center(center)
        if center in self.centers:
            shift = replace(CENTER_SHIFTS[center], **self.centers[center])
            base = replace(base, shift=shift)
        return base

    def has(self, split: str) -> bool:
        return bool(self.splits.get(split))

    def refs(self, split: str) -> list[CaseRef]:
        if not self.has(split):
            raise ConfigError(f"manifest has no {split!r} split")
        return self.splits[split]

    def load_case(self, ref: CaseRef, preprocess: bool = True) -> Case:
        if ref.seed is not None:
            case = generate_phantom(ref.seed, self.spec_for(ref.center), ref.center, ref.case_id)
        else:
            case = self._load_files(ref)
        return preprocess_intensities(case) if preprocess else case

    def cases(self, split: str, preprocess: bool = True, with_pet: bool = True) -> list[Case]:
        out = [self.load_case(r, preprocess) for r in self.refs(split)]
        if not with_pet:
            out = [c.replace(pet=None) for c in out]
        return out

    def _load_files(self, ref: CaseRef) -> Case:
        def load(rel, modality):
            p = self.root / rel
            if not p.exists():
                raise DataError(f"missing volume file {p}")
            if p.suffix == ".nii":
                return read_nifti(p, modality)
            return read_volume(p, modality)

        ct = load(ref.ct, "ct")
        pet = load(ref.pet, "pet") if ref.pet else None
        if ref.mask is None:
            raise DataError(f"case {ref.case_id or ref.ct}: no mask file")
        p = self.root / ref.mask
        if p.suffix == ".nii":
            mask = read_nifti(p, "mask").grid
        else:
            mask = read_raw_volume(p)[0]
        mask = np.rint(mask).astype(np.uint8)
        return Case(ct=ct, pet=pet, mask=mask, center=ref.center, case_id=ref.case_id or Path(ref.ct).stem)

    def to_dict(self) -> dict:
        splits = {}
        for name, refs in self.splits.items():
            entries = []
            for r in refs:
                if r.seed is not None:
                    entries.append({"center": r.center, "seeds": [r.seed]})
                else:
                    entries.append({k: v for k, v in (("center", r.center), ("ct", r.ct), ("pet", r.pet),
                                                      ("mask", r.mask), ("id", r.case_id)) if v is not None})
            splits[name] = entries
        return {"schema_version": SCHEMA_VERSION, "phantom": dict(self.phantom), "centers": dict(self.centers),
                "splits": splits}


def _parse_entry(split: str, entry: dict) -> list[CaseRef]:
    if not isinstance(entry, dict) or "center" not in entry:
        raise ConfigError(f"split {split}: every entry needs a center")
    allowed = {"center", "seeds", "seed_start", "count", "ct", "pet", "mask", "id"}
    extra = set(entry) - allowed
    if extra:
        raise ConfigError(f"split {split}: unknown keys {sorted(extra)}")
    center = str(entry["center"])
    if "ct" in entry:
        return [CaseRef(center, ct=entry["ct"], pet=entry.get("pet"), mask=entry.get("mask"), case_id=entry.get("id"))]
    if "seeds" in entry:
        seeds = [int(s) for s in entry["seeds"]]
    elif "seed_start" in entry:
        seeds = list(range(int(entry["seed_start"]), int(entry["seed_start"]) + int(entry.get("count", 1))))
    else:
        raise ConfigError(f"split {split}: entry needs seeds, seed_start/count, or files")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"split {split}: duplicate seeds")
    return [CaseRef(center, seed=s) for s in seeds]


def manifest_from_dict(doc: dict, root=None) -> CenterManifest:
    if not isinstance(doc, dict):
        raise ConfigError("manifest must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported manifest schema_version {version!r} (expected {SCHEMA_VERSION})")
    splits = {}
    for name, entries in (doc.get("splits") or {}).items():
        refs = []
        for e in entries or []:
            refs.extend(_parse_entry(name, e))
        splits[name] = refs
    centers = {}
    for c, overrides in (doc.get("centers") or {}).items():
        bad = set(overrides) - set(vars(CenterShift()))
        if bad:
            raise ConfigError(f"center {c}: unknown shift keys {sorted(bad)}")
        centers[str(c)] = overrides
    return CenterManifest(splits, dict(doc.get("phantom") or {}), centers, Path(root) if root else Path.cwd())


def load_manifest(path) -> CenterManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"manifest {path} is not valid YAML: {exc}") from exc
    return manifest_from_dict(doc, path.parent)


def save_manifest(manifest: CenterManifest, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=False))
    return path


def default_manifest_dict(scale: str = "desk") -> dict:
    """Staged multi-center layout: pretrain A-D, adapt E, continual F and G, prognosis E."""
    n = {"desk": (10, 24, 4, 12, 12, 8, 120, 80), "tiny": (2, 4, 2, 3, 2, 2, 16, 12)}[scale]
    per_center, adapt_tr, adapt_val, adapt_te, cont_tr, cont_te, prog_tr, prog_te = n
    splits = {"pretrain": [{"center": c, "seed_start": 1000 * (i + 1), "count": per_center}
                           for i, c in enumerate("ABCD")]}
    splits["adapt_train"] = [{"center": "E", "seed_start": 5000, "count": adapt_tr}]
    splits["adapt_val"] = [{"center": "E", "seed_start": 5500, "count": adapt_val}]
    splits["adapt_test"] = [{"center": "E", "seed_start": 5800, "count": adapt_te}]
    for k, c in enumerate("FG"):
        splits[f"continual_{c}_train"] = [{"center": c, "seed_start": 6000 + 1000 * k, "count": cont_tr}]
        splits[f"continual_{c}_test"] = [{"center": c, "seed_start": 6500 + 1000 * k, "count": cont_te}]
    splits["prognosis_train"] = [{"center": "E", "seed_start": 20000, "count": prog_tr}]
    splits["prognosis_test"] = [{"center": "E", "seed_start": 30000, "count": prog_te}]
    return {"schema_version": SCHEMA_VERSION, "phantom": {"side": 32}, "centers": {}, "splits": splits}


__all__ = ["CaseRef", "CenterManifest", "load_manifest", "save_manifest", "manifest_from_dict",
           "default_manifest_dict", "KNOWN_SPLITS", "SCHEMA_VERSION"]
