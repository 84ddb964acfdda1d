"""Weight checkpoint container.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"PEMMACKP"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 manifest length M
    bytes 16..   M bytes of UTF-8 JSON manifest
    then         payload: float32 little-endian arrays, back to back

The manifest is ``{"format_version": 1, "meta": {...}, "entries": [...]}`` and
every entry is ``{"name", "shape", "frozen", "group", "offset", "count"}`` with
``offset`` in bytes from the start of the payload.  Readers must reject a
larger format version.  Adapter-only ("delta") checkpoints use the same
layout with a subset of groups.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pemma.exceptions import CheckpointError
from pemma.nn import BASE, Module

MAGIC = b"PEMMACKP"
FORMAT_VERSION = 1


@dataclass
class CheckpointEntry:
    name: str
    array: np.ndarray
    frozen: bool
    group: str


def save_checkpoint(path, model: Module, groups=None, meta: dict | None = None) -> Path:
    """Write all parameters of ``model`` (or only those whose group is in ``groups``)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        if groups is not None and p.group not in groups:
            continue
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(p.shape), "frozen": bool(p.frozen), "group": p.group,
                        "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}, "entries": entries},
                          sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint(path) -> tuple[dict[str, CheckpointEntry], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", raw[8:16])
    if version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    payload = memoryview(raw)[16 + mlen:]
    out = {}
    for e in manifest["entries"]:
        end = e["offset"] + 4 * e["count"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        out[e["name"]] = CheckpointEntry(e["name"], arr, bool(e["frozen"]), e["group"])
    return out, manifest.get("meta", {})


def load_into(model: Module, path, strict: bool = True, restore_flags: bool = True) -> dict:
    """Copy checkpoint arrays into ``model``; returns the checkpoint meta.

    With ``strict`` every model parameter must be present; a delta checkpoint
    should be loaded with ``strict=False``.
    """
    entries, meta = read_checkpoint(path)
    own = dict(model.named_parameters())
    unknown = sorted(set(entries) - set(own))
    if unknown:
        raise CheckpointError(f"checkpoint has parameters the model lacks: {unknown[:5]}")
    if strict:
        missing = sorted(set(own) - set(entries))
        if missing:
            raise CheckpointError(f"checkpoint is missing parameters: {missing[:5]}")
    for name, e in entries.items():
        p = own[name]
        if tuple(p.shape) != e.array.shape:
            raise CheckpointError(f"{name}: shape {e.array.shape} != model {p.shape}")
        p.data = e.array.astype(p.dtype)
        if restore_flags:
            p.frozen = e.frozen
            p.group = e.group
    return meta


def params_hash(model: Module, groups=(BASE,)) -> str:
    """SHA-256 over names and raw bytes of the selected groups."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if groups is not None and p.group not in groups:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# whole-model persistence ------------------------------------------------------


def model_meta(model, adaptation=None, **extra) -> dict:
    meta = {"config": model.config.to_dict(), "primary": model.primary, "multimodal": bool(model.is_multimodal),
            "adaptation": None if adaptation is None else _adaptation_dict(adaptation)}
    meta.update(extra)
    return meta


def _adaptation_dict(cfg) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    d["targets"] = list(d["targets"])
    return d


def save_model(path, model, adaptation=None, groups=None, **extra) -> Path:
    """Checkpoint with enough metadata for :func:`load_model` to rebuild the architecture."""
    return save_checkpoint(path, model, groups=groups, meta=model_meta(model, adaptation, **extra))


def build_from_meta(meta: dict):
    from pemma.adaptation import AdaptationConfig, adapt, extend_multimodal
    from pemma.backbone import ModelConfig, SegmentationModel

    if "config" not in meta:
        raise CheckpointError("checkpoint carries no model config")
    model = SegmentationModel(ModelConfig(**meta["config"]), primary=meta.get("primary", "ct"))
    cfg = None
    if meta.get("adaptation"):
        cfg = AdaptationConfig(**meta["adaptation"])
        adapt(model, cfg)
    elif meta.get("multimodal"):
        extend_multimodal(model)
    return model, cfg


def load_model(path, delta=None):
    """Rebuild a model from a full checkpoint, optionally overlaying a delta checkpoint.

    Returns ``(model, adaptation_config_or_None, meta)``.
    """
    _, meta = read_checkpoint(path)
    if delta is not None:
        _, dmeta = read_checkpoint(delta)
        meta = {**meta, **{k: v for k, v in dmeta.items() if k in ("adaptation", "multimodal")}}
    model, cfg = build_from_meta(meta)
    if delta is None:
        load_into(model, path, strict=True)
    else:
        load_into(model, path, strict=False)
        load_into(model, delta, strict=False)
        if cfg is not None:
            for p in model.parameters():
                if p.group == BASE:
                    p.frozen = True
    return model, cfg, meta
