"""Clinical record featurization: a fixed-length vector with presence masks and a text sentence."""

from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from pemma.exceptions import DataError

FIELDS = ("gender", "age", "weight", "tobacco", "alcohol", "hpv", "surgery", "chemotherapy", "performance_status")
BINARY_FIELDS = ("tobacco", "alcohol", "surgery", "chemotherapy")
AGE_MEAN, AGE_STD = 60.0, 10.0
WEIGHT_MEAN, WEIGHT_STD = 80.0, 15.0
PERFORMANCE_LEVELS = (0, 1, 2, 3, 4)

_TRUE = {True, 1, "yes", "y", "true", "1"}
_FALSE = {False, 0, "no", "n", "false", "0"}

# (block name, width) in vector order; every block ends with its presence mask
_BLOCKS = (
    ("gender", 3),
    ("age", 2),
    ("weight", 2),
    ("tobacco", 3),
    ("alcohol", 3),
    ("hpv", 3),
    ("surgery", 3),
    ("chemotherapy", 3),
    ("performance_status", len(PERFORMANCE_LEVELS) + 1),
)
EHR_DIM = sum(w for _, w in _BLOCKS)


def feature_slices() -> dict[str, slice]:
    out, start = {}, 0
    for name, width in _BLOCKS:
        out[name] = slice(start, start + width)
        start += width
    return out


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v))


def _as_bool(field: str, v) -> bool:
    key = v.strip().lower() if isinstance(v, str) else v
    if key in _TRUE:
        return True
    if key in _FALSE:
        return False
    raise DataError(f"{field}: cannot interpret {v!r} as yes/no")


def normalize_record(record: Mapping[str, Any]) -> dict[str, Any]:
    """Canonical values (None when missing); unknown keys raise DataError."""
    unknown = sorted(set(record) - set(FIELDS))
    if unknown:
        raise DataError(f"unknown EHR field(s): {unknown}")
    out: dict[str, Any] = {f: None for f in FIELDS}
    for f in FIELDS:
        v = record.get(f)
        if _missing(v):
            continue
        if f == "gender":
            g = str(v).strip().lower()
            g = {"f": "female", "m": "male"}.get(g, g)
            if g not in ("female", "male"):
                raise DataError(f"gender: unexpected value {v!r}")
            out[f] = g
        elif f in ("age", "weight"):
            out[f] = float(v)
        elif f == "hpv":
            if isinstance(v, str) and v.strip().lower() in ("positive", "negative"):
                out[f] = v.strip().lower() == "positive"
            else:
                out[f] = _as_bool(f, v)
        elif f == "performance_status":
            level = int(v)
            if level not in PERFORMANCE_LEVELS:
                raise DataError(f"performance_status must be one of {PERFORMANCE_LEVELS}")
            out[f] = level
        else:
            out[f] = _as_bool(f, v)
    return out


def _number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def ehr_sentence(record: Mapping[str, Any]) -> str:
    r = normalize_record(record)
    subject = f"{r['gender']} head-and-neck cancer patient" if r["gender"] else "head-and-neck cancer patient"
    clauses = []
    if r["age"] is not None:
        clauses.append(f"{_number(r['age'])} years old")
    if r["weight"] is not None:
        clauses.append(f"weighing {_number(r['weight'])} kg")
    if r["tobacco"] is not None:
        clauses.append("tobacco user" if r["tobacco"] else "non-tobacco user")
    if r["alcohol"] is not None:
        clauses.append("alcohol user" if r["alcohol"] else "non-alcohol user")
    if r["hpv"] is not None:
        clauses.append("HPV positive" if r["hpv"] else "HPV negative")
    if r["performance_status"] is not None:
        clauses.append(f"with performance status {r['performance_status']}")
    if r["surgery"] is not None:
        clauses.append("who underwent surgery" if r["surgery"] else "who did not undergo surgery")
    if r["chemotherapy"] is not None:
        clauses.append("received chemotherapy" if r["chemotherapy"] else "did not receive chemotherapy")
    if not clauses:
        return f"This is a {subject}."
    if len(clauses) == 1:
        tail = clauses[0]
    else:
        tail = ", ".join(clauses[:-1]) + ", and " + clauses[-1]
    return f"This is a {subject}, {tail}."


def build_ehr_features(record: Mapping[str, Any]) -> tuple[np.ndarray, str]:
    """(float32 vector of length EHR_DIM, sentence).  Missing fields give a zero block."""
    r = normalize_record(record)
    vec = np.zeros(EHR_DIM, dtype=np.float32)
    sl = feature_slices()

    def put(name, values):
        block = vec[sl[name]]
        block[:-1] = values
        block[-1] = 1.0

    if r["gender"] is not None:
        put("gender", [r["gender"] == "female", r["gender"] == "male"])
    if r["age"] is not None:
        put("age", [(r["age"] - AGE_MEAN) / AGE_STD])
    if r["weight"] is not None:
        put("weight", [(r["weight"] - WEIGHT_MEAN) / WEIGHT_STD])
    for f in BINARY_FIELDS + ("hpv",):
        if r[f] is not None:
            put(f, [r[f], not r[f]])
    if r["performance_status"] is not None:
        put("performance_status", [lvl == r["performance_status"] for lvl in PERFORMANCE_LEVELS])
    return vec, ehr_sentence(record)


def ehr_matrix(records) -> np.ndarray:
    return np.stack([build_ehr_features(r or {})[0] for r in records]) if records else np.zeros((0, EHR_DIM), np.float32)
