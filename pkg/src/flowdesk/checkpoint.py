"""JSON parameter checkpoints: ``{name: {"shape": [...], "data": [...]}}``.

A reserved ``"__meta__"`` entry may hold the run configuration needed to
rebuild the model; it is not a parameter and is skipped by shape checks.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import SchemaError, ShapeError

META_KEY = "__meta__"


def dumps_params(params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    doc = {}
    if meta is not None:
        doc[META_KEY] = meta
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        doc[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
    return json.dumps(doc, indent=None, separators=(",", ":")) + "\n"


def save_params(path, params, meta=None) -> None:
    Path(path).write_text(dumps_params(params, meta), encoding="utf-8")


def loads_params(text: str, source="<string>") -> tuple[dict[str, np.ndarray], dict | None]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", source, exc.lineno) from None
    if not isinstance(doc, dict):
        raise SchemaError("checkpoint must be a JSON object", source)
    meta = doc.pop(META_KEY, None)
    out = {}
    for name, entry in doc.items():
        if not isinstance(entry, dict) or "shape" not in entry or "data" not in entry:
            raise SchemaError(f"entry {name!r} needs 'shape' and 'data'", source)
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.ndim != 1 or data.size != int(np.prod(shape, dtype=np.int64)):
            raise SchemaError(
                f"entry {name!r}: {data.size} values do not fill shape {list(shape)}", source
            )
        out[name] = data.reshape(shape)
    return out, meta


def load_params(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    return loads_params(path.read_text(encoding="utf-8"), str(path))


def assign_params(target: Mapping, values: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into live params, validating names and shapes."""
    missing = set(target) - set(values)
    extra = set(values) - set(target)
    if missing or extra:
        raise SchemaError(
            f"checkpoint parameter names differ (missing={sorted(missing)}, unexpected={sorted(extra)})"
        )
    for name, p in target.items():
        v = values[name]
        if v.shape != p.data.shape:
            raise ShapeError(f"load {name}", p.data.shape, v.shape)
        p.data[...] = v
