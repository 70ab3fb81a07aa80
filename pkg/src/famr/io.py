"""On-disk formats: famr-ckpt-v1 checkpoints, CSV tables and JSON result documents.

Floats are written with 17 significant digits so every value round-trips
bit-exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .data import Dataset
from .nn import ModelSpec, ParamVector

CKPT_FORMAT = "famr-ckpt-v1"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def _emit(obj, indent: int) -> str:
    pad = " " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_emit(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + " " * indent + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(fmt(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _emit(v, indent + 1) for v in obj) + "\n" + " " * indent + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            # JSON has no inf/nan literal; Python's reader accepts these
            return "Infinity" if obj > 0 else ("-Infinity" if obj < 0 else "NaN")
        return "%.17g" % obj
    return json.dumps(obj)


def dumps(doc: dict) -> str:
    """Deterministic JSON text with 17-significant-digit floats."""
    return _emit(doc, 0) + "\n"


def write_json(path, doc: dict) -> None:
    Path(path).write_text(dumps(doc))


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def save_checkpoint(path, params: ParamVector, spec: ModelSpec, seed: int,
                    provenance: dict | None = None) -> None:
    doc = {
        "format_version": CKPT_FORMAT,
        "model_spec": spec.to_dict(),
        "seed": int(seed),
        "params": np.asarray(params.values),
    }
    if provenance:
        doc["provenance"] = provenance
    write_json(path, doc)


def load_checkpoint(path) -> tuple[ParamVector, ModelSpec, dict]:
    doc = read_json(path)
    if doc.get("format_version") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    spec = ModelSpec.from_dict(doc["model_spec"])
    params = ParamVector.for_spec(np.array(doc["params"], dtype=np.float64), spec)
    return params, spec, doc


def write_csv(path, rows: list[dict], fields: list[str] | None = None,
              comment: str | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r.get(k, "")) for k in fields])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_dataset(path, data: Dataset) -> None:
    """Columnar text: a ``# {...}`` header with d, C, seed and generator, then
    x0..x{d-1}, label and (when present) style_tag per row."""
    header = {"d": data.dim, "C": data.num_classes, "seed": data.seed, "generator": data.generator}
    fields = [f"x{j}" for j in range(data.dim)] + ["label"]
    if data.style_tags is not None:
        fields.append("style_tag")
    rows = []
    for i in range(len(data)):
        r = {f"x{j}": float(v) for j, v in enumerate(data.inputs[i])}
        r["label"] = int(data.labels[i])
        if data.style_tags is not None:
            r["style_tag"] = int(data.style_tags[i])
        rows.append(r)
    write_csv(path, rows, fields, json.dumps(header, sort_keys=True))


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# "):
        raise ValueError(f"{path}: missing dataset header line")
    header = json.loads(first[2:])
    rows = read_csv(path)
    d = header["d"]
    X = np.array([[float(r[f"x{j}"]) for j in range(d)] for r in rows]).reshape(len(rows), d)
    y = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    tags = None
    if rows and "style_tag" in rows[0]:
        tags = np.array([int(r["style_tag"]) for r in rows], dtype=np.int64)
    return Dataset(X, y, header["C"], tags, header["seed"], header["generator"])
