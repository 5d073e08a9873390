"""Persistence: flat config files, parameter checkpoints and CSV tables.

Every file carries ``format_version`` up front. Config files are plain text
with one ``key = value`` pair per line where the value is a JSON literal.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "IDNORM_OUT"


def output_root(explicit=None, default="runs"):
    """``explicit`` if given, else ``$IDNORM_OUT``, else ``default``."""
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or default)


def config_hash(flat: dict):
    blob = json.dumps(flat, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ------------------------------------------------------------------- configs

def format_config(flat: dict):
    lines = [f"format_version = {FORMAT_VERSION}"]
    for key in sorted(flat):
        lines.append(f"{key} = {json.dumps(flat[key])}")
    return "\n".join(lines) + "\n"


def parse_config(text, source="<string>"):
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        try:
            flat[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value {value.strip()!r}: {exc}")
    version = flat.pop("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{source}: unsupported config format_version {version}")
    return flat


def write_config(path, flat: dict):
    Path(path).write_text(format_config(flat))


def read_config(path):
    return parse_config(Path(path).read_text(), str(path))


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, module, config: dict, kind, extra=None):
    """JSON dump of every parameter tensor with its shape and the producing config."""
    tensors = {name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
               for name, p in module.named_parameters()}
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
           "config_hash": config_hash(config), "tensors": tensors}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, kind=None):
    """``(state_dict, document)``; the state maps names to numpy arrays."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise ConfigurationError(f"{path}: expected a {kind} checkpoint, found {doc.get('kind')!r}")
    state = {name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
             for name, t in doc["tensors"].items()}
    return state, doc


# ---------------------------------------------------------------------- csv

def _meta_lines(meta):
    meta = {"format_version": FORMAT_VERSION, **(meta or {})}
    return [f"# {k}={v}" for k, v in meta.items()]


def write_csv(path, header, rows, meta=None):
    """CSV preceded by ``# key=value`` comment lines (format version, hash, seed...)."""
    with open(path, "w", newline="") as fh:
        for line in _meta_lines(meta):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    """``(meta, header, rows)`` with cells left as strings."""
    meta, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, [])
    return meta, header, [r for r in reader]


def write_curves(path, rows, meta=None):
    write_csv(path, ["step", "term", "value"], rows, meta)
