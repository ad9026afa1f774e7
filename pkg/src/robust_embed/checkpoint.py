"""Checkpoint directory: ``manifest`` + one raw little-endian float32 file per tensor.

Manifest lines are ``name<TAB>shape<TAB>dtype`` where shape is ``AxBx...``
(``scalar`` for 0-d tensors). Non-tensor metadata (vocabulary, configs,
counters) lives next to it in ``vocab.txt`` and ``config.json``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch


class CheckpointError(RuntimeError):
    pass


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(s: str) -> tuple[int, ...]:
    return () if s == "scalar" else tuple(int(x) for x in s.split("x"))


def _fname(name: str) -> str:
    return name + ".bin"


def write_tensors(path, tensors: dict[str, torch.Tensor]):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in tensors.items():
        if any(c.isspace() for c in name) or "/" in name:
            raise CheckpointError(f"illegal tensor name {name!r}")
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        with open(path / _fname(name), "wb") as f:
            f.write(arr.tobytes(order="C"))
        lines.append(f"{name}\t{_shape_str(arr.shape)}\tfloat32\n")
    tmp = path / "manifest.tmp"
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, path / "manifest")


def read_tensors(path) -> dict[str, torch.Tensor]:
    """Read every tensor listed in the manifest; nothing is returned unless all are valid."""
    path = Path(path)
    manifest = path / "manifest"
    if not manifest.exists():
        raise CheckpointError(f"no manifest in {path}")
    out = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"malformed manifest line {lineno}: {line!r}")
        name, shape_s, dtype = parts
        if dtype != "float32":
            raise CheckpointError(f"tensor {name}: unsupported dtype {dtype}")
        shape = _parse_shape(shape_s)
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        fpath = path / _fname(name)
        if not fpath.exists():
            raise CheckpointError(f"tensor {name}: file {fpath.name} missing (expected {expected} bytes)")
        raw = fpath.read_bytes()
        if len(raw) != expected:
            raise CheckpointError(f"tensor {name}: expected {expected} bytes, found {len(raw)}")
        out[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    return out


def write_meta(path, meta: dict):
    Path(path).mkdir(parents=True, exist_ok=True)
    with open(Path(path) / "config.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def read_meta(path) -> dict:
    p = Path(path) / "config.json"
    if not p.exists():
        raise CheckpointError(f"no config.json in {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p}: malformed JSON ({exc})") from exc
