"""Byte-stable checkpoint container: config echo plus every parameter by
hierarchical name. Same seed and step always produce identical bytes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import parse_config_text
from .errors import DatasetError

MAGIC = b"anofuse-ckpt v1\n"


def save_checkpoint(model, path, step=0):
    echo = model.config.echo_lines()
    parts = [MAGIC, f"step {step}\n".encode(), f"config {len(echo)}\n".encode()]
    parts.extend((line + "\n").encode() for line in echo)
    params = model.named_params()
    parts.append(f"params {len(params)}\n".encode())
    for name in sorted(params):
        t = params[name]
        shape = ",".join(str(d) for d in t.data.shape)
        parts.append(f"{name} {shape} {int(t.trainable)}\n".encode())
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def _line(blob, pos):
    end = blob.find(b"\n", pos)
    if end < 0:
        raise DatasetError("truncated checkpoint")
    return blob[pos:end].decode(), end + 1


def load_checkpoint(path):
    """Rebuild the model from the stored config, then load parameter data."""
    from .model import build_model

    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise DatasetError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    line, pos = _line(blob, pos)
    step = int(line.split()[1])
    line, pos = _line(blob, pos)
    n_cfg = int(line.split()[1])
    cfg_lines = []
    for _ in range(n_cfg):
        line, pos = _line(blob, pos)
        cfg_lines.append(line)
    config = parse_config_text("\n".join(cfg_lines)).validate()
    model = build_model(config)
    params = model.named_params()
    line, pos = _line(blob, pos)
    n_params = int(line.split()[1])
    if n_params != len(params):
        raise DatasetError(f"checkpoint has {n_params} params, model wants {len(params)}")
    for _ in range(n_params):
        line, pos = _line(blob, pos)
        name, shape_csv, trainable = line.rsplit(" ", 2)
        if name not in params:
            raise DatasetError(f"unknown parameter {name!r} in checkpoint")
        shape = tuple(int(d) for d in shape_csv.split(",") if d)
        t = params[name]
        if shape != t.data.shape or bool(int(trainable)) != t.trainable:
            raise DatasetError(f"parameter {name!r} mismatch: {shape} vs {t.data.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + nbytes > len(blob):
            raise DatasetError(f"truncated parameter data for {name!r}")
        t.data = np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                               offset=pos).reshape(shape).copy()
        pos += nbytes
    return model, step
