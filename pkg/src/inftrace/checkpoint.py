"""Checkpoint files.

Layout::

    INFTRACE1\\n
    key=value\\n        (config, parameter count, corpus fingerprint)
    ...
    \\n                 (blank line ends the header)
    <P little-endian float64 values>
"""

from __future__ import annotations

import warnings
from dataclasses import fields

import numpy as np

from .data import Dataset, atomic_write
from .model import Checkpoint, ModelConfig, init_params

MAGIC = b"INFTRACE1\n"


class CheckpointError(ValueError):
    pass


class FingerprintMismatchWarning(UserWarning):
    pass


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(ckpt.config, f.name)
        lines.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
    lines.append(f"n_params={len(ckpt.theta)}")
    lines.append(f"fingerprint={ckpt.train_fingerprint:016x}")
    lines.append(f"grad_norm={ckpt.grad_norm!r}")
    header = MAGIC + ("\n".join(lines) + "\n\n").encode("ascii")
    return header + ckpt.theta.data.astype("<f8").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


_INT_FIELDS = {"vocab_size", "d", "hidden", "num_classes", "unk_id", "seed", "epochs", "max_newton"}
_FLOAT_FIELDS = {"lr", "l2", "tol"}


def decode_checkpoint(blob: bytes, corpus: Dataset | None = None) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic at offset 0 (not an INFTRACE1 checkpoint)")
    end = blob.find(b"\n\n", len(MAGIC) - 1)
    if end < 0:
        raise CheckpointError(f"truncated header: no terminator after offset {len(MAGIC)}")
    meta = {}
    for line in blob[len(MAGIC):end].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        meta[key] = value
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            raise CheckpointError(f"header lacks {f.name!r}")
        raw = meta[f.name]
        kwargs[f.name] = int(raw) if f.name in _INT_FIELDS else float(raw) if f.name in _FLOAT_FIELDS else raw
    config = ModelConfig(**kwargs)
    n = int(meta["n_params"])
    start = end + 2
    expected = start + 8 * n
    if len(blob) != expected:
        raise CheckpointError(
            f"parameter payload truncated or oversized: file ends at offset {len(blob)}, expected {expected}")
    layout = init_params(config)
    if len(layout) != n:
        raise CheckpointError(f"header says {n} parameters, config implies {len(layout)}")
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64)
    theta = type(layout)(data, dict(layout.segments), layout.trainable)
    ckpt = Checkpoint(config, theta, int(meta["fingerprint"], 16), float(meta["grad_norm"]))
    if corpus is not None and corpus.fingerprint() != ckpt.train_fingerprint:
        warnings.warn("checkpoint was trained on a different corpus (fingerprint mismatch)",
                      FingerprintMismatchWarning, stacklevel=3)
    return ckpt


def load_checkpoint(path, corpus: Dataset | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_checkpoint(blob, corpus)
