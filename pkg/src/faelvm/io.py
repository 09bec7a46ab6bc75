"""On-disk formats: spike matrices (CSV and binary), label vectors, matrices, JSON.

The spike CSV has one row per neuron, header ``neuron_id,bin_0,...``. The
binary variant is ``b"FAEL"`` followed by little-endian u32 version, N and T,
then N*T row-major little-endian float64 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"FAEL"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _num(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def save_spikes_csv(path, spikes) -> None:
    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.ndim != 2:
        raise FormatError("spike matrix must be 2-D (neurons x bins)")
    N, T = spikes.shape
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(["neuron_id"] + [f"bin_{t}" for t in range(T)]) + "\n")
        for i in range(N):
            fh.write(",".join([str(i)] + [_num(v) for v in spikes[i]]) + "\n")


def load_spikes_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0].strip() != "neuron_id":
        raise FormatError(f"{path}: header must start with 'neuron_id'")
    if len(header) < 2:
        raise FormatError(f"{path}: no time-bin columns")
    expected = [f"bin_{t}" for t in range(len(header) - 1)]
    if [h.strip() for h in header[1:]] != expected:
        raise FormatError(f"{path}: bin columns must be named bin_0, bin_1, ...")
    rows = []
    for k, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise FormatError(f"{path}:{k}: expected {len(header)} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{k}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no neuron rows")
    out = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{path}: non-finite spike values")
    return out


def save_spikes_binary(path, spikes) -> None:
    spikes = np.ascontiguousarray(spikes, dtype="<f8")
    if spikes.ndim != 2:
        raise FormatError("spike matrix must be 2-D (neurons x bins)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, BINARY_VERSION, *spikes.shape))
        fh.write(spikes.tobytes())


def load_spikes_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, N, T = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    if version != BINARY_VERSION:
        raise VersionError(f"{path}: unsupported binary version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * N * T:
        raise FormatError(f"{path}: expected {N}x{T} values, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(N, T).astype(np.float64)


def load_spikes(path) -> np.ndarray:
    """Read either format, detected by the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_spikes_binary(path)
    return load_spikes_csv(path)


def save_spikes(path, spikes) -> None:
    if str(path).endswith(".bin"):
        save_spikes_binary(path, spikes)
    else:
        save_spikes_csv(path, spikes)


def save_labels_csv(path, labels) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("neuron_id,label\n")
        for i, lab in enumerate(np.asarray(labels, dtype=int)):
            fh.write(f"{i},{lab}\n")


def load_labels_csv(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "neuron_id,label":
        raise FormatError(f"{path}: header must be 'neuron_id,label'")
    try:
        return np.array([int(ln.split(",")[1]) for ln in lines[1:]], dtype=int)
    except (IndexError, ValueError):
        raise FormatError(f"{path}: malformed label row") from None


def save_matrix_csv(path, M, prefix: str = "col", index: str = "neuron_id") -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join([index] + [f"{prefix}_{j}" for j in range(M.shape[1])]) + "\n")
        for i, row in enumerate(M):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in row]) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indent, NaN written as null."""
    Path(path).write_text(json.dumps(_plain(obj), indent=1, sort_keys=True) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
