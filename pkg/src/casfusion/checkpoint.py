"""Binary checkpoint format.

Layout (little-endian)::

    b"CFNET1"  u32 version
    u32 len    config text (UTF-8)
    u32 count  then per parameter:
               u16 name length, name, u8 dtype code, u8 ndim, u32 dims..., raw data
    u8 flag    1 when a training-state block follows:
               u32 adam step, u32 epoch, u32 len + JSON RNG state,
               u32 count + arrays (same record layout) for float64 master
               weights and Adam moments ("master/<p>", "adam_m/<p>", "adam_v/<p>")

Parameters are stored as float32.  The training-state block keeps float64
copies so a resumed run continues the exact trajectory.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import AdamState

MAGIC = b"CFNET1"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    adam: AdamState
    epoch: int
    rng_state: dict
    master: dict[str, np.ndarray]


def _write_array(fh, name: str, arr: np.ndarray, dtype: np.dtype) -> None:
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", CODES[dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(fh, fmt: str):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_array(fh) -> tuple[str, np.ndarray]:
    (n,) = _read(fh, "<H")
    name = fh.read(n).decode()
    code, ndim = _read(fh, "<BB")
    if code not in DTYPES:
        raise CheckpointError(f"{name}: unknown dtype code {code}")
    dims = _read(fh, f"<{ndim}I") if ndim else ()
    dtype = DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise CheckpointError(f"{name}: truncated data")
    return name, np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float64)


def save_checkpoint(path, config_text: str, params: dict[str, np.ndarray],
                    train_state: TrainState | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = config_text.encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        _write_array(buf, name, arr, DTYPES[1])
    if train_state is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        st = train_state
        buf.write(struct.pack("<II", st.adam.t, st.epoch))
        rng = json.dumps(st.rng_state).encode()
        buf.write(struct.pack("<I", len(rng)))
        buf.write(rng)
        names = list(st.master)
        arrays = [(f"master/{n}", st.master[n]) for n in names]
        if st.adam.m:
            arrays += [(f"adam_m/{n}", m) for n, m in zip(names, st.adam.m)]
            arrays += [(f"adam_v/{n}", v) for n, v in zip(names, st.adam.v)]
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(buf, name, arr, DTYPES[2])
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], TrainState | None]:
    """Returns (config text, float32-valued parameters, optional training state)."""
    try:
        fh = io.BytesIO(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = _read(fh, "<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    (n,) = _read(fh, "<I")
    config_text = fh.read(n).decode()
    (count,) = _read(fh, "<I")
    params = dict(_read_array(fh) for _ in range(count))
    flag = fh.read(1)
    if flag in (b"", b"\x00"):
        return config_text, params, None
    t, epoch = _read(fh, "<II")
    (n,) = _read(fh, "<I")
    rng_state = json.loads(fh.read(n).decode())
    (count,) = _read(fh, "<I")
    arrays = dict(_read_array(fh) for _ in range(count))
    names = list(params)
    master = {k: arrays[f"master/{k}"] for k in names}
    adam = AdamState(t=t)
    if f"adam_m/{names[0]}" in arrays:
        adam.m = [arrays[f"adam_m/{k}"] for k in names]
        adam.v = [arrays[f"adam_v/{k}"] for k in names]
    return config_text, params, TrainState(adam=adam, epoch=epoch, rng_state=rng_state, master=master)
