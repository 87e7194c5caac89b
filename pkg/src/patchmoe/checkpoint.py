"""Versioned checkpoint container.

Layout (all text lines ASCII, newline-terminated):

    PATCHMOE-CKPT v1\n
    <n_params>\n
    then per parameter:
    <name> <dim0,dim1,...>\n
    <raw little-endian float64 payload, prod(dims) * 8 bytes>

Only parameter values are stored; momentum buffers are transient.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

MAGIC = b"PATCHMOE-CKPT v1\n"


def save_checkpoint(path, named_params):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(named_params)}\n".encode("ascii"))
        for name, p in named_params.items():
            data = np.asarray(p.data, dtype="<f8")
            dims = ",".join(str(d) for d in data.shape)
            f.write(f"{name} {dims}\n".encode("ascii"))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Returns an ordered dict mapping parameter names to float64 arrays."""
    out = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path} is not a version-1 checkpoint")
        n = int(f.readline())
        for _ in range(n):
            header = f.readline().decode("ascii").split()
            name, dims = header[0], header[1]
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise DataError(f"truncated checkpoint payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out


def restore_parameters(named_params, state):
    for name, p in named_params.items():
        if name not in state:
            raise DataError(f"checkpoint missing parameter {name}")
        if state[name].shape != p.data.shape:
            raise DataError(
                f"checkpoint shape {state[name].shape} != model shape "
                f"{p.data.shape} for {name}"
            )
        p.data = state[name].copy()
