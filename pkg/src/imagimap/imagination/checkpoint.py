"""Binary parameter checkpoints (``IMUN``) and optimizer sidecars."""

from __future__ import annotations

import io
import struct
import zipfile
from pathlib import Path

import numpy as np

from ..errors import MissingInputError, ParameterError
from .network import ImaginationUnit
from .optim import Adam

MAGIC = b"IMUN"
FORMAT_VERSION = 1


def save_unit(path, unit: ImaginationUnit) -> None:
    """Header (magic, version, class id, tensor count) then per tensor 4 u32 dims and f32 data.

    Tensors with fewer than four dimensions are padded with trailing 1s.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", FORMAT_VERSION, unit.class_id, len(unit.params)))
        for p in unit.params:
            dims = list(p.shape) + [1] * (4 - p.ndim)
            fh.write(struct.pack("<4I", *dims))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_unit(path) -> ImaginationUnit:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(str(path))
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ParameterError(f"{path}: not an IMUN checkpoint")
    version, class_id, count = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise ParameterError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    params = []
    for i in range(count):
        dims = struct.unpack("<4I", raw[pos:pos + 16])
        pos += 16
        n = int(np.prod(dims))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float32)
        pos += 4 * n
        # kernels are (3, 3, cin, cout); biases were stored as (cout, 1, 1, 1)
        params.append(arr.reshape(dims) if i % 2 == 0 else arr.reshape(dims[0]))
    widths = tuple(int(params[2 * k].shape[-1]) for k in range(4))
    return ImaginationUnit(int(class_id), params, widths)


def save_optimizer(path, opt: Adam) -> None:
    """An ``.npz`` archive readable by ``np.load``.

    Entries carry a fixed timestamp so equal states give equal bytes.
    """
    arrays = {"t": np.array(opt.t)}
    arrays.update({f"m{i}": m for i, m in enumerate(opt.m)})
    arrays.update({f"v{i}": v for i, v in enumerate(opt.v)})
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_optimizer(path, opt: Adam) -> None:
    with np.load(path) as data:
        n = len(opt.m)
        opt.load_state({"t": int(data["t"]),
                        "m": [data[f"m{i}"] for i in range(n)],
                        "v": [data[f"v{i}"] for i in range(n)]})
