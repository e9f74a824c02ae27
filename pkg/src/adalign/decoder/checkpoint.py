"""Named-tensor checkpoint files.

An uncompressed zip of ``.npy`` members plus ``meta.json``.  Every member
gets a fixed timestamp, so the same parameters and metadata always give
the same bytes (``numpy.savez`` stamps the current time).
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta, schema_version=SCHEMA_VERSION, tensors=list(arrays))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        _member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, arr in arrays.items():
            b = io.BytesIO()
            np.lib.format.write_array(b, np.ascontiguousarray(arr), allow_pickle=False)
            _member(zf, f"tensors/{name}.npy", b.getvalue())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expect_vocab_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointError(f"{path}: schema version {meta.get('schema_version')} "
                                  f"!= {SCHEMA_VERSION}")
        if expect_vocab_hash is not None and meta.get("vocab_hash") != expect_vocab_hash:
            raise CheckpointError(f"{path}: vocabulary hash {meta.get('vocab_hash')} does not match "
                                  f"{expect_vocab_hash}")
        arrays = {}
        for name in meta["tensors"]:
            with zf.open(f"tensors/{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return arrays, meta
