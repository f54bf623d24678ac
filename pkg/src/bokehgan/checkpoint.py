"""Single-file checkpoint archives.

An archive is an ``.npz`` mapping layer-path strings to raw arrays, plus a
JSON header stored under ``__header__``.  Writes go to a temporary file
in the same directory and are renamed into place, so an interrupted or
failed write never clobbers an existing checkpoint.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT = "bokehgan-checkpoint"
VERSION = 1
HEADER_KEY = "__header__"


class CheckpointError(RuntimeError):
    pass


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, **header}
    payload = dict(arrays)
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)

    buf = io.BytesIO()
    np.savez(buf, **payload)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getbuffer())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint archive: {exc}") from exc
    raw = arrays.pop(HEADER_KEY, None)
    if raw is None:
        raise CheckpointError(f"{path} has no header")
    header = json.loads(raw.tobytes().decode())
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format {header.get('format')!r}")
    return arrays, header


def prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sub-mapping of ``arrays`` under ``prefix/`` with the prefix stripped."""
    p = prefix + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
