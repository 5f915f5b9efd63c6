"""Atomic file output, run manifests and the on-disk sample formats."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OUT_DIR_ENV = "SYMBRIDGE_OUT_DIR"
THREADS_ENV = "SYMBRIDGE_THREADS"


def package_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write ``data`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int | None = 2) -> str:
    return json.dumps(obj, indent=indent, default=_default, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dumps(obj))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def write_jsonl(path, records: Iterable[dict]) -> Path:
    return atomic_write_text(path, "".join(dumps(r, indent=None) for r in records))


def dump_paths(path, paths: np.ndarray, extra: dict | None = None) -> tuple[Path, Path]:
    """Flat little-endian float64 dump of an array plus a JSON sidecar with its shape."""
    arr = np.ascontiguousarray(paths, dtype="<f8")
    data = atomic_write_bytes(path, arr.tobytes())
    sidecar = {"dtype": "<f8", "shape": list(arr.shape), "order": "C"}
    if extra:
        sidecar.update(extra)
    side = write_json(Path(str(path) + ".json"), sidecar)
    return data, side


def load_paths(path) -> np.ndarray:
    meta = json.loads(Path(str(path) + ".json").read_text())
    return np.fromfile(path, dtype=meta["dtype"]).reshape(meta["shape"])


def write_manifest(out_dir, command: str, config: dict, files: Sequence) -> Path:
    """Manifest echoing the resolved config; the only output carrying a timestamp."""
    manifest = {
        "command": command,
        "version": package_version(),
        "created": datetime.now(timezone.utc).isoformat(),
        "config": config,
        "files": [str(Path(f).name) for f in files],
    }
    return write_json(Path(out_dir) / "manifest.json", manifest)
