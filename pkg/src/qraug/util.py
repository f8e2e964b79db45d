"""Utility helpers for qraug.

Seeded random generators, JSON-lines files and the parameter checkpoint
container. Everything written here uses sorted keys so that reruns with the
same seed produce byte-identical files.
"""

import gzip
import json
from collections.abc import Iterable, Iterator, Mapping
from pathlib import Path
from typing import IO, Any

import numpy as np

__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "make_rng",
    "dumps",
    "read_jsonl",
    "write_jsonl",
    "JsonlWriter",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "qraug-checkpoint"  #: Value of the "format" field
CHECKPOINT_VERSION = 1  #: Bumped on incompatible layout changes


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Create the numpy generator used for every seeded operation."""
    return np.random.default_rng(seed)


def dumps(obj: Any) -> str:
    """Serialize to compact JSON with sorted keys."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(", ", ": "))


def _open(path: Path, mode: str) -> IO[str]:
    path = Path(path)
    if path.suffix == ".gz":
        if "w" in mode:
            # no file name and mtime=0 keep the gzip header byte-stable
            fh = open(path, "wb")
            return _TextWrapper(gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0), fh)
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n")


class _TextWrapper:
    def __init__(self, raw: gzip.GzipFile, fh: IO[bytes]) -> None:
        self._raw = raw
        self._fh = fh

    def write(self, text: str) -> None:
        self._raw.write(text.encode("utf-8"))

    def close(self) -> None:
        self._raw.close()
        self._fh.close()

    def __enter__(self) -> "_TextWrapper":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` for every non-blank line.

    Raises:
        ValueError: If a line is not a JSON object.
    """
    with _open(Path(path), "r") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, record


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> int:
    """Write records one per line, returning the count written."""
    n = 0
    with JsonlWriter(path) as w:
        for record in records:
            w.write(record)
            n += 1
    return n


class JsonlWriter:
    """Append-only JSON-lines writer used for datasets and metrics logs."""

    __slots__ = ("_f", "path")

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = _open(self.path, "w")

    def write(self, record: Mapping) -> None:
        self._f.write(dumps(dict(record)) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    *,
    kind: str,
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write parameters as ``name -> {shape, values}`` in a JSON container.

    Values are stored at the arrays' own precision: float32 values are
    written as the exact decimal of the float32 number, so loading them back
    into float32 is lossless.
    """
    dtypes = {str(a.dtype) for a in params.values()}
    if len(dtypes) > 1:
        raise ValueError(f"mixed parameter dtypes: {sorted(dtypes)}")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "dtype": dtypes.pop() if dtypes else "float64",
        "meta": dict(meta or {}),
        "params": {
            name: {"shape": list(a.shape), "values": [float(x) for x in np.ravel(a)]}
            for name, a in params.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "w") as f:
        f.write(json.dumps(doc, sort_keys=True))


def load_checkpoint(
    path: str | Path, kind: str | None = None
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint written by save_checkpoint().

    Returns:
        Tuple of (parameter arrays by name, metadata).

    Raises:
        ValueError: If the file is not a checkpoint, the version differs, the
            kind does not match, or a value count disagrees with its shape.
    """
    with _open(Path(path), "r") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not a checkpoint ({e.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {doc.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, got {doc.get('kind')}")
    dtype = np.dtype(doc["dtype"])
    params = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=dtype)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"{path}: parameter {name} has {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
    return params, doc["meta"]
