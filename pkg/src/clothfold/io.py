"""File formats: graph lines, headered binary arrays, JSON models, delimited trajectories, images."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import Edge, SpatioTemporalGraph, Vertex

ARRAY_MAGIC = b"CFA1"
_HEADER = struct.Struct("<4sIII")  # magic, width, height, channels -> 16 bytes


# ---------------------------------------------------------------- graphs

def graph_to_line(g: SpatioTemporalGraph) -> str:
    record = {
        "time_index": int(g.time_index),
        "vertices": [[v.id, v.kind.value, *v.position] for v in g.vertices],
        "edges": [[e.i, e.j, e.weight] for e in g.edges],
    }
    return json.dumps(record, separators=(",", ":"))


def graph_from_line(line: str) -> SpatioTemporalGraph:
    rec = json.loads(line)
    verts = [Vertex(int(v[0]), v[1], (v[2], v[3], v[4])) for v in rec["vertices"]]
    edges = [Edge(int(e[0]), int(e[1]), e[2]) for e in rec["edges"]]
    return SpatioTemporalGraph(int(rec["time_index"]), verts, edges)


def save_graphs(path: str | Path, graphs: Iterable[SpatioTemporalGraph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(graph_to_line(g) + "\n")


def load_graphs(path: str | Path) -> list[SpatioTemporalGraph]:
    with open(path, encoding="utf-8") as fh:
        return [graph_from_line(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- arrays

def array_to_bytes(arr: np.ndarray) -> bytes:
    """Pack an (h, w) or (h, w, c) float array behind a 16-byte header."""
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
    h, w, c = arr.shape
    return _HEADER.pack(ARRAY_MAGIC, w, h, c) + np.ascontiguousarray(arr).tobytes()


def array_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("buffer shorter than the array header")
    magic, w, h, c = _HEADER.unpack_from(buf)
    if magic != ARRAY_MAGIC:
        raise ValueError(f"bad array magic {magic!r}")
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size)
    if body.size != w * h * c:
        raise ValueError(f"array body has {body.size} values, header says {w}x{h}x{c}")
    arr = body.reshape(h, w, c).astype(float)
    return arr[..., 0] if c == 1 else arr


def save_array(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(array_to_bytes(arr))


def load_array(path: str | Path) -> np.ndarray:
    return array_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- structured text

def _plain(obj):
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_model(path: str | Path, kind: str, fields: dict) -> None:
    """Write a model record. Floats use the shortest repr that round-trips exactly."""
    record = {"kind": kind, **_plain(fields)}
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path, kind: str | None = None) -> dict:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if kind is not None and record.get("kind") != kind:
        raise ValueError(f"{path}: expected model kind {kind!r}, found {record.get('kind')!r}")
    return record


# ---------------------------------------------------------------- delimited text

def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def read_rows(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) if v != "" else np.nan for v in r] for r in body], dtype=float)
    return header, data.reshape(len(body), len(header))


# ---------------------------------------------------------------- images

def save_image(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    arr = np.rint(arr * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path: str | Path, grayscale: bool = False) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if grayscale else "RGB")
        return np.asarray(im, dtype=float) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    return load_image(path, grayscale=True) >= 0.5
