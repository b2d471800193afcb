"""On-disk formats: grid CSV / DGRD binary, annotation JSON, PGM dumps, checkpoints."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grid import PointAnnotations
from .ot import CostKind

MAGIC = b"DGRD"
_HEADER = struct.Struct("<4sII")


def write_grid_csv(path, values) -> None:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    with open(path, "w") as fh:
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid_csv(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty grid")
    out = [[float(v) for v in r.split(",")] for r in rows]
    if len({len(r) for r in out}) != 1:
        raise ValueError(f"{path}: ragged rows")
    return np.array(out)


def encode_grid(values) -> bytes:
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("binary grids are 2-D")
    h, w = values.shape
    return _HEADER.pack(MAGIC, w, h) + np.ascontiguousarray(values).tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("truncated grid header")
    magic, w, h = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    body = buf[_HEADER.size:]
    if len(body) != 8 * w * h:
        raise ValueError(f"expected {w}x{h} values, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def write_grid_bin(path, values) -> None:
    Path(path).write_bytes(encode_grid(values))


def read_grid_bin(path) -> np.ndarray:
    return decode_grid(Path(path).read_bytes())


def read_grid(path) -> np.ndarray:
    """Binary if the file starts with the magic, CSV otherwise."""
    raw = Path(path).read_bytes()
    if raw[:4] == MAGIC:
        return decode_grid(raw)
    return read_grid_csv(path)


def annotations_to_json(ann: PointAnnotations) -> dict:
    return {"width": int(ann.width), "height": int(ann.height), "points": ann.points.tolist()}


def annotations_from_json(obj: dict) -> PointAnnotations:
    pts = np.asarray(obj["points"], dtype=np.float64).reshape(-1, 2)
    return PointAnnotations(int(obj["width"]), int(obj["height"]), pts)


def write_annotations(path, ann: PointAnnotations) -> None:
    Path(path).write_text(json.dumps(annotations_to_json(ann)) + "\n")


def read_annotations(path) -> PointAnnotations:
    return annotations_from_json(json.loads(Path(path).read_text()))


def write_pgm(path, values) -> dict:
    """8-bit binary PGM (P5), min-max scaled.  Returns the scale for the manifest."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros(values.shape) if span == 0 else (values - lo) / span
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    return {"min": lo, "max": hi}


def read_pgm(path) -> np.ndarray:
    # header exactly as write_pgm emits it: three newline-terminated lines
    magic, dims, _, body = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)


def save_checkpoint(directory, params: dict, meta: dict) -> Path:
    """One DGRD file per weight (flattened to 2-D) plus ``manifest.json`` with shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, w in params.items():
        w = np.asarray(w, dtype=np.float64)
        shapes[name] = list(w.shape)
        write_grid_bin(d / f"{name}.dgrd", w.reshape(1, -1))
    manifest = {**meta, "shapes": shapes}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d / "manifest.json"


def load_checkpoint(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {name: read_grid_bin(d / f"{name}.dgrd").reshape(shape)
              for name, shape in manifest["shapes"].items()}
    return params, manifest


def read_instance(path) -> dict:
    """OT instance JSON: {"mu", "nu", "src", "dst", "cost"}; masses normalised on read."""
    obj = json.loads(Path(path).read_text())
    mu = np.asarray(obj["mu"], dtype=np.float64)
    nu = np.asarray(obj["nu"], dtype=np.float64)
    src = np.asarray(obj["src"], dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(obj["dst"], dtype=np.float64).reshape(-1, 2)
    if len(mu) != len(src) or len(nu) != len(dst):
        raise ValueError("mass and location counts differ")
    if not (mu.sum() > 0 and nu.sum() > 0):
        raise ValueError("instance has zero total mass")
    return {"mu": mu / mu.sum(), "nu": nu / nu.sum(), "src": src, "dst": dst,
            "cost": CostKind.parse(obj.get("cost", "l2"))}


def write_instance(path, mu, nu, src, dst, cost="l2") -> None:
    obj = {"mu": list(map(float, mu)), "nu": list(map(float, nu)),
           "src": np.asarray(src, float).tolist(), "dst": np.asarray(dst, float).tolist(), "cost": cost}
    Path(path).write_text(json.dumps(obj) + "\n")
