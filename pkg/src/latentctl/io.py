"""File formats: binary dataset recordings and JSON documents.

Dataset files are little-endian binary: a fixed header (magic "SCRD",
version, image size, sample rate, channel count, sequence count, rest
actuation, rest frame) followed by one length-prefixed block of structured
records per sequence (time f64, u_cmd 4×f64, p_act 4×f64, pixels H·W×f32).

Checkpoints, waypoint exports, and run reports are JSON documents. Floats are
written with Python's shortest round-trip repr, so read(write(x)) == x holds
bit-exactly for float64 (and for float32 payloads, which embed exactly into
float64).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .plant import Dataset, Sequence
from .validation import FormatError

DATASET_MAGIC = b"SCRD"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
WAYPOINTS_VERSION = 1
REPORT_VERSION = 1

_HEADER = struct.Struct("<4sIIIdII")     # magic, version, H, W, rate, channels, n_seq


def _record_dtype(h: int, w: int, channels: int) -> np.dtype:
    return np.dtype([("time", "<f8"), ("u_cmd", "<f8", (channels,)),
                     ("p_act", "<f8", (channels,)), ("pixels", "<f4", (h * w,))])


def save_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    channels = 4
    rec = _record_dtype(ds.img_h, ds.img_w, channels)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.img_h, ds.img_w,
                             float(ds.rate_hz), channels, len(ds.sequences)))
        f.write(np.asarray(ds.u_rest, dtype="<f8").tobytes())
        f.write(np.asarray(ds.o_rest, dtype="<f4").tobytes())
        for seq in ds.sequences:
            n = len(seq)
            arr = np.empty(n, dtype=rec)
            arr["time"] = seq.time
            arr["u_cmd"] = seq.u_cmd
            arr["p_act"] = seq.p_act
            arr["pixels"] = seq.pixels
            f.write(struct.pack("<I", n))
            f.write(arr.tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, h, w, rate, channels, n_seq = _HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: dataset version {version}, "
                              f"expected {DATASET_VERSION}")
        u_rest = np.frombuffer(f.read(8 * channels), dtype="<f8").copy()
        o_rest = np.frombuffer(f.read(4 * h * w), dtype="<f4").copy()
        rec = _record_dtype(h, w, channels)
        sequences = []
        for _ in range(n_seq):
            raw = f.read(4)
            if len(raw) < 4:
                raise FormatError(f"{path}: truncated sequence header")
            (n,) = struct.unpack("<I", raw)
            buf = f.read(n * rec.itemsize)
            if len(buf) < n * rec.itemsize:
                raise FormatError(f"{path}: truncated sequence data")
            arr = np.frombuffer(buf, dtype=rec)
            sequences.append(Sequence(
                time=arr["time"].copy(), u_cmd=arr["u_cmd"].copy(),
                p_act=arr["p_act"].copy(), pixels=arr["pixels"].copy()))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last sequence")
    return Dataset(sequences=sequences, o_rest=o_rest, u_rest=u_rest,
                   rate_hz=rate, img_h=h, img_w=w)


def _to_jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def dumps_doc(kind: str, version: int, body: dict) -> str:
    """Serialize a document to its canonical file text (the exact bytes
    _save_doc writes), so off-disk consumers can match files byte for byte."""
    doc = {"format": kind, "version": version}
    doc.update(_to_jsonable(body))
    return json.dumps(doc, separators=(",", ":")) + "\n"


def _save_doc(path, kind: str, version: int, body: dict) -> None:
    with open(path, "w") as f:
        f.write(dumps_doc(kind, version, body))


def _load_doc(path, kind: str, version: int) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{kind} file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not valid structured text: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != kind:
        raise FormatError(f"{path}: not a {kind} document")
    if doc.get("version") != version:
        raise FormatError(f"{path}: {kind} version {doc.get('version')}, "
                          f"expected {version}")
    return doc


def save_checkpoint(path, doc: dict) -> None:
    _save_doc(path, "checkpoint", CHECKPOINT_VERSION, doc)

def load_checkpoint_doc(path) -> dict:
    return _load_doc(path, "checkpoint", CHECKPOINT_VERSION)

def save_waypoints(path, doc: dict) -> None:
    _save_doc(path, "waypoints", WAYPOINTS_VERSION, doc)

def load_waypoints(path) -> dict:
    return _load_doc(path, "waypoints", WAYPOINTS_VERSION)

def save_report(path, doc: dict) -> None:
    _save_doc(path, "report", REPORT_VERSION, doc)

def load_report(path) -> dict:
    return _load_doc(path, "report", REPORT_VERSION)
