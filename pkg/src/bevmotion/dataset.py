"""On-disk sequence format.

A sequence directory holds ``manifest.json`` (scene spec, grid spec, version,
per-frame file names and CRC32 checksums) and one ``frame_NNNN.bin`` blob per
frame::

    magic   4s   b"BVMF"
    index   u32
    count   u32
    pose    12 x f64   rotation (row-major) then translation
    xyz     count x 3 x f32
    label   count x i16

All numbers are little-endian.  A dataset is either one sequence directory or
a directory of them (``seq_000``, ``seq_001``, ...).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DatasetError, TruncatedFileError, VersionError
from .geometry import GridSpec, PointFrame, Pose
from .synth import LabeledSequence, SceneSpec

FORMAT_NAME = "bevmotion-sequence"
FORMAT_VERSION = (1, 0)
MANIFEST = "manifest.json"
_BLOB_MAGIC = b"BVMF"
_BLOB_HEADER = struct.Struct("<4sII12d")


def _encode_frame(index: int, frame: PointFrame, labels: np.ndarray) -> bytes:
    header = _BLOB_HEADER.pack(_BLOB_MAGIC, index, len(frame), *frame.pose.as_array())
    xyz = frame.points.astype("<f4").tobytes()
    lab = np.asarray(labels, dtype="<i2").tobytes()
    return header + xyz + lab


def _decode_frame(raw: bytes, name: str, timestamp: float) -> tuple[int, PointFrame, np.ndarray]:
    if len(raw) < _BLOB_HEADER.size:
        raise TruncatedFileError(f"{name}: shorter than the frame header")
    magic, index, count, *pose = _BLOB_HEADER.unpack_from(raw)
    if magic != _BLOB_MAGIC:
        raise DatasetError(f"{name}: bad magic {magic!r}")
    expected = _BLOB_HEADER.size + count * 12 + count * 2
    if len(raw) != expected:
        raise TruncatedFileError(f"{name}: expected {expected} bytes, found {len(raw)}")
    off = _BLOB_HEADER.size
    xyz = np.frombuffer(raw, dtype="<f4", count=3 * count, offset=off).reshape(count, 3)
    lab = np.frombuffer(raw, dtype="<i2", count=count, offset=off + 12 * count)
    frame = PointFrame(xyz.astype(np.float64), timestamp, Pose.from_array(pose))
    return index, frame, lab.astype(np.int16)


def write_dataset(seq: LabeledSequence, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (frame, labels) in enumerate(zip(seq.frames, seq.labels)):
        blob = _encode_frame(k, frame, labels)
        name = f"frame_{k:04d}.bin"
        (root / name).write_bytes(blob)
        entries.append(
            {"index": k, "file": name, "timestamp": frame.timestamp, "points": len(frame),
             "bytes": len(blob), "crc32": zlib.crc32(blob)}
        )
    manifest = {
        "format": FORMAT_NAME,
        "version": f"{FORMAT_VERSION[0]}.{FORMAT_VERSION[1]}",
        "scene": seq.spec.to_dict(),
        "grid": seq.grid.to_dict(),
        "frame_count": len(seq.frames),
        "mover_steps": seq.mover_steps.tolist(),
        "frames": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _read_manifest(root: Path) -> dict:
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no {MANIFEST} in {root}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable manifest in {root}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetError(f"{root}: not a {FORMAT_NAME} manifest")
    try:
        major, minor = (int(x) for x in str(manifest["version"]).split("."))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{root}: malformed version field") from exc
    if major != FORMAT_VERSION[0]:
        raise VersionError(f"{root}: format version {major}.{minor}, this reader handles {FORMAT_VERSION[0]}.x")
    return manifest


def read_dataset(path) -> LabeledSequence:
    root = Path(path)
    manifest = _read_manifest(root)
    frames, labels = [], []
    for entry in manifest["frames"]:
        name = entry["file"]
        try:
            raw = (root / name).read_bytes()
        except OSError as exc:
            raise DatasetError(f"cannot read {root / name}: {exc}") from exc
        if len(raw) != entry["bytes"]:
            raise TruncatedFileError(f"{name}: manifest says {entry['bytes']} bytes, found {len(raw)}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"{name}: CRC32 mismatch")
        index, frame, lab = _decode_frame(raw, name, float(entry["timestamp"]))
        if index != entry["index"]:
            raise DatasetError(f"{name}: header index {index} != manifest index {entry['index']}")
        frames.append(frame)
        labels.append(lab)
    if len(frames) != manifest["frame_count"]:
        raise TruncatedFileError(f"{root}: manifest lists {len(frames)} of {manifest['frame_count']} frames")
    grid = manifest["grid"]
    return LabeledSequence(
        frames,
        labels,
        np.asarray(manifest["mover_steps"], dtype=np.float64).reshape(-1, 2),
        SceneSpec.from_dict(manifest["scene"]),
        GridSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in grid.items()}),
    )


def write_collection(seqs, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(seqs):
        write_dataset(seq, root / f"seq_{i:03d}")
    return root


def read_collection(path) -> list:
    """Load a single sequence directory or every ``seq_*`` child of ``path``."""
    root = Path(path)
    if not root.exists():
        raise DatasetError(f"dataset path {root} does not exist")
    if (root / MANIFEST).exists():
        return [read_dataset(root)]
    children = sorted(p for p in root.iterdir() if p.is_dir() and (p / MANIFEST).exists())
    if not children:
        raise DatasetError(f"{root} contains no sequences")
    return [read_dataset(p) for p in children]


def sequences_equal(a: LabeledSequence, b: LabeledSequence) -> bool:
    if a.spec != b.spec or a.grid != b.grid or len(a) != len(b):
        return False
    if not np.array_equal(a.mover_steps, b.mover_steps):
        return False
    for fa, fb, la, lb in zip(a.frames, b.frames, a.labels, b.labels):
        if fa.timestamp != fb.timestamp or not np.array_equal(fa.points, fb.points):
            return False
        if not np.array_equal(fa.pose.as_array(), fb.pose.as_array()) or not np.array_equal(la, lb):
            return False
    return True
