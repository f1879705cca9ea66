"""File formats: the EPTENSR1 tensor container, checkpoint directories, and
8-bit PGM frame I/O.

EPTENSR1 layout (all integers little-endian):

    bytes 0..7   magic ``EPTENSR1``
    bytes 8..11  u32 rank
    next rank*8  u64 extents
    next 1       u8 dtype tag: 0 = float32, 1 = float64, 2 = uint16
    rest         raw element payload, C order, little-endian

A checkpoint is a directory holding one ``<name>.ept`` container per tensor
plus a ``manifest.txt`` of sorted ``key = value`` lines describing the run
(format version, step, seed, config echo, tensor listing).  Loading verifies
that every tensor named by the manifest is present and well-formed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPTENSR1"

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_DTYPE_TO_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                 np.dtype("uint16"): 2}


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_TAG:
        raise TypeError(f"unsupported dtype {arr.dtype}; the container holds "
                        f"float32, float64, or uint16")
    tag = _DTYPE_TO_TAG[arr.dtype]
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for ext in arr.shape:
            f.write(struct.pack("<Q", ext))
        f.write(struct.pack("<B", tag))
        f.write(np.ascontiguousarray(le).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:8]!r}, expected {MAGIC!r}")
    off = 8
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank > 32:
        raise ValueError(f"{path}: implausible rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", blob, off)
    off += 1
    if tag not in _TAG_TO_DTYPE:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dtype = _TAG_TO_DTYPE[tag]
    count = int(np.prod(shape)) if rank else 1
    expected = count * dtype.itemsize
    payload = blob[off:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected "
                         f"{expected} for shape {shape} {dtype}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


# -- checkpoints --------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
FORMAT_VERSION = "1"


def save_checkpoint(dirpath, tensors: dict[str, np.ndarray],
                    meta: dict[str, str]) -> None:
    """Write tensors and a sorted-key manifest; deterministic byte-for-byte."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in tensors.items():
        if "/" in name or name.startswith("."):
            raise ValueError(f"bad tensor name {name!r}")
        write_tensor(d / f"{name}.ept", arr)
    lines = [f"format_version = {FORMAT_VERSION}"]
    for k in sorted(meta):
        v = str(meta[k])
        if "\n" in v:
            raise ValueError(f"manifest value for {k!r} contains a newline")
        lines.append(f"{k} = {v}")
    for name in sorted(tensors):
        lines.append(f"tensor = {name}")
    (d / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_checkpoint(dirpath) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(dirpath)
    mpath = d / MANIFEST_NAME
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {mpath}")
    meta: dict[str, str] = {}
    names: list[str] = []
    for lineno, line in enumerate(mpath.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{mpath}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        k, v = k.strip(), v.strip()
        if k == "tensor":
            names.append(v)
        else:
            meta[k] = v
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: format_version "
                         f"{meta.get('format_version')!r} unsupported")
    tensors = {}
    for name in names:
        p = d / f"{name}.ept"
        if not p.exists():
            raise FileNotFoundError(f"checkpoint tensor missing: {p}")
        tensors[name] = read_tensor(p)
    return tensors, meta


# -- PGM frames ---------------------------------------------------------------


def write_pgm(path, frame: np.ndarray) -> None:
    """Write one grayscale frame in binary PGM (P5), maxval 255.

    Values are expected in [0, 1] and are quantized as round(255 * v).
    """
    frame = np.asarray(frame)
    if frame.ndim == 3 and frame.shape[-1] == 1:
        frame = frame[..., 0]
    if frame.ndim != 2:
        raise ValueError(f"PGM frames are 2-D grayscale, got shape {frame.shape}")
    if frame.min() < -1e-6 or frame.max() > 1 + 1e-6:
        raise ValueError(f"frame values outside [0, 1]: min {frame.min():.4f} "
                         f"max {frame.max():.4f}")
    q = np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM frame back to float32 in [0, 1], shape (H, W, 1)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval; comments (#) allowed between tokens
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported, expected 255")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=i)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated payload")
    frame = (data.reshape(h, w).astype(np.float32) / 255.0)[..., None]
    return frame


def write_clip_pgm(dirpath, clip: np.ndarray) -> list[Path]:
    """Write a (T, H, W, 1) clip as frame_0000.pgm .. frame_NNNN.pgm."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(clip.shape[0]):
        p = d / f"frame_{t:04d}.pgm"
        write_pgm(p, clip[t])
        paths.append(p)
    return paths


def read_clip_pgm(dirpath) -> np.ndarray:
    d = Path(dirpath)
    files = sorted(d.glob("frame_*.pgm"))
    if not files:
        raise FileNotFoundError(f"no frame_*.pgm files under {d}")
    return np.stack([read_pgm(p) for p in files], axis=0)
