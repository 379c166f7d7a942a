"""Raw ``DSTN`` tensor files, named-tensor checkpoints and binary PGM images.

DSTN layout: the 4 magic bytes ``DSTN``, a little-endian u32 rank, ``rank``
u32 extents, then the row-major little-endian f32 payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"DSTN"


class FormatError(ValueError):
    pass


def write_dstn(f: BinaryIO, array: np.ndarray) -> int:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    f.write(header)
    f.write(arr.tobytes())
    return len(header) + arr.nbytes


def read_dstn(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_dstn(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_dstn(f)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Write ``path`` (concatenated DSTN blobs) and ``path.manifest``.

    Manifest lines: ``tensor <name> <offset> <extents...>`` for every blob and
    ``meta <key> <value>`` for free-form settings such as the model config.
    """
    path = Path(path)
    lines = []
    buf = io.BytesIO()
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        offset = buf.tell()
        write_dstn(buf, arr)
        lines.append(" ".join(["tensor", name, str(offset)] + [str(s) for s in np.shape(arr)]))
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    path.write_bytes(buf.getvalue())
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    manifest = Path(str(path) + ".manifest")
    if not path.exists() or not manifest.exists():
        raise FileNotFoundError(f"checkpoint {path} or its manifest is missing")
    blob = path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "tensor":
            parts = rest.split()
            name, offset = parts[0], int(parts[1])
            arr = read_dstn(io.BytesIO(blob[offset:]))
            if tuple(arr.shape) != tuple(int(s) for s in parts[2:]):
                raise FormatError(f"manifest shape of {name} disagrees with blob")
            tensors[name] = arr
        elif kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        else:
            raise FormatError(f"unknown manifest line: {line!r}")
    return tensors, meta


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greymap, maxval 255. Float input is taken to lie in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 greymap (maxval <= 255) as uint8."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()
