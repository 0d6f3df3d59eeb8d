"""Flat binary array container, PGM images, and small CSV helpers.

The container format is a single file: 4-byte magic ``SDN1``, a uint32
little-endian header length, a UTF-8 JSON header, then the raw array bytes.
The header records dtype (always little-endian), shape, and a free-form
``meta`` object (model metadata, provenance, format version).
"""

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"SDN1"
FORMAT_VERSION = 1


def save_array(path, arr, meta=None):
    """Write one array to the flat binary container."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
        "shape": list(arr.shape),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(arr.tobytes())


def load_array(path):
    """Read (array, meta) from the flat binary container."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, not an SDN1 container")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise DataFormatError(f"{path}: truncated header length")
        (hlen,) = np.frombuffer(raw_len, dtype="<u4")
        blob = fh.read(int(hlen))
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: unreadable JSON header: {exc}") from exc
        dtype = np.dtype(header["dtype"])
        shape = tuple(header["shape"])
        data = fh.read()
    expected = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(data)} bytes, header promises {expected}"
        )
    arr = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return arr, header.get("meta", {})


def write_pgm(path, image):
    """Write a [0, 1] float image as binary 8-bit PGM (P5)."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Read a binary 8-bit PGM into a float image in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    # header = magic, width, height, maxval; whitespace/comment separated
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise DataFormatError(f"{path}: expected binary PGM (P5), got {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric PGM header field") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pixels = np.frombuffer(data[pos : pos + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise DataFormatError(f"{path}: pixel payload truncated")
    return pixels.reshape(height, width).astype(float) / 255.0


def write_csv(path, header, rows):
    """Write a UTF-8 CSV with a header row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    """Read a CSV written by :func:`write_csv`; returns (header, rows)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise DataFormatError(f"{path}: empty CSV")
    return rows[0], rows[1:]
