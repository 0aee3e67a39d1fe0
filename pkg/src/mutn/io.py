"""File formats: the MUTN tensor container, flat config files, and CSVs.

Container layout (all integers little-endian):

    magic   4 bytes  b"MUTN"
    version u32
    meta    u64 length + UTF-8 text (config echo / provenance)
    count   u64 number of entries
    table   per entry: u64 name length, UTF-8 name, u32 dtype code
            (0=float32, 1=float64, 2=int64), u64 rank, u64 dims[rank]
    payload raw little-endian tensor bytes, concatenated in table order

Config files are flat UTF-8 text, one `section.key = value` per line with
`#` comments; values parse as int, float, true/false, or bare string.
CSV outputs start with a `#`-prefixed header block (version, config hash,
seed) so every artifact carries its provenance.
"""

from __future__ import annotations

import hashlib
import io as _io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MUTN"
CONTAINER_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for malformed container or config inputs."""


def save_tensors(path, tensors: dict, metadata: str = "") -> None:
    """Write named arrays to a MUTN container file."""
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            if np.issubdtype(arr.dtype, np.floating):
                dt = np.dtype("<f8")
            elif np.issubdtype(arr.dtype, np.integer):
                dt = np.dtype("<i8")
            else:
                raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        entries.append((name, np.ascontiguousarray(arr, dtype=dt)))

    buf = _io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CONTAINER_VERSION))
    meta = metadata.encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<Q", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", _DTYPE_CODES[arr.dtype]))
        buf.write(struct.pack("<Q", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
    for _, arr in entries:
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensors(path):
    """Read a MUTN container; returns (dict of arrays, metadata string)."""
    raw = Path(path).read_bytes()
    buf = _io.BytesIO(raw)

    def take(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise FormatError(f"truncated container: {path}")
        return struct.unpack(fmt, chunk)[0]

    if buf.read(4) != MAGIC:
        raise FormatError(f"bad magic bytes in {path}")
    version = take("<I")
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    meta = buf.read(take("<Q")).decode("utf-8")
    count = take("<Q")
    table = []
    for _ in range(count):
        name = buf.read(take("<Q")).decode("utf-8")
        code = take("<I")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} in {path}")
        rank = take("<Q")
        dims = tuple(take("<Q") for _ in range(rank))
        table.append((name, _CODE_DTYPES[code], dims))
    out = {}
    for name, dtype, dims in table:
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = buf.read(n * dtype.itemsize)
        if len(data) != n * dtype.itemsize:
            raise FormatError(f"truncated payload for {name!r} in {path}")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    return out, meta


# ---------------------------------------------------------------------------
# config files


def _parse_value(text: str):
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config(text: str) -> dict:
    """Parse `section.key = value` lines into a flat dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or "." not in key:
            raise FormatError(f"line {lineno}: key must look like section.key, got {key!r}")
        out[key] = _parse_value(value)
    return out


def parse_config_file(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: dict) -> str:
    """Canonical text form: sorted `key = value` lines."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical text form (first 16 hex chars)."""
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# CSV artifacts


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def write_csv(path, fieldnames, rows, version: str, cfg_hash: str, seed: int) -> None:
    """Write rows (sequences or dicts) with a provenance header block."""
    lines = [f"# version = {version}",
             f"# config_hash = {cfg_hash}",
             f"# seed = {seed}",
             ",".join(fieldnames)]
    for row in rows:
        if isinstance(row, dict):
            row = [row[k] for k in fieldnames]
        lines.append(",".join(_fmt_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path):
    """Read a header-block CSV; returns (header dict, list of row dicts)."""
    header = {}
    rows = []
    fields = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
        elif fields is None:
            fields = line.split(",")
        elif line:
            rows.append(dict(zip(fields, (_parse_value(c) for c in line.split(",")))))
    return header, rows
