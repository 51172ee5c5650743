"""Tensor interchange and activation-dump bundles.

Tensors travel as NPY version 1.0 files: magic b"\\x93NUMPY", version bytes
1.0, a little-endian uint16 header length, then an ASCII dict header with
exactly the keys descr / fortran_order / shape, space-padded so the data
payload starts on a 64-byte boundary. Only little-endian float32 ("<f4") and
float64 ("<f8") in C order are accepted. The writer and reader round-trip
bit-exactly and interoperate with any standard NPY implementation.

A dump bundle is a directory holding one NPY file per captured (layer, step,
Q/K/V) tensor plus a manifest.json describing the segment layout, head
geometry, dtype, and producer. Loading validates the whole manifest eagerly:
every referenced file must exist, parse, and match the declared shape and
dtype, with errors naming the offending entry.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import SegmentLayout
from .errors import GragError
from .numerics import Tensor

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64
BUNDLE_SCHEMA_VERSION = 1
TENSOR_NAMES = ("Q", "K", "V")

_DESCR_TO_DTYPE = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_DTYPE_TO_DESCR = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


class InterchangeError(GragError):
    """A tensor file violates the interchange format."""


class HeaderError(InterchangeError):
    """The NPY magic, version, or header dict is malformed or unsupported."""


class PayloadError(InterchangeError):
    """The data payload does not match the size the header declares."""


class BundleError(GragError):
    """A dump-bundle manifest is inconsistent with the files on disk."""


def write_tensor(path, t: Tensor) -> None:
    """Write a tensor as NPY 1.0 (C order, little-endian float32/float64)."""
    path = Path(path)
    arr = t.array
    descr = _DTYPE_TO_DESCR[arr.dtype]
    shape = ", ".join(str(s) for s in arr.shape)
    if arr.ndim == 1:
        shape += ","
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': ({shape}), }}"
    prefix_len = len(MAGIC) + 2 + 2  # magic + version + header-length field
    padded = -(prefix_len + len(header) + 1) % HEADER_ALIGN
    header = header + " " * padded + "\n"
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(b"\x01\x00")
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("latin-1"))
        f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _parse_header(raw: bytes, path: Path) -> tuple[np.dtype, tuple[int, ...], int]:
    """Parse magic through header dict; returns (dtype, shape, data offset)."""
    if len(raw) < len(MAGIC) + 4:
        raise HeaderError(f"{path}: file truncated before NPY header")
    if raw[: len(MAGIC)] != MAGIC:
        raise HeaderError(f"{path}: bad magic bytes {raw[:len(MAGIC)]!r}, not an NPY file")
    major, minor = raw[len(MAGIC)], raw[len(MAGIC) + 1]
    if (major, minor) != (1, 0):
        raise HeaderError(f"{path}: unsupported NPY version {major}.{minor}, expected 1.0")
    (hlen,) = struct.unpack("<H", raw[len(MAGIC) + 2 : len(MAGIC) + 4])
    offset = len(MAGIC) + 4 + hlen
    if len(raw) < offset:
        raise HeaderError(f"{path}: file truncated inside header (declared {hlen} bytes)")
    try:
        header = ast.literal_eval(raw[len(MAGIC) + 4 : offset].decode("latin-1"))
    except (ValueError, SyntaxError) as exc:
        raise HeaderError(f"{path}: header is not a valid dict literal: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise HeaderError(f"{path}: header must have exactly descr/fortran_order/shape keys")
    descr = header["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise HeaderError(f"{path}: unsupported descr {descr!r}; expected '<f4' or '<f8'")
    if header["fortran_order"] is not False:
        raise HeaderError(f"{path}: fortran_order must be False (C order only)")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise HeaderError(f"{path}: shape must be a tuple of positive ints, got {shape!r}")
    return _DESCR_TO_DTYPE[descr], shape, offset


def read_tensor_header(path) -> tuple[str, tuple[int, ...]]:
    """Dtype name and shape from the header alone, without reading the data."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read(len(MAGIC) + 4)
        if len(raw) >= len(MAGIC) + 4:
            (hlen,) = struct.unpack("<H", raw[len(MAGIC) + 2 : len(MAGIC) + 4])
            raw += f.read(hlen)
    dtype, shape, _ = _parse_header(raw, path)
    return np.dtype(dtype).name, shape

def read_tensor(path) -> Tensor:
    """Read an NPY 1.0 file; raises FileNotFoundError, HeaderError, or
    PayloadError with the offending path."""
    path = Path(path)
    raw = path.read_bytes()
    dtype, shape, offset = _parse_header(raw, path)
    expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise PayloadError(f"{path}: expected {expected} data bytes for shape {shape}, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Tensor._wrap(arr.astype(arr.dtype.newbyteorder("="), copy=True))


@dataclass(frozen=True)
class DumpBundle:
    """A validated directory of captured Q/K/V tensors.

    entries maps (layer, step, name) to the tensor file path; metadata records
    the joint-sequence layout, head geometry, dtype, and producer string.
    """

    root: Path
    layout: SegmentLayout
    heads: int
    head_dim: int
    dtype: str
    producer: str
    entries: dict[tuple[int, int, str], Path] = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted({layer for layer, _, _ in self.entries})

    @property
    def steps(self) -> list[int]:
        return sorted({step for _, step, _ in self.entries})

    def get(self, layer: int, step: int, name: str) -> Tensor:
        key = (layer, step, name)
        if key not in self.entries:
            raise BundleError(f"bundle has no tensor for layer={layer} step={step} name={name}")
        return read_tensor(self.entries[key])


def load_dump_bundle(path) -> DumpBundle:
    """Load and eagerly validate a dump bundle: the manifest must parse, every
    referenced file must exist and carry the declared [1, S, H, D] shape and
    dtype. Errors name the failing layer/step entry."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise BundleError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"{manifest_path}: manifest is not valid JSON: {exc}") from None
    version = manifest.get("schema_version")
    if version != BUNDLE_SCHEMA_VERSION:
        raise BundleError(f"{manifest_path}: unsupported schema_version {version!r}")
    try:
        layout = SegmentLayout(int(manifest["layout"]["n_text"]), int(manifest["layout"]["n_img"]))
        heads = int(manifest["heads"])
        head_dim = int(manifest["head_dim"])
        dtype = str(manifest["dtype"])
        producer = str(manifest.get("producer", ""))
        tensors = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise BundleError(f"{manifest_path}: manifest missing required field: {exc}") from None

    expected_shape = (1, layout.total, heads, head_dim)
    entries: dict[tuple[int, int, str], Path] = {}
    for item in tensors:
        layer, step, name = int(item["layer"]), int(item["step"]), str(item["name"])
        where = f"layer={layer} step={step} name={name}"
        if name not in TENSOR_NAMES:
            raise BundleError(f"{manifest_path}: {where}: name must be one of {TENSOR_NAMES}")
        key = (layer, step, name)
        if key in entries:
            raise BundleError(f"{manifest_path}: duplicate entry for {where}")
        file_path = root / item["file"]
        if not file_path.is_file():
            raise BundleError(f"{manifest_path}: {where}: file {item['file']} does not exist")
        actual_dtype, actual_shape = read_tensor_header(file_path)
        if actual_shape != expected_shape:
            raise BundleError(
                f"{manifest_path}: {where}: declared shape {expected_shape}, file has {actual_shape}"
            )
        if actual_dtype != dtype:
            raise BundleError(f"{manifest_path}: {where}: declared dtype {dtype}, file has {actual_dtype}")
        entries[key] = file_path
    return DumpBundle(
        root=root,
        layout=layout,
        heads=heads,
        head_dim=head_dim,
        dtype=dtype,
        producer=producer,
        entries=entries,
    )


def write_dump_bundle(
    path,
    tensors: dict[tuple[int, int, str], Tensor],
    layout: SegmentLayout,
    heads: int,
    head_dim: int,
    producer: str = "grag",
) -> DumpBundle:
    """Write tensors keyed by (layer, step, name) plus a manifest; the inverse
    of load_dump_bundle."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not tensors:
        raise BundleError("refusing to write an empty bundle")
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) != 1:
        raise BundleError(f"bundle tensors must share one dtype, got {sorted(dtypes)}")
    items = []
    for (layer, step, name), t in sorted(tensors.items()):
        if name not in TENSOR_NAMES:
            raise BundleError(f"tensor name must be one of {TENSOR_NAMES}, got {name!r}")
        fname = f"layer{layer:03d}_step{step:03d}_{name}.npy"
        write_tensor(root / fname, t)
        items.append({"layer": layer, "step": step, "name": name, "file": fname})
    manifest = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "producer": producer,
        "layout": {"n_text": layout.n_text, "n_img": layout.n_img},
        "heads": heads,
        "head_dim": head_dim,
        "dtype": next(iter(dtypes)),
        "tensors": items,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return load_dump_bundle(root)
