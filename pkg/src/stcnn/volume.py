"""4D volume container, the ``.vol4`` raw format, and per-voxel normalization.

A ``.vol4`` file is a raw little-endian float32 payload in ``(T, D, H, W)``
row-major order. It is accompanied by a ``.vol4.hdr`` text sidecar of
``key = value`` lines::

    format = vol4
    version = 1
    dims = 64 16 16 16
    dtype = float32
    byte_order = little
    repetition_time = 0.72
    mask = sub-000.mask.vol4

``mask`` is ``none`` or a path (relative to the header) of a single-frame
``.vol4`` whose nonzero cells mark in-mask voxels. Single network maps are
stored as one-frame ``.vol4`` files.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Header and payload disagree, or the header is malformed."""


class DataError(ValueError):
    """Payload holds values that are not allowed (NaN, inf)."""


@dataclass
class Volume4D:
    """A sequence of ``T`` 3D frames, shape ``(T, D, H, W)``."""

    data: np.ndarray
    mask: np.ndarray | None = None
    repetition_time: float = 1.0
    constant_voxels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"Volume4D needs a 4D array, got shape {self.data.shape}")
        if self.data.shape[0] < 2:
            raise ValueError(f"Volume4D needs at least 2 frames, got {self.data.shape[0]}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape[1:]:
                raise ValueError(f"mask shape {self.mask.shape} vs frame shape {self.data.shape[1:]}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def brain_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.spatial_shape, dtype=bool)
        return self.mask

    def voxel_matrix(self) -> np.ndarray:
        """In-mask voxel time series as columns of a ``(T, V)`` matrix."""
        return self.data[:, self.brain_mask]

    def map_from_voxels(self, values: np.ndarray) -> np.ndarray:
        """Scatter one value per in-mask voxel back into a 3D map."""
        out = np.zeros(self.spatial_shape, dtype=np.float64)
        out[self.brain_mask] = values
        return out


def normalize(vol: Volume4D) -> Volume4D:
    """Z-score each in-mask voxel time series (population std).

    Constant voxels become all-zero and are recorded in ``constant_voxels``.
    Voxels outside the mask are set to zero.
    """
    x = vol.data.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    safe = np.where(constant, 1.0, std)
    z = (x - mean) / safe
    z[:, constant] = 0.0
    z[:, ~vol.brain_mask] = 0.0
    return replace(vol, data=z, constant_voxels=constant & vol.brain_mask)


# ---------------------------------------------------------------- file format


def header_path(path) -> Path:
    return Path(str(path) + ".hdr")


def parse_keyvalue(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _write_raw(array: np.ndarray, path, repetition_time: float = 1.0, mask_ref: str = "none"):
    arr = np.asarray(array)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: refusing to write non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE)
    with open(path, "wb") as fh:
        fh.write(payload.tobytes())
    dims = " ".join(str(n) for n in arr.shape)
    header = (f"format = vol4\nversion = {FORMAT_VERSION}\ndims = {dims}\n"
              f"dtype = float32\nbyte_order = little\n"
              f"repetition_time = {repetition_time!r}\nmask = {mask_ref}\n")
    header_path(path).write_text(header)


def _read_raw(path) -> tuple[np.ndarray, dict[str, str]]:
    path = Path(path)
    hdr_file = header_path(path)
    if not hdr_file.exists():
        raise FormatError(f"{path}: missing header sidecar {hdr_file.name}")
    hdr = parse_keyvalue(hdr_file.read_text())
    if hdr.get("format") != "vol4":
        raise FormatError(f"{hdr_file}: not a vol4 header")
    if int(hdr.get("version", -1)) != FORMAT_VERSION:
        raise FormatError(f"{hdr_file}: unsupported version {hdr.get('version')}")
    if hdr.get("dtype", "float32") != "float32" or hdr.get("byte_order", "little") != "little":
        raise FormatError(f"{hdr_file}: only little-endian float32 payloads are supported")
    try:
        dims = tuple(int(v) for v in hdr["dims"].split())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{hdr_file}: bad or missing dims") from exc
    if len(dims) != 4:
        raise FormatError(f"{hdr_file}: dims must list T D H W, got {dims}")
    if any(n < 1 for n in dims):
        raise FormatError(f"{hdr_file}: every extent must be positive, got dims {dims}")
    expected = int(np.prod(dims)) * PAYLOAD_DTYPE.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"{path}: payload is {actual} bytes, expected {expected} for dims {dims}")
    data = np.fromfile(path, dtype=PAYLOAD_DTYPE).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    return data, hdr


def write_volume4d(vol: Volume4D, path) -> None:
    path = Path(path)
    mask_ref = "none"
    if vol.mask is not None:
        mask_file = path.with_name(path.name.removesuffix(".vol4") + ".mask.vol4")
        _write_raw(vol.mask[None].astype(np.float32), mask_file)
        mask_ref = mask_file.name
    _write_raw(vol.data, path, vol.repetition_time, mask_ref)


def read_volume4d(path) -> Volume4D:
    data, hdr = _read_raw(path)
    mask = None
    ref = hdr.get("mask", "none")
    if ref != "none":
        mask_data, _ = _read_raw(Path(path).parent / ref)
        mask = mask_data[0] != 0
    return Volume4D(data, mask=mask, repetition_time=float(hdr.get("repetition_time", 1.0)))


def write_map(values: np.ndarray, path) -> None:
    """Store a 3D map as a one-frame ``.vol4``."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"map must be 3D, got shape {values.shape}")
    _write_raw(values[None], path)


def read_map(path) -> np.ndarray:
    data, _ = _read_raw(path)
    if data.shape[0] != 1:
        raise FormatError(f"{path}: expected a single-frame map, found {data.shape[0]} frames")
    return data[0].astype(np.float64)


def write_series(values, path, header: str = "value") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [header] + [repr(float(v)) for v in np.ravel(values)]
    path.write_text("\n".join(lines) + "\n")


def read_series(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    return np.array([float(v) for v in lines[1:]])
