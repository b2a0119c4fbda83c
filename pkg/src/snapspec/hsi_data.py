"""Hyperspectral cubes, coded masks and measurements: containers, HSIC file I/O,
synthetic scenes, cropping and augmentation.

Arrays are stored channel-last (H, W, C) as float32, matching the on-disk
payload order of the HSIC container.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.ndimage import gaussian_filter

DEFAULT_BANDS = 28
DEFAULT_STEP = 2

HSIC_MAGIC = b"HSIC"
HSIC_VERSION = 1
DTYPE_FLOAT32 = 1
FLAG_MEASUREMENT = 0x1
_HEADER = struct.Struct("<4sBBHIIII")
HEADER_SIZE = _HEADER.size  # 24
# refuse to allocate payloads larger than this (bytes)
MAX_PAYLOAD_BYTES = 1 << 34


class HSICFormatError(ValueError):
    """Raised for malformed HSIC containers."""


@dataclass
class HSICube:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] < 1:
            raise ValueError(f"cube must be H x W x C, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("cube values must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class CodedMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise ValueError(f"mask must be H x W, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("mask contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class Measurement:
    """Sensor image of width ``W + step * (bands - 1)``.

    ``bands`` and ``step`` are optional; when both are given together with
    ``scene_width`` the width is checked against the dispersion geometry.
    """

    data: np.ndarray
    bands: int | None = None
    step: int | None = None
    scene_width: int | None = None
    noise_meta: dict[str, Any] | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise ValueError(f"measurement must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("measurement contains non-finite values")
        if self.bands is not None and self.step is not None and self.scene_width is not None:
            expected = self.scene_width + self.step * (self.bands - 1)
            if data.shape[1] != expected:
                raise ValueError(
                    f"measurement width {data.shape[1]} != {expected} for "
                    f"W={self.scene_width}, C={self.bands}, step={self.step}"
                )
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# HSIC container


def write_hsic(path: str | Path, array: np.ndarray, is_measurement: bool = False) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
    h, w, c = arr.shape
    flags = FLAG_MEASUREMENT if is_measurement else 0
    header = _HEADER.pack(HSIC_MAGIC, HSIC_VERSION, DTYPE_FLOAT32, 0, h, w, c, flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_hsic(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(array[H, W, C] float32, flags)``."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise HSICFormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, dtype, reserved, h, w, c, flags = _HEADER.unpack_from(raw)
    if magic != HSIC_MAGIC:
        raise HSICFormatError(f"{path}: bad magic {magic!r}")
    if version != HSIC_VERSION:
        raise HSICFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise HSICFormatError(f"{path}: unsupported dtype code {dtype}")
    if reserved != 0:
        raise HSICFormatError(f"{path}: reserved header bytes are not zero")
    nbytes = h * w * c * 4
    if nbytes > MAX_PAYLOAD_BYTES:
        raise HSICFormatError(f"{path}: dimensions {h}x{w}x{c} overflow the payload limit")
    payload = len(raw) - HEADER_SIZE
    if payload < nbytes:
        raise HSICFormatError(f"{path}: truncated payload ({payload} of {nbytes} bytes)")
    if payload > nbytes:
        raise HSICFormatError(f"{path}: {payload - nbytes} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=HEADER_SIZE)
    return arr.reshape(h, w, c).astype(np.float32), flags


def save_cube(cube: HSICube, path: str | Path) -> None:
    write_hsic(path, cube.data)


def load_cube(path: str | Path) -> HSICube:
    arr, _ = read_hsic(path)
    return HSICube(arr)


def save_mask(mask: CodedMask, path: str | Path) -> None:
    write_hsic(path, mask.data)


def load_mask(path: str | Path) -> CodedMask:
    arr, _ = read_hsic(path)
    if arr.shape[2] != 1:
        raise HSICFormatError(f"{path}: mask container must have C=1, got {arr.shape[2]}")
    return CodedMask(arr[:, :, 0])


def save_measurement(meas: Measurement, path: str | Path) -> None:
    write_hsic(path, meas.data, is_measurement=True)


def load_measurement(path: str | Path) -> Measurement:
    arr, flags = read_hsic(path)
    if not flags & FLAG_MEASUREMENT:
        raise HSICFormatError(f"{path}: is_measurement flag not set")
    if arr.shape[2] != 1:
        raise HSICFormatError(f"{path}: measurement container must have C=1")
    return Measurement(arr[:, :, 0])


# ---------------------------------------------------------------------------
# Synthetic data


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if int(value) != value or value <= 0:
            raise ValueError(f"{name} must be a positive integer, got {value}")


def generate_synthetic_scene(H: int, W: int, C: int = DEFAULT_BANDS, seed: int = 0) -> HSICube:
    """Smooth random scene: a few materials with Gaussian-mixture spectra laid
    out by soft, spatially smoothed abundance maps.

    Spectra are defined on a normalized wavelength axis in [0, 1], so the
    spectral smoothness per band improves as C grows.
    """
    _check_dims(H=H, W=W, C=C)
    if H < 8 or W < 8:
        raise ValueError(f"scene must be at least 8x8, got {H}x{W}")
    rng = np.random.default_rng(seed)
    n_materials = int(rng.integers(3, 7))
    wl = np.linspace(0.0, 1.0, C) if C > 1 else np.array([0.5])

    spectra = np.zeros((n_materials, C))
    for m in range(n_materials):
        for _ in range(int(rng.integers(1, 4))):
            center = rng.uniform(-0.1, 1.1)
            width = rng.uniform(0.12, 0.35)
            spectra[m] += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((wl - center) / width) ** 2)
        spectra[m] += rng.uniform(0.0, 0.15)
    spectra /= spectra.max(axis=1, keepdims=True)

    sigma = max(H, W) / rng.uniform(6.0, 12.0)
    fields = np.stack(
        [gaussian_filter(rng.standard_normal((H, W)), sigma, mode="reflect") for _ in range(n_materials)]
    )
    fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
    # sharpness > 1 gives piecewise-smooth regions with soft edges
    logits = rng.uniform(2.0, 5.0) * fields
    logits -= logits.max(axis=0, keepdims=True)
    abundance = np.exp(logits)
    abundance /= abundance.sum(axis=0, keepdims=True)

    shading = 0.6 + 0.4 * gaussian_filter(rng.uniform(size=(H, W)), sigma * 1.5, mode="reflect")
    shading = (shading - shading.min()) / (np.ptp(shading) + 1e-12) * 0.5 + 0.5
    cube = np.einsum("mhw,mc->hwc", abundance, spectra) * shading[:, :, None]
    cube *= rng.uniform(0.7, 1.0) / max(cube.max(), 1e-12)
    return HSICube(np.clip(cube, 0.0, 1.0))


def random_mask(H: int, W: int, seed: int = 0, kind: str = "binary") -> CodedMask:
    """Bernoulli(0.5) binary mask, or i.i.d. uniform [0, 1] values for ``kind='uniform'``."""
    _check_dims(H=H, W=W)
    rng = np.random.default_rng(seed)
    if kind == "binary":
        data = (rng.uniform(size=(H, W)) < 0.5).astype(np.float32)
    elif kind == "uniform":
        data = rng.uniform(size=(H, W)).astype(np.float32)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    return CodedMask(data)


def _as_size(size: int | tuple[int, int]) -> tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


def random_crop(cube: HSICube, size: int | tuple[int, int], seed: int = 0) -> HSICube:
    h, w = _as_size(size)
    if h <= 0 or w <= 0:
        raise ValueError(f"crop size must be positive, got {(h, w)}")
    if h > cube.height or w > cube.width:
        raise ValueError(f"crop {(h, w)} larger than source {(cube.height, cube.width)}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, cube.height - h + 1))
    left = int(rng.integers(0, cube.width - w + 1))
    return HSICube(cube.data[top:top + h, left:left + w].copy())


AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def apply_augmentation(cube: HSICube, name: str) -> HSICube:
    x = cube.data
    if name == "identity":
        out = x
    elif name == "hflip":
        out = x[:, ::-1]
    elif name == "vflip":
        out = x[::-1]
    elif name == "rot90":
        out = np.rot90(x, 1, axes=(0, 1))
    elif name == "rot180":
        out = np.rot90(x, 2, axes=(0, 1))
    elif name == "rot270":
        out = np.rot90(x, 3, axes=(0, 1))
    else:
        raise ValueError(f"unknown augmentation {name!r}")
    return HSICube(np.ascontiguousarray(out))


def augment(cube: HSICube, seed: int = 0) -> HSICube:
    """Uniformly draw one of :data:`AUGMENTATIONS` and apply it to the spatial axes."""
    rng = np.random.default_rng(seed)
    return apply_augmentation(cube, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))])
