"""Multi-band scenes: data model, binary I/O, normalization and patches.

Cubes are stored band-sequential, ``(bands, height, width)``. The on-disk
format is a single text header line followed by a raw little-endian payload::

    SPECCUBE1 {"bands":C,"height":H,"width":W,"split":S,"wavelengths":[...]|null}\\n
    <C*H*W float32 LE, band 0 row-major, then band 1, ...>

Label maps use ``SPECLAB1 {"height":H,"width":W,"classes":K}`` followed by
``H*W`` uint16 LE labels, row-major. Label 0 means unlabeled.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from mrsmask.errors import (
    BoundsError,
    CubeFormatError,
    DataError,
    ShapeError,
    SpecError,
    TruncationError,
)

__all__ = [
    "HyperCube",
    "Patch",
    "LabelMap",
    "SyntheticSpec",
    "BandStats",
    "read_cube",
    "write_cube",
    "read_labels",
    "write_labels",
    "extract_patch",
    "extract_patches",
    "valid_centers",
    "compute_stats",
    "normalize",
    "gen_synthetic",
]

CUBE_MAGIC = "SPECCUBE1"
LABEL_MAGIC = "SPECLAB1"
NORM_EPS = 1e-8


@dataclass(frozen=True)
class HyperCube:
    """A ``C x H x W`` scene with an optional modality boundary.

    ``split`` is the number of leading bands that belong to the first
    modality; ``split == bands`` means a single modality.
    """

    data: np.ndarray
    wavelengths: tuple[float, ...] | None = None
    split: int | None = None

    def __post_init__(self) -> None:
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise ShapeError(f"cube data must be 3-D (bands, height, width), got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        bad = np.argwhere(~np.isfinite(data))
        if bad.size:
            b, r, c = (int(v) for v in bad[0])
            raise DataError(f"non-finite sample at band {b}, pixel ({r}, {c})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        split = data.shape[0] if self.split is None else int(self.split)
        if not 0 <= split <= data.shape[0]:
            raise ShapeError(f"split {split} outside [0, {data.shape[0]}]")
        object.__setattr__(self, "split", split)
        if self.wavelengths is not None:
            wl = tuple(float(w) for w in self.wavelengths)
            if len(wl) != data.shape[0]:
                raise ShapeError(f"{len(wl)} wavelengths for {data.shape[0]} bands")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HyperCube):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.split == other.split
            and self.wavelengths == other.wavelengths
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Patch:
    """One training sample ``T`` of shape ``(C_T, P, P)``."""

    data: np.ndarray
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[1] != data.shape[2] or data.shape[1] < 1:
            raise ShapeError(f"patch data must have shape (C, P, P), got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def patch_size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count}]")
        labels = labels.astype(np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a scene whose bands form known redundancy groups.

    Each group's lowest index is its leader. Every other member is
    ``gain * leader + N(0, noise_sigma)`` with a per-band gain drawn from
    ``gain_range``. Leaders carry the class signal: a class spectrum scaled by
    a per-pixel brightness and perturbed by ``pixel_variability`` relative noise.
    """

    bands: int
    height: int
    width: int
    class_count: int
    redundancy_groups: tuple[tuple[int, ...], ...]
    gain_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.01
    class_layout: tuple[int, int] = (2, 2)
    seed: int = 0
    pixel_variability: float = 0.1
    brightness_range: tuple[float, float] = (0.8, 1.2)

    def validate(self) -> None:
        if min(self.bands, self.height, self.width, self.class_count) < 1:
            raise SpecError("bands, height, width and class_count must be >= 1")
        members = sorted(b for g in self.redundancy_groups for b in g)
        if members != list(range(self.bands)) or any(len(g) == 0 for g in self.redundancy_groups):
            raise SpecError("redundancy_groups must partition band indices 0..bands-1 exactly")
        if self.noise_sigma < 0 or self.pixel_variability < 0:
            raise SpecError("noise_sigma and pixel_variability must be >= 0")
        rows, cols = self.class_layout
        if rows < 1 or cols < 1 or rows > self.height or cols > self.width:
            raise SpecError(f"class_layout {self.class_layout} does not fit a {self.height}x{self.width} scene")
        if self.class_count > rows * cols or self.class_count > self.height * self.width:
            raise SpecError(f"{self.class_count} classes need more blocks than layout {rows}x{cols} provides")
        if self.gain_range[0] > self.gain_range[1] or self.brightness_range[0] > self.brightness_range[1]:
            raise SpecError("ranges must be (low, high) with low <= high")


class BandStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


# --------------------------------------------------------------------------
# binary I/O
# --------------------------------------------------------------------------


def _split_header(raw: bytes, magic: str) -> tuple[dict, bytes]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CubeFormatError("header", "missing newline terminator")
    line = raw[:nl].decode("utf-8", errors="replace")
    prefix = magic + " "
    if not line.startswith(prefix):
        raise CubeFormatError("magic", f"expected {magic!r}")
    try:
        header = json.loads(line[len(prefix):])
    except json.JSONDecodeError as exc:
        raise CubeFormatError("header", f"invalid JSON ({exc.msg})") from None
    if not isinstance(header, dict):
        raise CubeFormatError("header", "JSON header must be an object")
    return header, raw[nl + 1:]


def _int_field(header: dict, name: str, minimum: int = 1) -> int:
    value = header.get(name)
    if isinstance(value, bool) or not isinstance(value, int):
        raise CubeFormatError(name, f"expected integer, got {value!r}")
    if value < minimum:
        raise CubeFormatError(name, f"must be >= {minimum}, got {value}")
    return value


def write_cube(cube: HyperCube, path: str | Path) -> None:
    header = {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "split": cube.split,
        "wavelengths": list(cube.wavelengths) if cube.wavelengths is not None else None,
    }
    line = f"{CUBE_MAGIC} {json.dumps(header, separators=(',', ':'))}\n".encode()
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(line + payload)


def read_cube(path: str | Path) -> HyperCube:
    header, payload = _split_header(Path(path).read_bytes(), CUBE_MAGIC)
    bands = _int_field(header, "bands")
    height = _int_field(header, "height")
    width = _int_field(header, "width")
    split = _int_field(header, "split", minimum=0)
    if split > bands:
        raise CubeFormatError("split", f"{split} exceeds band count {bands}")
    wl = header.get("wavelengths")
    if wl is not None:
        if not isinstance(wl, list) or len(wl) != bands or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in wl
        ):
            raise CubeFormatError("wavelengths", f"expected null or a list of {bands} numbers")
    expected = bands * height * width * 4
    if len(payload) != expected:
        raise TruncationError(
            f"payload has {len(payload)} bytes, header requires {expected} ({bands}x{height}x{width} float32)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width).astype(np.float32)
    return HyperCube(data, wavelengths=None if wl is None else tuple(wl), split=split)


def write_labels(labels: LabelMap, path: str | Path) -> None:
    header = {"height": labels.height, "width": labels.width, "classes": labels.class_count}
    line = f"{LABEL_MAGIC} {json.dumps(header, separators=(',', ':'))}\n".encode()
    Path(path).write_bytes(line + np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def read_labels(path: str | Path) -> LabelMap:
    header, payload = _split_header(Path(path).read_bytes(), LABEL_MAGIC)
    height = _int_field(header, "height")
    width = _int_field(header, "width")
    classes = _int_field(header, "classes")
    if len(payload) != height * width * 2:
        raise TruncationError(f"payload has {len(payload)} bytes, header requires {height * width * 2}")
    labels = np.frombuffer(payload, dtype="<u2").reshape(height, width)
    if labels.max(initial=0) > classes:
        r, c = (int(v) for v in np.argwhere(labels > classes)[0])
        raise DataError(f"label {labels[r, c]} at pixel ({r}, {c}) exceeds class count {classes}")
    return LabelMap(labels, classes)


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------


def _window(cube: HyperCube, center: tuple[int, int], size: int) -> tuple[int, int]:
    if size < 1:
        raise BoundsError(f"patch size must be >= 1, got {size}")
    top = center[0] - size // 2
    left = center[1] - size // 2
    if top < 0 or left < 0 or top + size > cube.height or left + size > cube.width:
        raise BoundsError(
            f"window rows [{top}, {top + size}) x cols [{left}, {left + size}) "
            f"outside {cube.height}x{cube.width} cube"
        )
    return top, left


def extract_patch(cube: HyperCube, center: tuple[int, int], size: int) -> Patch:
    """Copy the ``size x size`` window whose top-left is ``center - size // 2``."""
    top, left = _window(cube, center, size)
    data = cube.data[:, top:top + size, left:left + size].copy()
    return Patch(data, origin=(top, left))


def valid_centers(cube: HyperCube, size: int) -> np.ndarray:
    """All ``(row, col)`` centers whose window fits inside the cube, row-major."""
    half = size // 2
    rows = np.arange(half, cube.height - (size - 1 - half))
    cols = np.arange(half, cube.width - (size - 1 - half))
    if rows.size == 0 or cols.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_patches(cube: HyperCube, centers: Iterable[Sequence[int]], size: int) -> np.ndarray:
    """Stack patches for many centers into a float64 ``(N, C, P, P)`` array."""
    out = [extract_patch(cube, (int(r), int(c)), size).data for r, c in centers]
    if not out:
        return np.empty((0, cube.bands, size, size))
    return np.stack(out).astype(np.float64)


# --------------------------------------------------------------------------
# statistics and normalization
# --------------------------------------------------------------------------


def compute_stats(cube: HyperCube, pixel_subset: Sequence[int] | None = None) -> BandStats:
    """Per-band mean and population standard deviation.

    ``pixel_subset`` holds flat row-major pixel indices (``row * width + col``).
    """
    flat = cube.data.reshape(cube.bands, -1).astype(np.float64)
    if pixel_subset is not None:
        idx = np.asarray(pixel_subset, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("pixel_subset must be nonempty")
        flat = flat[:, idx]
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    constant = np.all(flat == flat[:, :1], axis=1)
    mean[constant] = flat[constant, 0]
    std[constant] = 0.0
    return BandStats(mean, std)


def normalize(cube: HyperCube, stats: BandStats) -> HyperCube:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if mean.shape != (cube.bands,) or std.shape != (cube.bands,):
        raise ShapeError(f"stats cover {mean.shape[0]} bands, cube has {cube.bands}")
    scale = np.maximum(std, NORM_EPS)
    data = (cube.data.astype(np.float64) - mean[:, None, None]) / scale[:, None, None]
    return HyperCube(data, wavelengths=cube.wavelengths, split=cube.split)


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


def _block_edges(n: int, parts: int) -> np.ndarray:
    return np.array([math.floor(i * n / parts) for i in range(parts + 1)])


def gen_synthetic(spec: SyntheticSpec) -> tuple[HyperCube, LabelMap]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rows, cols = spec.class_layout
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    r_edges = _block_edges(spec.height, rows)
    c_edges = _block_edges(spec.width, cols)
    for br in range(rows):
        for bc in range(cols):
            labels[r_edges[br]:r_edges[br + 1], c_edges[bc]:c_edges[bc + 1]] = (br * cols + bc) % spec.class_count + 1

    groups = [sorted(g) for g in spec.redundancy_groups]
    n_groups = len(groups)
    class_spectra = rng.uniform(0.2, 1.0, size=(spec.class_count, n_groups))
    gains = rng.uniform(spec.gain_range[0], spec.gain_range[1], size=spec.bands)

    brightness = rng.uniform(*spec.brightness_range, size=(spec.height, spec.width))
    jitter = rng.standard_normal((n_groups, spec.height, spec.width))
    base = class_spectra[labels - 1].transpose(2, 0, 1)
    leaders = base * brightness * (1.0 + spec.pixel_variability * jitter)

    data = np.empty((spec.bands, spec.height, spec.width))
    for g, members in enumerate(groups):
        lead = members[0]
        data[lead] = leaders[g]
        for b in members[1:]:
            noise = rng.standard_normal((spec.height, spec.width))
            data[b] = gains[b] * leaders[g] + spec.noise_sigma * noise
    cube = HyperCube(data.astype(np.float32))
    return cube, LabelMap(labels, spec.class_count)


def pair_groups(bands: int) -> tuple[tuple[int, ...], ...]:
    """Redundancy groups ``{0,1}, {2,3}, ...`` (a trailing odd band is a singleton)."""
    return tuple(tuple(range(i, min(i + 2, bands))) for i in range(0, bands, 2))
