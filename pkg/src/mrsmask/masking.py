"""Mask plans for spatial-random, spectral-random and similarity-ranked masking.

Spectral plans hide whole bands; spatial plans hide pixel cells of the
``P x P`` grid in every band. The similarity-ranked strategy (``mrs``) draws a
base band, scores every band by cosine similarity to it, and hides the base
together with its most similar bands, so a hidden band cannot simply be copied
from a visible near-duplicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from mrsmask.cube import Patch
from mrsmask.errors import BoundsError, RatioError, ShapeError

__all__ = [
    "STRATEGIES",
    "SimilarityVector",
    "MaskPlan",
    "MaskedPatch",
    "masked_count",
    "cosine_similarity",
    "mask_top",
    "mrs_mask",
    "spectral_random_mask",
    "spatial_random_mask",
    "draw_plan",
    "apply_mask",
    "scatter_visible",
]

Strategy = Literal["spatial_random", "spectral_random", "mrs"]
STRATEGIES: tuple[str, ...] = ("spatial_random", "spectral_random", "mrs")
SPECTRAL = ("spectral_random", "mrs")

# R*n products such as 0.3*10 land a hair above the integer in binary floating
# point; the masked count is the exact ceiling of the decimal ratio.
_CEIL_SLACK = 1e-9


def masked_count(ratio: float, n: int) -> int:
    """``ceil(ratio * n)``, validated to satisfy ``1 <= m < n``."""
    if not 0.0 < ratio < 1.0:
        raise RatioError(f"mask ratio must lie in (0, 1), got {ratio}")
    m = math.ceil(ratio * n - _CEIL_SLACK)
    if m < 1 or m >= n:
        raise RatioError(f"ratio {ratio} masks {m} of {n} units; need 1 <= m < {n}")
    return m


@dataclass(frozen=True)
class SimilarityVector:
    values: np.ndarray
    base_band: int


@dataclass(frozen=True)
class MaskPlan:
    """Which bands or cells are hidden for one sample."""

    strategy: str
    ratio: float
    total_bands: int
    masked_bands: tuple[int, ...] = ()
    masked_cells: tuple[tuple[int, int], ...] = ()
    patch_size: int | None = None
    base_band: int | None = None

    @property
    def is_spectral(self) -> bool:
        return self.strategy in SPECTRAL

    @property
    def visible_bands(self) -> tuple[int, ...]:
        hidden = set(self.masked_bands)
        return tuple(b for b in range(self.total_bands) if b not in hidden)

    def visible_count(self, split: int | None = None) -> tuple[int, int]:
        """Unmasked band counts on each side of a modality split ``(C_H^M, C_X^M)``."""
        split = self.total_bands if split is None else split
        vis = self.visible_bands
        first = sum(1 for b in vis if b < split)
        return first, len(vis) - first

    def band_mask(self) -> np.ndarray:
        """Boolean ``(C_T,)`` array, True at hidden bands."""
        out = np.zeros(self.total_bands, dtype=bool)
        out[list(self.masked_bands)] = True
        return out

    def cell_mask(self) -> np.ndarray:
        """Boolean ``(P, P)`` array, True at hidden cells (spatial plans only)."""
        if self.patch_size is None:
            raise ShapeError("spectral plans carry no cell grid")
        out = np.zeros((self.patch_size, self.patch_size), dtype=bool)
        for i, j in self.masked_cells:
            out[i, j] = True
        return out

    def to_csv_line(self) -> str:
        """``strategy,R,base_band,masked_indices`` with ``;``-joined indices.

        Spatial plans list row-major flat cell indices ``i * P + j``.
        """
        if self.is_spectral:
            idx = self.masked_bands
        else:
            idx = tuple(i * self.patch_size + j for i, j in self.masked_cells)
        base = "" if self.base_band is None else str(self.base_band)
        return f"{self.strategy},{self.ratio!r},{base},{';'.join(map(str, idx))}"


@dataclass(frozen=True)
class MaskedPatch:
    """Encoder input after masking.

    Spectral plans drop hidden band rows (``visible`` has ``C_T - m`` rows in
    ascending original-band order). Spatial plans keep all rows and zero the
    hidden cells.
    """

    visible: np.ndarray
    plan: MaskPlan
    kept_band_index: tuple[int, ...]


def cosine_similarity(patch: Patch | np.ndarray, base_band: int) -> SimilarityVector:
    """Cosine similarity of every flattened band with the base band.

    Bands with zero norm get similarity 0 against everything. A nonzero-norm
    base band scores exactly 1 against itself.
    """
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    n = data.shape[0]
    if not 0 <= base_band < n:
        raise BoundsError(f"base band {base_band} outside [0, {n})")
    flat = data.reshape(n, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    t = flat[base_band]
    dots = flat @ t
    denom = norms * norms[base_band]
    values = np.zeros(n)
    ok = denom > 0
    values[ok] = np.clip(dots[ok] / denom[ok], -1.0, 1.0)
    if norms[base_band] > 0:
        values[base_band] = 1.0
    return SimilarityVector(values, base_band)


def mask_top(ratio: float, sim: SimilarityVector) -> MaskPlan:
    """Hide the base band plus the ``m - 1`` other bands with the largest similarity.

    Ties go to the lower band index.
    """
    values = np.asarray(sim.values, dtype=np.float64)
    n = values.shape[0]
    m = masked_count(ratio, n)
    others = np.array([b for b in range(n) if b != sim.base_band], dtype=np.int64)
    order = others[np.lexsort((others, -values[others]))]
    chosen = sorted([sim.base_band, *order[: m - 1].tolist()])
    return MaskPlan("mrs", ratio, n, masked_bands=tuple(chosen), base_band=sim.base_band)


def mrs_mask(patch: Patch | np.ndarray, ratio: float, rng: np.random.Generator) -> MaskPlan:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    n = data.shape[0]
    masked_count(ratio, n)
    base = int(rng.integers(n))
    return mask_top(ratio, cosine_similarity(data, base))


def spectral_random_mask(total_bands: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    m = masked_count(ratio, total_bands)
    chosen = np.sort(rng.choice(total_bands, size=m, replace=False))
    return MaskPlan("spectral_random", ratio, total_bands, masked_bands=tuple(int(b) for b in chosen))


def spatial_random_mask(
    patch_size: int, ratio: float, rng: np.random.Generator, total_bands: int = 0
) -> MaskPlan:
    cells = patch_size * patch_size
    m = masked_count(ratio, cells)
    flat = np.sort(rng.choice(cells, size=m, replace=False))
    masked = tuple((int(f) // patch_size, int(f) % patch_size) for f in flat)
    return MaskPlan(
        "spatial_random", ratio, total_bands, masked_cells=masked, patch_size=patch_size
    )


def draw_plan(strategy: str, patch: Patch | np.ndarray, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Draw one plan for ``patch`` under the named strategy."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    if strategy == "mrs":
        return mrs_mask(data, ratio, rng)
    if strategy == "spectral_random":
        return spectral_random_mask(data.shape[0], ratio, rng)
    if strategy == "spatial_random":
        return spatial_random_mask(data.shape[1], ratio, rng, total_bands=data.shape[0])
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def apply_mask(patch: Patch | np.ndarray, plan: MaskPlan) -> MaskedPatch:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    n, size = data.shape[0], data.shape[1]
    if plan.is_spectral:
        if plan.total_bands != n:
            raise ShapeError(f"plan built for {plan.total_bands} bands, patch has {n}")
        kept = plan.visible_bands
        return MaskedPatch(data[list(kept)].copy(), plan, kept)
    if plan.patch_size != size:
        raise ShapeError(f"plan built for P={plan.patch_size}, patch has P={size}")
    visible = data.copy()
    visible[:, plan.cell_mask()] = 0
    return MaskedPatch(visible, plan, tuple(range(n)))


def scatter_visible(masked: MaskedPatch, total_bands: int, fill: float = 0.0) -> np.ndarray:
    """Place visible rows back at their original band slots in a ``(C_T, P, P)`` buffer."""
    size = masked.visible.shape[1]
    out = np.full((total_bands, size, size), fill, dtype=np.result_type(masked.visible, fill))
    out[list(masked.kept_band_index)] = masked.visible
    return out
