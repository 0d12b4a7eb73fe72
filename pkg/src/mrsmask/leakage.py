"""Band redundancy and leakage analytics.

Pairwise similarity matrices, single-link redundancy groups, empirical co-mask
rates (with the closed-form rate for uniform random masking), and a probe
that scores how badly a model relies on copying from similar visible bands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from mrsmask import autonet
from mrsmask.autonet import ModelParams
from mrsmask.cube import Patch
from mrsmask.errors import ComparisonError
from mrsmask.masking import draw_plan, masked_count
from mrsmask.trainer import as_patch_array

__all__ = [
    "SimilarityMatrix",
    "RedundancyGroup",
    "RedundancyReport",
    "ProbeReport",
    "similarity_matrix",
    "redundancy_groups",
    "random_comask_probability",
    "comask_rate",
    "redundancy_report",
    "leakage_probe",
    "write_similarity_csv",
    "write_similarity_pgm",
]


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    degenerate: np.ndarray  # True for zero-norm bands

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class RedundancyGroup:
    members: tuple[int, ...]
    min_link: float  # weakest similarity edge holding the group together


@dataclass
class RedundancyReport:
    groups: list[RedundancyGroup]
    threshold: float
    comask: dict[str, dict[tuple[int, int], float]] = field(default_factory=dict)


@dataclass(frozen=True)
class ProbeReport:
    mse_random: float
    mse_mrs: float
    ratio: float
    per_patch_random: np.ndarray
    per_patch_mrs: np.ndarray


def similarity_matrix(patch: Patch | np.ndarray) -> SimilarityMatrix:
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    flat = data.reshape(data.shape[0], -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    degenerate = norms == 0
    safe = np.where(degenerate, 1.0, norms)
    unit = flat / safe[:, None]
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    values[degenerate, :] = 0.0
    values[:, degenerate] = 0.0
    np.fill_diagonal(values, np.where(degenerate, 0.0, 1.0))
    values = (values + values.T) / 2
    return SimilarityMatrix(values, degenerate)


def redundancy_groups(matrix: SimilarityMatrix | np.ndarray, threshold: float = 0.95) -> list[RedundancyGroup]:
    """Single-link clusters over edges with similarity >= ``threshold``.

    Groups are sorted by their smallest member; singletons report ``min_link`` 1.0.
    """
    m = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix)
    n = m.shape[0]
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # Kruskal over descending edges: each union's edge is a maximum-spanning-tree edge.
    edges = [(m[i, j], i, j) for i in range(n) for j in range(i + 1, n) if m[i, j] >= threshold]
    edges.sort(key=lambda e: (-e[0], e[1], e[2]))
    weakest: dict[int, float] = {}
    for s, i, j in edges:
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        link = min(s, weakest.get(ri, 1.0), weakest.get(rj, 1.0))
        parent[max(ri, rj)] = min(ri, rj)
        weakest[min(ri, rj)] = link
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    out = [RedundancyGroup(tuple(sorted(mem)), float(weakest.get(root, 1.0))) for root, mem in clusters.items()]
    return sorted(out, key=lambda g: g.members[0])


def random_comask_probability(total_bands: int, m: int) -> float:
    """Chance a fixed pair is hidden together under a uniform ``m``-of-``C_T`` draw."""
    if m < 2:
        return 0.0
    return comb(total_bands - 2, m - 2) / comb(total_bands, m)


def comask_rate(
    strategy: str,
    patch: Patch | np.ndarray,
    ratio: float,
    pair: tuple[int, int],
    trials: int,
    seed: int,
    given_base_in_pair: bool = False,
) -> float:
    """Fraction of seeded trials that hide both bands of ``pair``.

    With ``given_base_in_pair`` (``mrs`` only) the rate is conditioned on the
    drawn base band being one of the pair; NaN if that never happened.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    i, j = pair
    rng = np.random.default_rng(seed)
    hits = counted = 0
    for _ in range(trials):
        plan = draw_plan(strategy, data, ratio, rng)
        if given_base_in_pair and plan.base_band not in (i, j):
            continue
        counted += 1
        hidden = plan.masked_bands
        hits += i in hidden and j in hidden
    return hits / counted if counted else float("nan")


def redundancy_report(
    patch: Patch | np.ndarray,
    threshold: float = 0.95,
    ratio: float = 0.25,
    strategies: tuple[str, ...] = ("spectral_random", "mrs"),
    trials: int = 2000,
    seed: int = 0,
) -> RedundancyReport:
    groups = redundancy_groups(similarity_matrix(patch), threshold)
    report = RedundancyReport(groups, threshold)
    pairs = [(g.members[a], g.members[b]) for g in groups
             for a in range(len(g.members)) for b in range(a + 1, len(g.members))]
    for strategy in strategies:
        report.comask[strategy] = {p: comask_rate(strategy, patch, ratio, p, trials, seed) for p in pairs}
    return report


def leakage_probe(
    params_random: ModelParams,
    params_mrs: ModelParams,
    eval_patches,
    ratio: float,
    seed: int,
) -> ProbeReport:
    """Masked-band MSE of two models under the same held-out MRS masks.

    ``ratio`` is ``mse_random / mse_mrs``; above 1 means the randomly
    pretrained model struggles more once similar bands are hidden together.
    """
    if params_random.dims[:4] != params_mrs.dims[:4]:
        raise ComparisonError(f"model shapes differ: {params_random.dims} vs {params_mrs.dims}")
    data = as_patch_array(eval_patches)
    n, C, P = data.shape[0], data.shape[1], data.shape[2]
    if C != params_mrs.C_T or P != params_mrs.P:
        raise ComparisonError(f"patches ({C}, {P}) do not match models ({params_mrs.C_T}, {params_mrs.P})")
    masked_count(ratio, C)
    rng = np.random.default_rng(seed)
    hidden = np.zeros((n, C), dtype=bool)
    for k in range(n):
        hidden[k] = draw_plan("mrs", data[k], ratio, rng).band_mask()
    target = data.reshape(n, C, P * P)
    weight = np.repeat(hidden[..., None], P * P, axis=2).astype(np.float64)
    x = target * (~hidden)[..., None]
    per = []
    for params in (params_random, params_mrs):
        _, per_sample, _, _ = autonet.recon_forward_backward(params, x, target, hidden, weight, need_grad=False)
        per.append(per_sample)
    a, b = float(per[0].mean()), float(per[1].mean())
    ratio_out = 1.0 if a == b else (a / b if b > 0 else float("inf"))
    return ProbeReport(a, b, ratio_out, per[0], per[1])


def write_similarity_csv(matrix: SimilarityMatrix, path: str | Path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in matrix.values]
    Path(path).write_text("\n".join(lines) + "\n")


def write_similarity_pgm(matrix: SimilarityMatrix, path: str | Path) -> None:
    """Binary 8-bit PGM, pixel = round(255 * (s + 1) / 2)."""
    n = matrix.size
    pix = np.rint(255.0 * (matrix.values + 1.0) / 2.0).clip(0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{n} {n}\n255\n".encode() + pix.tobytes())
