"""End-to-end acceptance criteria, each at its stated tolerance and time limit.

Every test prints one ``[PASS]`` / ``[FAIL]`` line (shown even under output
capture) before asserting. Criteria 6-8 train real models and take a few
minutes; select them alone with ``pytest -m acceptance``.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mrsmask import autonet, config
from mrsmask.autonet import init_params, recon_loss
from mrsmask.cli import main
from mrsmask.experiment import load_or_generate, prepare_data, train_config_from_config
from mrsmask.leakage import comask_rate, random_comask_probability
from mrsmask.masking import MaskPlan, SimilarityVector, cosine_similarity, mask_top, mrs_mask, spectral_random_mask
from mrsmask.trainer import pretrain

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail

    return report


def independent_cosine(patch, base):
    """Scalar-loop cosine similarity, written without numpy reductions."""
    C = patch.shape[0]
    flat = [[float(v) for v in patch[b].ravel()] for b in range(C)]
    nb = math.sqrt(math.fsum(v * v for v in flat[base]))
    out = []
    for b in range(C):
        nv = math.sqrt(math.fsum(v * v for v in flat[b]))
        if nb == 0 or nv == 0:
            out.append(0.0)
        else:
            out.append(math.fsum(x * y for x, y in zip(flat[b], flat[base])) / (nv * nb))
    return out


def test_c1_similarity_correctness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, exact_base = 0.0, True
    for _ in range(100):
        patch = rng.standard_normal((16, 5, 5))
        base = int(rng.integers(16))
        sim = cosine_similarity(patch, base)
        worst = max(worst, float(np.max(np.abs(sim.values - independent_cosine(patch, base)))))
        exact_base &= sim.values[base] == 1.0
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and exact_base and elapsed < 1.0
    verdict(1, "similarity correctness", ok, f"max abs err {worst:.2e}, base exact {exact_base}, {elapsed:.2f}s")


def test_c2_mask_top_contract(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for tenths in range(1, 10):
        ratio = tenths / 10
        for total in range(4, 65):
            m = math.ceil(ratio * total - 1e-9)
            if m >= total:  # no valid plan hides every band
                continue
            plan = mrs_mask(rng.standard_normal((total, 2, 2)), ratio, rng)
            bad += len(plan.masked_bands) != m or plan.base_band not in plan.masked_bands
    tie = mask_top(0.5, SimilarityVector(np.array([1.0, 0.5, 0.5, 0.1]), 0)).masked_bands
    elapsed = time.perf_counter() - start
    ok = bad == 0 and tuple(tie) == (0, 1) and elapsed < 1.0
    verdict(2, "mask-top contract", ok, f"{bad} bad plans, tie case {tuple(tie)}, {elapsed:.2f}s")


def test_c3_comask_oracle(verdict):
    start = time.perf_counter()
    patch = np.random.default_rng(3).standard_normal((10, 3, 3))
    rate = comask_rate("spectral_random", patch, 0.2, (2, 7), 10_000, seed=3)
    expected = random_comask_probability(10, 2)
    dup = np.repeat(np.random.default_rng(4).standard_normal((5, 3, 3)), 2, axis=0)
    conditional = comask_rate("mrs", dup, 0.2, (4, 5), 2000, seed=5, given_base_in_pair=True)
    elapsed = time.perf_counter() - start
    ok = abs(rate - 1 / 45) <= 0.01 and expected == pytest.approx(1 / 45) and conditional == 1.0 and elapsed < 5.0
    verdict(3, "co-mask oracle", ok, f"random {rate:.4f} vs {1 / 45:.4f}, mrs duplicate {conditional}, {elapsed:.2f}s")


def test_c4_gradient_validity(verdict):
    start = time.perf_counter()
    worst = 0.0
    step = 1e-5
    for seed in range(10):
        rng = np.random.default_rng(seed)
        params = init_params(4, 2, 3, 3, 2, seed)
        params.vector += 0.5 * rng.standard_normal(params.size)
        data = rng.standard_normal((4, 2, 2))
        cases = [(mrs_mask(data, 0.5, rng), "reconstruction", None),
                 (spectral_random_mask(4, 0.25, rng), "reconstruction", None),
                 (None, "classification", 1 + seed % 2)]
        for plan, objective, label in cases:
            grad = autonet.backward(params, data, plan, objective, label)
            fd = np.empty(params.size)
            for i in range(params.size):
                v = params.vector.copy()
                v[i] += step
                up = autonet.forward_loss(params.like(v), data, plan, objective, label)
                v[i] -= 2 * step
                down = autonet.forward_loss(params.like(v), data, plan, objective, label)
                fd[i] = (up - down) / (2 * step)
            rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10.0
    verdict(4, "gradient validity", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_c5_masked_only_loss(verdict):
    rng = np.random.default_rng(5)
    changed = 0
    for _ in range(100):
        target = rng.standard_normal((8, 3, 3))
        recon = rng.standard_normal((8, 3, 3))
        plan = spectral_random_mask(8, 0.25, rng)
        base = recon_loss(recon, target, plan)
        mutated = recon.copy()
        mutated[list(plan.visible_bands)] += rng.standard_normal((len(plan.visible_bands), 3, 3)) * 100
        changed += recon_loss(mutated, target, plan) - base != 0.0
    verdict(5, "masked-only loss", changed == 0, f"{changed}/100 trials changed the loss")


def test_c6_reconstruction_difficulty(verdict):
    start = time.perf_counter()
    cfg = config.resolve(config.load(CONFIGS / "pretrain_direction.cfg"))
    cube, labels = load_or_generate(cfg)
    wins, finals = 0, []
    for seed in cfg["seeds"]:
        loss = {}
        for strategy in ("spectral_random", "mrs"):
            tc = train_config_from_config(cfg, strategy=strategy, seed=seed)
            data = prepare_data(cube, labels, tc, cfg["normalize"], cfg["pretrain_samples"])
            _, report = pretrain(tc, data.pretrain, num_classes=data.num_classes)
            loss[strategy] = report.pretrain_loss[-1]
        wins += loss["mrs"] > loss["spectral_random"]
        finals.append(f"{loss['mrs']:.3f}/{loss['spectral_random']:.3f}")
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and elapsed < 300
    verdict(6, "MRS pretrain loss exceeds spectral_random", ok,
            f"{wins}/5 seeds, mrs/random final losses {' '.join(finals)}, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def compare_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("compare")
    start = time.perf_counter()
    code = main(["compare", "--config", str(CONFIGS / "compare.cfg"), "--out", str(out)])
    return out, code, time.perf_counter() - start


def _read_compare(path):
    rows = path.read_text().splitlines()[1:]
    table = {}
    for row in rows:
        strategy, seed, oa = row.split(",")
        table.setdefault(int(seed), {})[strategy] = float(oa)
    return rows, table


def test_c7_downstream_direction(verdict, compare_run):
    out, code, elapsed = compare_run
    rows, table = _read_compare(out / "compare.csv")
    wins = sum(t["mrs"] >= t["spectral_random"] >= t["none"] for t in table.values())
    means = {s: np.mean([t[s] for t in table.values()]) for s in ("none", "spectral_random", "mrs")}
    ok = code == 0 and len(rows) == 15 and wins >= 4 and elapsed < 900
    detail = ", ".join(f"{s} {v:.3f}" for s, v in means.items())
    verdict(7, "OA mrs >= spectral_random >= none", ok, f"{wins}/5 seeds, mean OA {detail}, {elapsed:.0f}s")


def test_c8_compare_determinism(verdict, compare_run, tmp_path):
    out, code, _ = compare_run
    rerun = main(["compare", "--config", str(out / "config.echo"), "--out", str(tmp_path)])
    same = (tmp_path / "compare.csv").read_bytes() == (out / "compare.csv").read_bytes()
    verdict(8, "compare rerun from config.echo is byte-identical", code == 0 and rerun == 0 and same,
            f"exit codes {code}/{rerun}, identical {same}")
