"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also collected into the
terminal summary) and then asserts.  Criteria 8 and 9 run the full desk
grid twice and take a while on CPU.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from mcsg.config import derive_seed, desk_profile, grid_labels
from mcsg.experiment import ExperimentRunner, run_grid
from mcsg.gan.losses import gan_losses
from mcsg.gan.networks import GanConfig, Variant, build_networks, count_parameters
from mcsg.gan.ops import demodulated_weights, upfirdn2d
from mcsg.gan.training import one_hot_tensor
from mcsg.segmentation import dsc_score, soft_dsc_loss
from mcsg.stats import (
    GaussianStats,
    frechet_distance,
    friedman_test,
    nemenyi_directions,
    nemenyi_q,
    rank_rows,
    read_direction_report,
)
from mcsg.synthesis import load_generated, sample_msg_masks
from conftest import ACCEPTANCE_KEY
from oracles import brute_force_friedman, central_difference, naive_upfirdn2d, rel_err

# Two-sided Nemenyi critical values at alpha = 0.05 as commonly tabulated, k = 2..10.
PUBLISHED_Q05 = (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164)


@pytest.fixture
def verdict(request):
    def report(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append(line)
        assert ok, line

    return report


# -- 1. Frechet distance ----------------------------------------------------------------------


def test_criterion_1_frechet_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(2, 17))
        mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
        v1, v2 = rng.uniform(0.05, 4, d), rng.uniform(0.05, 4, d)
        closed = float(np.sum((mu1 - mu2) ** 2) + np.sum(v1 + v2 - 2 * np.sqrt(v1 * v2)))
        got = frechet_distance(GaussianStats(mu1, np.diag(v1)), GaussianStats(mu2, np.diag(v2)))
        worst = max(worst, abs(got - closed))
    m = rng.normal(size=(6, 6))
    same = GaussianStats(rng.normal(size=6), m @ m.T)
    identical = frechet_distance(same, same)
    shift = frechet_distance(GaussianStats([0.0], [[1.0]]), GaussianStats([2.0], [[1.0]]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and identical < 1e-8 and shift == 4.0 and elapsed < 5
    verdict(1, ok, f"max |err| {worst:.1e}, identical {identical:.1e}, 1-D shift {shift!r}, {elapsed:.2f}s")


# -- 2. upfirdn2d ---------------------------------------------------------------------------------


def test_criterion_2_upfirdn2d_differential(verdict):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst, done = 0.0, 0
    while done < 500:
        h, w = rng.integers(1, 17, 2)
        up, down = rng.integers(1, 4, 2)
        taps = int(rng.integers(1, 6))
        kernel = rng.normal(size=taps) if rng.random() < 0.5 else rng.normal(size=(taps, int(rng.integers(1, 6))))
        kh, kw = (taps, taps) if kernel.ndim == 1 else kernel.shape
        pad = tuple(int(p) for p in rng.integers(-2, 5, 4))
        if (h * up + pad[0] + pad[1] - kh) < 0 or (w * up + pad[2] + pad[3] - kw) < 0:
            continue
        x = rng.normal(size=(h, w))
        got = upfirdn2d(torch.from_numpy(x), torch.from_numpy(kernel), int(up), int(down), pad).numpy()
        ref = naive_upfirdn2d(x, kernel, int(up), int(down), pad)
        assert got.shape == ref.shape
        worst = max(worst, float(np.abs(got - ref).max()))
        done += 1
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-6 and elapsed < 30, f"500 configurations, max |diff| {worst:.1e}, {elapsed:.2f}s")


# -- 3. demodulation ----------------------------------------------------------------------------------


def test_criterion_3_demodulation_norms(verdict):
    g = torch.Generator().manual_seed(11)
    lo, hi = math.inf, -math.inf
    for _ in range(100):
        o, i = torch.randint(1, 33, (2,), generator=g).tolist()
        k = [1, 3][int(torch.randint(0, 2, (1,), generator=g))]
        w = torch.randn(o, i, k, k, generator=g)
        s = torch.randn(2, i, generator=g) * 3
        norms = demodulated_weights(w, s).square().sum(dim=[2, 3, 4]).sqrt()
        lo, hi = min(lo, float(norms.min())), max(hi, float(norms.max()))
    ok = 1 - 1e-3 <= lo and hi <= 1 + 1e-3
    verdict(3, ok, f"100 draws, per-output-channel norms in [{lo:.6f}, {hi:.6f}]")


# -- 4. gradient checks -----------------------------------------------------------------------------


def _param_rel_err(module, loss_fn, max_params=40, h=1e-6):
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in module.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            num, ana = [], []
            for i in range(min(flat.numel(), max_params)):
                old = flat[i].item()
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                num.append((fp - fm) / (2 * h))
                ana.append(grad[i].item())
            num, ana = torch.tensor(num), torch.tensor(ana)
            if ana.abs().max() < 1e-10 and num.abs().max() < 1e-8:
                continue
            worst = max(worst, rel_err(ana, num))
    return worst


def test_criterion_4_gradient_checks(verdict):
    rng = np.random.default_rng(5)
    logits = torch.tensor(rng.normal(size=(4, 8, 8)), dtype=torch.float64, requires_grad=True)
    target = one_hot_tensor(torch.from_numpy(rng.integers(0, 4, (1, 8, 8))), 4)[0].double()

    def dice(z):
        return soft_dsc_loss(torch.softmax(z, 0), target)

    dice(logits).backward()
    errs = {"soft_dsc": rel_err(logits.grad, central_difference(dice, logits.detach().clone(), h=1e-6))}

    cfg = GanConfig(
        variant="BSG", resolution=8, latent_dim=4, mapping_layers=1, channel_base=16, channel_max=2,
        image_channels=1, mask_channels=2, batch_size=2, seed=0,
    )
    G, D = (m.double() for m in build_networks(cfg))
    assert count_parameters(G) <= 1000 and count_parameters(D) <= 1000
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in list(G.parameters()) + list(D.parameters()):
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    z = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    real = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    errs["D_loss"] = _param_rel_err(D, lambda: gan_losses(D(real), D(G(z, noise_mode="const").detach()))[0])
    errs["G_loss"] = _param_rel_err(G, lambda: gan_losses(D(real), D(G(z, noise_mode="const")))[1])
    ok = all(e < 1e-4 for e in errs.values())
    verdict(4, ok, ", ".join(f"{k} rel err {v:.1e}" for k, v in errs.items()))


# -- 5. Dice identities -----------------------------------------------------------------------------


def test_criterion_5_dice_identities(verdict):
    rng = np.random.default_rng(0)
    m = rng.integers(0, 4, (32, 32))
    identical = min(dsc_score(m, m, c) for c in (1, 2, 3))
    a = np.zeros((8, 8), int)
    b = np.zeros((8, 8), int)
    a[:4], b[4:] = 1, 1
    disjoint = dsc_score(a, b, 1)
    empty = one_hot_tensor(torch.zeros(1, 8, 8, dtype=torch.long), 4)[0].double()
    both_empty = float(soft_dsc_loss(empty, empty))
    ok = identical == 1.0 and disjoint == 0.0 and both_empty == -1.0
    verdict(5, ok, f"identical {identical}, disjoint {disjoint}, soft loss on empty masks {both_empty}")


# -- 6. statistics ------------------------------------------------------------------------------------


def _table_ok(dm) -> bool:
    e = dm.entries
    return bool(np.array_equal(e, -e.T) and dm.scores.sum() == 0 and np.array_equal(dm.scores, e.sum(1)))


def test_criterion_6_statistics_oracle(verdict):
    rng = np.random.default_rng(99)
    exact = tables_ok = 0
    for t in range(100):
        n, k = int(rng.integers(2, 11)), int(rng.integers(2, 7))
        x = rng.integers(0, 4, (n, k)).astype(float) if t % 2 else rng.random((n, k))
        res = friedman_test(x)
        chi2, rbar = brute_force_friedman(x)
        same_ranks = np.array_equal(rank_rows(x).mean(0), rbar) and np.array_equal(res.avg_ranks, rbar)
        same_chi2 = res.chi2 == chi2 if not res.degenerate else bool(np.all(x == x[:, :1]))
        exact += bool(same_ranks and same_chi2)
        tables_ok += _table_ok(nemenyi_directions(x))
    tied = nemenyi_directions(np.full((10, 6), 0.5))
    q_err = max(abs(nemenyi_q(k) - ref) for k, ref in zip(range(2, 11), PUBLISHED_Q05))
    ok = exact == 100 and tables_ok == 100 and not tied.entries.any() and _table_ok(tied) and q_err <= 1e-3
    verdict(
        6, ok,
        f"Friedman exact on {exact}/100 tables, valid direction tables {tables_ok}/100, "
        f"all-tied zero matrix {not tied.entries.any()}, max |q - published| {q_err:.1e}",
    )


# -- 7. arity ---------------------------------------------------------------------------------------


def test_criterion_7_variant_arity(verdict):
    common = dict(resolution=16, latent_dim=8, mapping_layers=1, channel_base=64, channel_max=8, mask_channels=4)
    x = torch.randn(2, 1, 16, 16)
    m = one_hot_tensor(torch.randint(0, 4, (2, 16, 16)), 4)
    checks = {}
    G, D = build_networks(GanConfig(variant="BSG", image_channels=1, **common))
    checks["B-SG G -> (x, m)"] = G(torch.randn(2, 8)).shape[1] == 5
    checks["B-SG D(x, m)"] = D(torch.cat([x, m * 2 - 1], 1)).shape == (2,)
    G, D = build_networks(GanConfig(variant="MSG", image_channels=0, **common))
    checks["M-SG G -> m"] = G(torch.randn(2, 8)).shape[1] == 4
    checks["M-SG D(m)"] = D(m).shape == (2,)
    G, D = build_networks(GanConfig(variant="CSG", image_channels=1, **common))
    checks["C-SG G(z | m) -> x"] = G(torch.randn(2, 8), m).shape[1] == 1
    checks["C-SG D(x | m)"] = D(x, m).shape == (2,)
    try:
        G(torch.randn(2, 8))
        checks["C-SG without condition raises TypeError"] = False
    except TypeError:
        checks["C-SG without condition raises TypeError"] = True
    failed = [k for k, v in checks.items() if not v]
    verdict(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} signatures" + (f", failed {failed}" if failed else ""))


# -- 8 / 9. desk grid -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """The full desk grid, run twice from scratch with the same master seed."""
    runs = []
    for name in ("first", "second"):
        cfg = desk_profile(out=str(tmp_path_factory.mktemp(name)))
        t0 = time.perf_counter()
        summary = run_grid(cfg)
        runs.append((cfg, summary, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_criterion_8_desk_grid(desk_runs, verdict):
    cfg, summary, elapsed = desk_runs[0]
    by_label = {r["label"]: r for r in summary.records}
    bl = by_label["BL + w.o."]["mean_dsc"]

    runner = ExperimentRunner(cfg)
    data = runner.data()
    seed = derive_seed(cfg.seed, "generate-MCSG")
    masks_exact = True
    stage1 = sample_msg_masks(runner.gan(Variant.MSG), 500, data.generated_slices, seed, cfg.truncation_psi)
    for count in (20, 50, 100, 200, 400, 500):
        samples = sorted(load_generated(runner.generated_root("MCSG", count)), key=lambda s: (s.synthetic_patient_id, s.slice_index))
        saved = np.stack([s.mask for s in samples]).reshape(count, data.generated_slices, *stage1.shape[2:])
        masks_exact &= bool(np.array_equal(saved, stage1[:count]))
    assert runner.counters.get("gan_trainings", 0) == 0 and runner.counters.get("generations", 0) == 0

    dm = summary.directions
    on_disk = read_direction_report((runner.case_dir / "directions.csv").read_text())
    stats_ok = (
        dm.entries.shape == (26, 26)
        and dm.methods == grid_labels()
        and _table_ok(dm)
        and np.array_equal(on_disk.entries, dm.entries)
        and np.array_equal(on_disk.scores, dm.entries.sum(1))
    )
    ok = elapsed < 8 * 3600 and len(summary.records) == 26 and bl >= 0.80 and masks_exact and stats_ok
    verdict(
        8, ok,
        f"26-point grid in {elapsed / 60:.1f} min (CPU), BL mean DSC {bl:.4f}, "
        f"stage-1 masks bit-exact {masks_exact}, 26x26 direction table valid {stats_ok}",
    )


def _csv_digest(path: Path) -> str:
    text = path.read_text()
    if path.name.endswith("_steplog.csv"):
        # wall-clock seconds are the only non-deterministic column
        rows = list(csv.DictReader(io.StringIO(text)))
        text = json.dumps([{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    return hashlib.sha256(text.encode()).hexdigest()


@pytest.mark.slow
def test_criterion_9_determinism(desk_runs, verdict):
    (cfg_a, sum_a, _), (cfg_b, sum_b, _) = desk_runs
    dsc_a = np.array([r["mean_dsc"] for r in sum_a.records])
    dsc_b = np.array([r["mean_dsc"] for r in sum_b.records])
    dsc_diff = float(np.abs(dsc_a - dsc_b).max())
    root_a, root_b = Path(cfg_a.out) / cfg_a.case_id, Path(cfg_b.out) / cfg_b.case_id
    files_a = sorted(p.relative_to(root_a) for p in root_a.rglob("*.csv"))
    files_b = sorted(p.relative_to(root_b) for p in root_b.rglob("*.csv"))
    differing = [str(p) for p in files_a if _csv_digest(root_a / p) != _csv_digest(root_b / p)]
    ok = dsc_diff <= 1e-6 and files_a == files_b and not differing and len(files_a) > 0
    verdict(
        9, ok,
        f"max |DSC mean diff| {dsc_diff:.1e}, {len(files_a) - len(differing)}/{len(files_a)} CSV files identical"
        + (f", differing {differing[:3]}" if differing else ""),
    )
