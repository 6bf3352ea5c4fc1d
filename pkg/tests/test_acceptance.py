"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the lines; the
end-to-end generation check takes roughly a quarter of an hour on one CPU
core.
"""

import time

import numpy as np
import pytest
from oracles import balanced_sse_optimum, chamfer_loop, emd_enumerate

from msflow.ablation import boundary_sweep, format_table, stack_levels, train_cascade
from msflow.bridge import block_covariance
from msflow.cli import run
from msflow.dataset import toy_shapes
from msflow.geometry import downsample
from msflow.inference import SamplerConfig, generate, integrate_stage
from msflow.metrics import chamfer, emd, one_nna, one_nna_from_matrix, pairwise_distances
from msflow.model import Architecture, init_model
from msflow.schedule import new_schedule
from msflow.training import TrainConfig
from msflow.verify import check_two_path, empirical_block_cov


def report(number, passed, detail):
    print(f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}")


def lift_schedule(s, e, ratio, stage):
    """Schedule whose block into ``stage`` has start ``s`` and coarser end ``e``."""
    intervals = [(0.0, 1.0)] * stage + [(s, 1.0), (0.0, e)]
    return new_schedule(stage + 2, ratio, intervals, ratio ** (stage + 2))


def test_criterion_01_bridge_eigenvalues():
    grid = np.round(np.arange(1, 20) * 0.05, 2)
    tic = time.perf_counter()
    worst_err, worst_min, count = 0.0, np.inf, 0
    for d in (2, 4, 8):
        for k in (0, 1, 2):
            for s in grid:
                for e in grid[grid >= s]:
                    cov = block_covariance(k, lift_schedule(s, e, d, k))
                    dense = np.linalg.eigvalsh(cov.dense())
                    analytic = np.sort([cov.eigen_ones] + [cov.eigen_perp] * (d - 1))
                    worst_err = max(worst_err, float(np.max(np.abs(dense - analytic))))
                    worst_min = min(worst_min, float(dense.min()))
                    count += 1
    elapsed = time.perf_counter() - tic
    ok = worst_err <= 1e-10 and worst_min >= -1e-12 and elapsed < 1.0
    report(1, ok, f"{count} grid points, max eigenvalue error {worst_err:.1e}, "
                  f"min eigenvalue {worst_min:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_02_bridge_sampler():
    cases = [(0.6, 0.6, 2, 0), (0.3, 0.7, 4, 1), (0.5, 0.9, 8, 0)]
    rng = np.random.default_rng(2)
    tic = time.perf_counter()
    errs = []
    for s, e, d, k in cases:
        cov = block_covariance(k, lift_schedule(s, e, d, k))
        errs.append(float(np.max(np.abs(empirical_block_cov(cov, 100_000, rng) - cov.dense()))))
    first = block_covariance(0, lift_schedule(0.6, 0.6, 2, 0))
    elapsed = time.perf_counter() - tic
    ok = (abs(first.a - 0.16) < 1e-12 and abs(first.b - 0.08) < 1e-12
          and max(errs) <= 3e-2 and elapsed < 10.0)
    report(2, ok, f"(a, b) = ({first.a:.2f}, {first.b:.2f}); max entry errors "
                  f"{', '.join(f'{x:.1e}' for x in errs)}; {elapsed:.2f} s")
    assert ok


def test_criterion_03_two_path_alignment():
    rng = np.random.default_rng(3)
    cloud = toy_shapes("sphere", 64, 1, rng)[0]
    tic = time.perf_counter()
    results = []
    for intervals in ([(0.6, 1.0), (0.0, 0.6)], [(0.6, 1.0), (0.0, 1.0)]):
        sch = new_schedule(2, 4, intervals, 64)
        results.append(check_two_path(0, sch, 10_000, rng, cloud=cloud))
    elapsed = time.perf_counter() - tic
    ok = all(r.passed for r in results) and elapsed < 30.0
    report(3, ok, "; ".join(r.detail for r in results) + f"; {elapsed:.2f} s")
    assert ok


def test_criterion_04_downsampling():
    rng = np.random.default_rng(0)
    tic = time.perf_counter()
    balanced = monotone = True
    small, misses = 0, []
    for _ in range(1000):
        d = int(rng.choice([2, 4]))
        n = d * int(rng.integers(1, 256 // d + 1))
        cloud = rng.normal(size=(n, 3))
        pair = downsample(cloud, d)
        # rows are cluster-contiguous, so every cluster holds exactly d points
        # when fine is a permutation of the input and coarse holds the block means
        balanced &= (np.array_equal(np.sort(pair.order), np.arange(n))
                     and np.array_equal(pair.fine, cloud[pair.order])
                     and np.allclose(pair.coarse, pair.fine.reshape(-1, d, 3).mean(axis=1)))
        h = pair.history
        monotone &= all(b <= a + 1e-9 for a, b in zip(h, h[1:]))
        if n <= 8:
            small += 1
            sse = float(np.sum((pair.fine.reshape(-1, d, 3) - pair.coarse[:, None]) ** 2))
            opt = balanced_sse_optimum(cloud, d)
            if sse > 1.05 * opt + 1e-12:
                misses.append((n, d, sse / opt))
    elapsed = time.perf_counter() - tic
    ok = balanced and monotone and not misses and elapsed < 60.0
    report(4, ok, f"balanced={balanced}, monotone={monotone}, {small} small cases, "
                  f"{len(misses)} beyond 5% of optimum {misses}, {elapsed:.1f} s")
    assert ok


def _fd_rel_error(model, t, x, target, step=1e-4):
    _, grad = model.loss_and_grad(t, x, target)
    fd = np.empty_like(grad)
    for i in range(model.n_params):
        plus, minus = model.params.copy(), model.params.copy()
        plus[i] += step
        minus[i] -= step
        fd[i] = (model.copy(plus).loss_and_grad(t, x, target)[0]
                 - model.copy(minus).loss_and_grad(t, x, target)[0]) / (2 * step)
    return float(np.max(np.abs(grad - fd)) / np.max(np.abs(fd)))


def test_criterion_05_model():
    rng = np.random.default_rng(5)
    model = init_model(Architecture(hidden=32, time_dim=16), rng)
    model.blocks()["out_w"][...] = rng.normal(scale=0.3, size=(32, 3))
    x = rng.normal(size=(64, 3))
    equiv = 0.0
    for _ in range(100):
        perm = rng.permutation(64)
        t = rng.uniform()
        equiv = max(equiv, float(np.max(np.abs(model(t, x[perm]) - model(t, x)[perm]))))
    grad_err = 0.0
    for _ in range(20):
        arch = Architecture(hidden=int(rng.integers(2, 9)), time_dim=4)
        small = init_model(arch, rng, np.float64)
        small.blocks()["out_w"][...] = rng.normal(scale=0.5, size=(arch.hidden, 3))
        n = int(rng.integers(1, 5))
        grad_err = max(grad_err, _fd_rel_error(small, rng.uniform(), rng.normal(size=(n, 3)),
                                               rng.normal(size=(n, 3))))
    ok = equiv <= 1e-5 and grad_err < 1e-4
    report(5, ok, f"max equivariance error {equiv:.1e}; max gradient relative error {grad_err:.1e}")
    assert ok


def test_criterion_06_euler_order():
    sch = new_schedule(1, 2, [(0.0, 1.0)], 2)
    x = np.ones((2, 3))
    nfes = np.array([10, 100, 1000])
    errs = [float(np.max(np.abs(integrate_stage(lambda t, y, c=None: -y, x, 0, sch, n) - np.exp(-1.0))))
            for n in nfes]
    slope = float(np.polyfit(np.log(nfes), np.log(errs), 1)[0])
    ok = abs(slope + 1.0) <= 0.1
    report(6, ok, f"errors {', '.join(f'{e:.2e}' for e in errs)}; log-log slope {slope:.3f}")
    assert ok


def test_criterion_07_metric_oracles():
    rng = np.random.default_rng(7)
    cd_err = emd_err = 0.0
    for _ in range(50):
        n, m = rng.integers(1, 9, size=2)
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        cd_err = max(cd_err, abs(chamfer(a, b) - chamfer_loop(a, b)))
    for _ in range(30):
        n = int(rng.integers(1, 7))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        emd_err = max(emd_err, abs(emd(a, b) - emd_enumerate(a, b)))
    inside = 0
    for seed in range(100):
        pool = toy_shapes("sphere", 32, 200, seed)
        inside += 40.0 <= one_nna(pool[:100], pool[100:]) <= 60.0
    ok = cd_err <= 1e-12 and emd_err <= 1e-9 and inside >= 95
    report(7, ok, f"chamfer max error {cd_err:.1e}; emd max error {emd_err:.1e}; "
                  f"iid halves in [40, 60]% for {inside}/100 seeds")
    assert ok


# end-to-end settings for criterion 8
E2E_N = 256
E2E_TRAIN = 250
E2E_HELD = 50
E2E_ARCH = Architecture(hidden=64, time_dim=32)
E2E_CONFIGS = [
    TrainConfig(lr=1e-3, lr_decay=0.995, ema_decay=0.995, batch_size=32, epochs=500, seed=10),
    TrainConfig(lr=1e-3, lr_decay=0.995, ema_decay=0.999, grad_clip=0.01, batch_size=32, epochs=300, seed=11),
]
E2E_NFE = (100, 100)


@pytest.mark.slow
def test_criterion_08_end_to_end():
    tic = time.perf_counter()
    rng = np.random.default_rng(8)
    train = np.concatenate([toy_shapes("sphere", E2E_N, E2E_TRAIN, rng), toy_shapes("torus", E2E_N, E2E_TRAIN, rng)])
    held = np.concatenate([toy_shapes("sphere", E2E_N, E2E_HELD, rng), toy_shapes("torus", E2E_N, E2E_HELD, rng)])
    sch = new_schedule(2, 4, [(0.6, 1.0), (0.0, 1.0)], E2E_N)
    levels = stack_levels(train, 4, 2)
    prep = time.perf_counter() - tic
    fields, _ = train_cascade(levels, sch, E2E_ARCH, E2E_CONFIGS)
    train_time = time.perf_counter() - tic
    n_gen = len(held)
    config = SamplerConfig(E2E_NFE)
    gen = generate(fields, sch, config, np.random.default_rng(80), n_samples=n_gen)
    trained = one_nna_from_matrix(pairwise_distances(list(gen) + list(held)), n_gen)
    fresh = [init_model(E2E_ARCH, k) for k in range(2)]
    base = generate(fresh, sch, config, np.random.default_rng(80), n_samples=n_gen)
    baseline = one_nna_from_matrix(pairwise_distances(list(base) + list(held)), n_gen)
    total = time.perf_counter() - tic
    ok = trained <= 75.0 and trained < baseline and total <= 30 * 60
    report(8, ok, f"1-NNA(CD) trained {trained:.1f}% vs untrained {baseline:.1f}%; "
                  f"preprocessing {prep:.0f} s, training {train_time - prep:.0f} s, total {total:.0f} s")
    assert ok


def test_criterion_09_boundary_sweep():
    rng = np.random.default_rng(9)
    train = np.concatenate([toy_shapes("sphere", 64, 30, rng), toy_shapes("torus", 64, 30, rng)])
    held = np.concatenate([toy_shapes("sphere", 64, 15, rng), toy_shapes("torus", 64, 15, rng)])
    levels = stack_levels(train, 4, 2, n_init=1)
    arch = Architecture(hidden=16, time_dim=8)
    configs = [TrainConfig(lr=1e-3, epochs=10, batch_size=16, seed=90),
               TrainConfig(lr=1e-3, epochs=10, batch_size=16, grad_clip=0.01, seed=91)]
    rows = boundary_sweep(levels, held, arch, configs, boundaries=(0.0, 0.3, 0.6, 0.9), nfe=(20, 20))
    for line in format_table(rows).splitlines():
        print(f"[criterion 9]   {line}")
    ok = [r.value for r in rows] == [0.0, 0.3, 0.6, 0.9] and all(0 <= r.cd_1nna <= 100 for r in rows)
    report(9, ok, "boundary sweep table emitted for s_0 in {0.0, 0.3, 0.6, 0.9}")
    assert ok


def _pipeline(root):
    root.mkdir()
    cfg = root / "run.cfg"
    cfg.write_text("[run]\nseed = 5\n[schedule]\nstages = 2\nratio = 4\nintervals = 0.6:1.0, 0.0:1.0\n"
                   "n_points = 64\n[model]\nhidden = 8\ntime_dim = 4\n[train]\nepochs = 3\nbatch_size = 4\n"
                   "[sampler]\nnfe = 5, 5\n")
    steps = [
        ["toygen", "--kind", "sphere,torus", "--count", "5", "--n", "80", "--out", str(root / "toys"), "--seed", "4"],
        ["preprocess", "--in", str(root / "toys"), "--out", str(root / "store"), "--n", "64", "--d", "4",
         "--k", "1", "--replicas", "2", "--seed", "4"],
        ["train", "--store", str(root / "store"), "--config", str(cfg), "--stage", "1",
         "--out", str(root / "s1.ckpt"), "--losses", str(root / "l1.txt")],
        ["train", "--store", str(root / "store"), "--config", str(cfg), "--stage", "0",
         "--out", str(root / "s0.ckpt"), "--losses", str(root / "l0.txt")],
        ["sample", "--ckpts", str(root / "s0.ckpt"), str(root / "s1.ckpt"), "--config", str(cfg),
         "--count", "4", "--out", str(root / "gen")],
    ]
    return [run(argv) for argv in steps]


def test_criterion_10_determinism(tmp_path):
    codes = [_pipeline(tmp_path / name) for name in ("a", "b")]
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    kinds = {"store": any(f.parts[0] == "store" for f in files),
             "losses": any(f.name.startswith("l") and f.suffix == ".txt" for f in files),
             "samples": any(f.parts[0] == "gen" for f in files)}
    ok = all(c == 0 for cs in codes for c in cs) and not differing and all(kinds.values())
    report(10, ok, f"{len(files)} artifacts compared across two runs, differing: {differing or 'none'}")
    assert ok
