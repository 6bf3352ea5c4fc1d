import numpy as np

from msflow.ablation import (
    boundary_sweep,
    format_table,
    nfe_study,
    random_pair_levels,
    stack_levels,
    train_cascade,
)
from msflow.bridge import BridgeCovariance
from msflow.dataset import toy_shapes
from msflow.model import Architecture
from msflow.schedule import new_schedule
from msflow.training import TrainConfig
from msflow.verify import check_eigenvalues, check_sampler, raw_block_covariance, run_checks


def test_run_checks_pass_for_valid_schedule():
    sch = new_schedule(3, 2, [(0.6, 1.0), (0.5, 0.6), (0.0, 1.0)], 64)
    results = run_checks(sch, 0, sampler_draws=20_000, two_path_draws=4000)
    assert len(results) == 6
    assert all(r.passed for r in results), [r.line() for r in results]


def test_eigen_check_flags_violation():
    res = check_eigenvalues(raw_block_covariance(0.9, 0.5, 4, 0))
    assert not res.passed and "min eigenvalue = -" in res.line()


def test_sampler_check_passes(rng):
    cov = BridgeCovariance(0.5, 0.1, 2)
    assert check_sampler(cov, 50_000, rng).passed


def test_random_pair_levels(rng):
    clouds = toy_shapes("sphere", 16, 2, 0)
    levels = random_pair_levels(clouds, 4, 2, rng)
    assert [lv.shape for lv in levels] == [(2, 16, 3), (2, 4, 3)]
    np.testing.assert_allclose(levels[1], levels[0].reshape(2, 4, 4, 3).mean(2))


def test_sweep_and_nfe_tables():
    clouds = np.concatenate([toy_shapes("sphere", 64, 6, 0), toy_shapes("torus", 64, 6, 1)])
    held = np.concatenate([toy_shapes("sphere", 64, 3, 2), toy_shapes("torus", 64, 3, 3)])
    levels = stack_levels(clouds, 4, 2, n_init=1)
    arch = Architecture(hidden=8, time_dim=4)
    configs = [TrainConfig(epochs=1, batch_size=6, seed=k) for k in range(2)]
    rows = boundary_sweep(levels, held, arch, configs, boundaries=(0.0, 0.6), nfe=(2, 2))
    assert [r.value for r in rows] == [0.0, 0.6]
    table = format_table(rows)
    assert table.splitlines()[0].split()[0] == "s_0" and len(table.splitlines()) == 3

    sch = new_schedule(2, 4, [(0.6, 1.0), (0.0, 1.0)], 64)
    fields, _ = train_cascade(levels, sch, arch, configs)
    rows = nfe_study(fields, sch, held, [(1, 1), (4, 4)])
    assert "4,4" in format_table(rows)
