import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msflow.model import Architecture, init_model, load_checkpoint, save_checkpoint, time_embedding


def _perturbed(arch, seed, dtype=np.float32):
    """Random model with a non-zero output layer."""
    model = init_model(arch, seed, dtype)
    rng = np.random.default_rng(seed + 1)
    blocks = model.blocks()
    blocks["out_w"][...] = rng.normal(scale=0.5, size=blocks["out_w"].shape)
    blocks["out_b"][...] = rng.normal(scale=0.1, size=3)
    return model


def test_fresh_model_is_zero_field(rng):
    model = init_model(Architecture(hidden=16, time_dim=8), rng)
    np.testing.assert_array_equal(model(0.3, rng.normal(size=(10, 3))), 0.0)


def test_init_determinism():
    arch = Architecture(hidden=8, time_dim=4)
    np.testing.assert_array_equal(init_model(arch, 1).params, init_model(arch, 1).params)
    assert not np.array_equal(init_model(arch, 1).params, init_model(arch, 2).params)


@pytest.mark.parametrize("kw", [{"hidden": 0}, {"time_dim": 3}, {"n_classes": -1}, {"max_freq": 0.5}])
def test_invalid_arch(kw):
    with pytest.raises(ValueError):
        Architecture(**kw)


def test_time_embedding():
    emb = time_embedding(np.array([0.0, 0.5]), 8)
    assert emb.shape == (2, 8)
    np.testing.assert_array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.all(np.isfinite(emb))


@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    model = _perturbed(Architecture(hidden=16, time_dim=8), seed)
    x = rng.normal(size=(12, 3))
    perm = rng.permutation(12)
    t = rng.uniform()
    np.testing.assert_allclose(model(t, x[perm]), model(t, x)[perm], atol=1e-5)


def test_duplicate_points_same_velocity(rng):
    model = _perturbed(Architecture(hidden=16, time_dim=8), 3)
    x = rng.normal(size=(6, 3))
    x[4] = x[1]
    v = model(0.5, x)
    np.testing.assert_array_equal(v[4], v[1])


def test_batch_matches_single(rng):
    model = _perturbed(Architecture(hidden=16, time_dim=8), 4)
    x = rng.normal(size=(3, 10, 3))
    t = np.array([0.1, 0.5, 0.9])
    batched = model(t, x)
    for i in range(3):
        np.testing.assert_allclose(batched[i], model(t[i], x[i]), atol=1e-6)


def test_rejects_bad_input():
    model = init_model(Architecture(hidden=4, time_dim=4), 0)
    with pytest.raises(ValueError):
        model(0.0, np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        model(0.0, np.zeros((3, 2)))
    with pytest.raises(ValueError, match="unconditional"):
        model(0.0, np.zeros((3, 3)), condition=0)
    with pytest.raises(ValueError):
        model.loss_and_grad(0.0, np.zeros((3, 3)), np.zeros((4, 3)))


def test_loss_of_fresh_model(rng):
    model = init_model(Architecture(hidden=8, time_dim=4), rng)
    v = rng.normal(size=(5, 3))
    loss, _ = model.loss_and_grad(0.2, rng.normal(size=(5, 3)), v)
    assert loss == pytest.approx(float(np.mean(v**2)), rel=1e-6)


def test_zero_loss_zero_grad(rng):
    model = _perturbed(Architecture(hidden=8, time_dim=4), 5, np.float64)
    x = rng.normal(size=(5, 3))
    loss, grad = model.loss_and_grad(0.4, x, model(0.4, x))
    assert loss == 0.0
    assert np.all(grad == 0.0)


def _fd_check(model, t, x, target, condition=None, step=1e-4):
    _, grad = model.loss_and_grad(t, x, target, condition)
    fd = np.empty_like(grad)
    for i in range(model.n_params):
        plus, minus = model.params.copy(), model.params.copy()
        plus[i] += step
        minus[i] -= step
        fd[i] = (model.copy(plus).loss_and_grad(t, x, target, condition)[0]
                 - model.copy(minus).loss_and_grad(t, x, target, condition)[0]) / (2 * step)
    return np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    classes = seed % 2 * 3
    model = _perturbed(Architecture(hidden=6, time_dim=4, n_classes=classes), seed, np.float64)
    x = rng.normal(size=(2, 4, 3))
    target = rng.normal(size=(2, 4, 3))
    # seed 3 exercises the learned "no condition" row
    cond = np.array([0, classes - 1]) if classes and seed != 3 else None
    assert _fd_check(model, rng.uniform(size=2), x, target, cond) < 1e-4


def test_conditioning_changes_output(rng):
    model = _perturbed(Architecture(hidden=8, time_dim=4, n_classes=2), 2)
    x = rng.normal(size=(5, 3))
    assert not np.allclose(model(0.5, x, 0), model(0.5, x, 1))
    np.testing.assert_array_equal(model(0.5, x), model(0.5, x, None))
    with pytest.raises(ValueError):
        model(0.5, x, 2)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = _perturbed(Architecture(hidden=8, time_dim=4, n_classes=2), 6)
    ema = rng.normal(size=model.n_params).astype(np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, ema, {"stage": 1})
    live, ema_model, meta = load_checkpoint(path)
    assert live.arch == model.arch
    np.testing.assert_array_equal(live.params, model.params)
    np.testing.assert_array_equal(ema_model.params, ema)
    assert meta == {"stage": "1"}
    header = path.read_bytes().split(b"\nend\n")[0].decode()
    assert "block = live/enc1_wx 3x8" in header and "block = ema/out_b 3" in header

    save_checkpoint(path, model)
    assert load_checkpoint(path)[1] is None


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"hello\nend\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
