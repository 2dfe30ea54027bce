import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from potential_marl.approx import (
    ConstantModel,
    DegeneratePolicyError,
    DenseNet,
    GaussianPolicy,
    NumericError,
    OptimizerState,
    PolyBasis,
    clip_by_global_norm,
    load_model,
    optimizer_step,
    policy_score,
    save_model,
)

from conftest import fd_grad, rel_err


def small_net(rng, dims=(3, 5, 4, 2), hidden="tanh"):
    return DenseNet.create(list(dims), rng, hidden=hidden)


def test_forward_shapes(rng):
    net = small_net(rng)
    assert net.forward(np.zeros(3)).shape == (2,)
    assert net.forward(np.zeros((7, 3))).shape == (7, 2)


def test_param_roundtrip(rng):
    net = small_net(rng)
    p = net.get_params()
    assert p.shape == (net.n_params,)
    other = small_net(np.random.default_rng(9))
    other.set_params(p)
    np.testing.assert_array_equal(other.forward(np.ones(3)), net.forward(np.ones(3)))
    with pytest.raises(ValueError):
        net.set_params(p[:-1])


def test_input_and_param_gradients_match_fd(rng):
    net = small_net(rng)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    pg, ig = net.gradients(x, up)
    ig_fd = fd_grad(lambda z: float(np.sum(net.forward(z) * up)), x)
    assert rel_err(ig, ig_fd) < 1e-6

    p0 = net.get_params()

    def loss(p):
        net.set_params(p)
        return float(np.sum(net.forward(x) * up))

    pg_fd = fd_grad(loss, p0)
    net.set_params(p0)
    assert rel_err(pg, pg_fd) < 1e-6


def test_relu_gradients(rng):
    net = small_net(rng, hidden="relu")
    x = rng.normal(size=(3, 3))
    up = np.ones((3, 2))
    _, ig = net.gradients(x, up)
    assert rel_err(ig, fd_grad(lambda z: float(net.forward(z).sum()), x)) < 1e-5


def test_mixed_param_grad(rng):
    net = small_net(rng, dims=(3, 6, 1))
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))
    p0 = net.get_params()

    def inner(p):
        net.set_params(p)
        return float(np.sum(net.gradients(x, np.ones((5, 1)))[1] * w))

    fd = fd_grad(inner, p0, h=1e-5)
    net.set_params(p0)
    assert rel_err(net.mixed_param_grad(x, w), fd) < 1e-4


def test_nonfinite_input_raises(rng):
    net = small_net(rng)
    with pytest.raises(NumericError):
        net.forward(np.array([np.nan, 0.0, 0.0]))


def test_bad_activation():
    with pytest.raises(ValueError):
        DenseNet.create([2, 3, 2], hidden="sigmoid", rng=np.random.default_rng(0))


def test_poly_basis_features_and_grads(rng):
    pb = PolyBasis(2, 2, rng.normal(size=6))
    assert pb.feature_names(["a", "b"]) == ["1", "a", "b", "a^2", "a*b", "b^2"]
    x = rng.normal(size=(4, 2))
    _, ig = pb.gradients(x, np.ones(4))
    assert rel_err(ig, fd_grad(lambda z: float(pb.forward(z).sum()), x)) < 1e-7
    w = rng.normal(size=(4, 2))

    def inner(c):
        return float(np.sum(PolyBasis(2, 2, c).gradients(x, np.ones(4))[1] * w))

    assert rel_err(pb.mixed_param_grad(x, w), fd_grad(inner, pb.coef)) < 1e-7


def test_poly_least_squares_exact(rng):
    x = rng.normal(size=(50, 2))
    y = 1 + 2 * x[:, 0] - x[:, 0] * x[:, 1]
    pb = PolyBasis(2)
    assert pb.fit_least_squares(x, y) < 1e-20
    np.testing.assert_allclose(pb.coef, [1, 2, 0, 0, -1, 0], atol=1e-10)


@pytest.mark.parametrize("kind", ["dense", "poly", "constant"])
@pytest.mark.parametrize("suffix", [".json", ".ckpt"])
def test_checkpoint_roundtrip(tmp_path, rng, kind, suffix):
    model = {"dense": small_net(rng), "poly": PolyBasis(3, 2, rng.normal(size=10)), "constant": ConstantModel(3, rng.normal(size=2))}[kind]
    path = tmp_path / f"m{suffix}"
    save_model(model, path)
    back = load_model(path)
    x = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(back.forward(x), model.forward(x))


def test_checkpoint_rejects_bad_version(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_model(small_net(rng), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_model(path)


def make_policy(rng, squash="tanh", sigma=0.3):
    return GaussianPolicy(DenseNet.create([3, 8, 2], rng), sigma, [-1.0, 0.0], [1.0, 2.0], squash)


@pytest.mark.parametrize("squash", ["tanh", "none"])
def test_score_matches_fd_of_log_density(rng, squash):
    pol = make_policy(rng, squash)
    s = rng.normal(size=3)
    a = pol.sample(s, rng)
    u = pol.from_action(a)
    p0 = pol.get_params()

    def logp(p):
        pol.set_params(p)
        return float(pol.log_density_pre(s, u))

    fd = fd_grad(logp, p0)
    pol.set_params(p0)
    assert rel_err(policy_score(pol, s, a), fd) < 1e-6


def test_score_batched_rows(rng):
    pol = make_policy(rng)
    s = rng.normal(size=(4, 3))
    a = pol.sample(s, rng)
    rows = pol.score(s, a)
    assert rows.shape == (4, pol.n_params)
    np.testing.assert_allclose(rows[2], pol.score(s[2], a[2]), atol=1e-12)


def test_score_zero_sigma_raises(rng):
    pol = make_policy(rng, sigma=0.0)
    with pytest.raises(DegeneratePolicyError):
        pol.score(np.zeros(3), np.zeros(2) + 0.5)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_samples_stay_in_box(seed):
    r = np.random.default_rng(seed)
    pol = make_policy(r, sigma=5.0)
    a = pol.sample(r.normal(size=(20, 3)) * 10, r)
    assert np.all(a >= pol.action_low) and np.all(a <= pol.action_high)


def test_score_has_zero_mean(rng):
    pol = make_policy(rng)
    s = np.tile(rng.normal(size=3), (4000, 1))
    rows = pol.score(s, pol.sample(s, rng))
    se = rows.std(axis=0) / np.sqrt(len(rows))
    assert np.all(np.abs(rows.mean(axis=0)) < 5 * se + 1e-12)


def test_adam_minimises_quadratic():
    st_ = OptimizerState("adam", 0.1, clip_norm=None)
    p = np.array([3.0, -2.0])
    for _ in range(500):
        p = optimizer_step(st_, p, 2 * p)
    assert np.linalg.norm(p) < 1e-3


def test_optimizer_rejects_nonfinite():
    with pytest.raises(NumericError):
        optimizer_step(OptimizerState(), np.zeros(2), np.array([np.inf, 0.0]))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 10))
def test_clip_bounds_norm(vals, m):
    g = clip_by_global_norm(np.array(vals), m)
    assert np.linalg.norm(g) <= m * (1 + 1e-12) or np.linalg.norm(g) == np.linalg.norm(vals)
