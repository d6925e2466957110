import math

import numpy as np
import pytest

from helpers import numeric_grad, rel_err
from voxcrf import crf
from voxcrf.autodiff import softmax_array


def instance(rng, n=6, L=3, colors=True):
    pts = rng.random((n, 3)) * 0.1
    cols = rng.random((n, 3)) * 30 if colors else None
    unary = rng.normal(size=(n, L))
    params = crf.CrfParams(w_s=1.3, w_b=0.7, mu=rng.random((L, L)), label_count=L)
    return unary, pts, cols, params


def literal_step(Q, unary, params, pts, cols):
    """One mean-field update written out term by term."""
    n, L = Q.shape
    out = np.zeros_like(Q)
    for i in range(n):
        for l in range(L):
            msg = 0.0
            for lp in range(L):
                s = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    d2 = sum((pts[i][k] - pts[j][k]) ** 2 for k in range(3))
                    ks = math.exp(-d2 / (2 * params.theta_gamma ** 2))
                    kb = 0.0
                    if cols is not None:
                        c2 = sum((cols[i][k] - cols[j][k]) ** 2 for k in range(3))
                        kb = math.exp(-d2 / (2 * params.theta_alpha ** 2) - c2 / (2 * params.theta_beta ** 2))
                    s += (params.w_s * ks + params.w_b * kb) * Q[j][lp]
                msg += params.mu[l][lp] * s
            out[i, l] = math.exp(-unary[i][l] - msg)
        out[i] /= out[i].sum()
    return out


def test_meanfield_step_matches_literal_oracle():
    rng = np.random.default_rng(0)
    unary, pts, cols, params = instance(rng, n=3, L=2)
    params = params.copy(mu=crf.potts(2))
    Q0 = softmax_array(-unary, axis=1)
    filters = crf.Filters.build(pts, cols, params, "bruteforce")
    got = crf.meanfield_step(Q0, unary, params, filters)
    np.testing.assert_allclose(got, literal_step(Q0, unary, params, pts, cols), atol=1e-10)
    state = crf.crf_forward(unary, pts, cols, params, 1, "bruteforce")
    np.testing.assert_allclose(state.Q, got, atol=1e-15)


def test_rows_normalized_after_every_iteration():
    rng = np.random.default_rng(1)
    unary, pts, cols, params = instance(rng, n=40, L=4)
    state = crf.crf_forward(unary * 5, pts, cols, params.copy(w_s=20.0, w_b=20.0), 8, "bruteforce")
    for Q in state.history:
        np.testing.assert_allclose(Q.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(Q > 0)


@pytest.mark.parametrize("iterations", [1, 3, 10])
def test_zero_coupling_is_softmax_of_negated_unaries(iterations):
    rng = np.random.default_rng(iterations)
    unary, pts, cols, params = instance(rng, n=30)
    ref = softmax_array(-unary, axis=1)
    for p in (params.copy(w_s=0.0, w_b=0.0), params.copy(mu=np.zeros((3, 3)))):
        for backend in ("bruteforce", "permutohedral"):
            Q = crf.crf_forward(unary, pts, cols, p, iterations, backend).Q
            assert np.abs(Q - ref).max() < 1e-12


def test_gaussian_filter_trivial_cases():
    out = crf.gaussian_filter(np.array([[2.0, 1.0]]), np.zeros((1, 3)))
    np.testing.assert_array_equal(out, 0.0)
    out = crf.gaussian_filter(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 3)))
    np.testing.assert_allclose(out, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)
    with pytest.raises(ValueError):
        crf.gaussian_filter(np.zeros((3, 1)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        crf.gaussian_filter(np.zeros((3, 1)), np.zeros((3, 3)), backend="fft")


def test_energy_matches_double_loop():
    rng = np.random.default_rng(2)
    unary, pts, cols, params = instance(rng, n=5)
    labels = rng.integers(0, 3, 5)
    e = sum(unary[i, labels[i]] for i in range(5))
    for i in range(5):
        for j in range(i + 1, 5):
            d2 = np.sum((pts[i] - pts[j]) ** 2)
            c2 = np.sum((cols[i] - cols[j]) ** 2)
            k = (params.w_s * math.exp(-d2 / (2 * params.theta_gamma ** 2))
                 + params.w_b * math.exp(-d2 / (2 * params.theta_alpha ** 2) - c2 / (2 * params.theta_beta ** 2)))
            e += params.mu[labels[i], labels[j]] * k
    assert crf.energy(labels, unary, params, pts, cols) == pytest.approx(e, abs=1e-10)


def test_energy_trivial_cases():
    rng = np.random.default_rng(3)
    unary, pts, cols, params = instance(rng, n=5)
    labels = rng.integers(0, 3, 5)
    zero = params.copy(mu=np.zeros((3, 3)))
    assert crf.energy(labels, unary, zero, pts, cols) == pytest.approx(unary[np.arange(5), labels].sum())
    two = crf.CrfParams(label_count=2)
    assert crf.energy([1, 1], np.zeros((2, 2)), two, np.zeros((2, 3))) == 0.0


def crf_loss_and_grads(unary, pts, cols, params, probe, iterations=2):
    state = crf.crf_forward(unary, pts, cols, params, iterations, "bruteforce")
    return float((state.Q * probe).sum()), crf.crf_backward(state, grad_Q=probe)


@pytest.mark.parametrize("colors", [True, False])
def test_backward_matches_finite_differences(colors):
    rng = np.random.default_rng(4)
    unary, pts, cols, params = instance(rng, n=10, L=3, colors=colors)
    probe = rng.normal(size=unary.shape)
    _, g = crf_loss_and_grads(unary, pts, cols, params, probe)

    def f():
        return crf_loss_and_grads(unary, pts, cols, params, probe)[0]

    assert rel_err(g["unary"], numeric_grad(f, unary)) < 1e-4
    assert rel_err(g["mu"], numeric_grad(f, params.mu)) < 1e-4
    for name in ("w_s", "w_b"):
        box = np.array([getattr(params, name)])

        def fw():
            return crf_loss_and_grads(unary, pts, cols, params.copy(**{name: float(box[0])}), probe)[0]

        num = numeric_grad(fw, box)[0]
        if name == "w_b" and not colors:
            assert g[name] == 0.0 and num == 0.0
        else:
            assert rel_err(g[name], num) < 1e-4


def test_backward_with_logit_gradient_matches_q_gradient():
    rng = np.random.default_rng(5)
    unary, pts, cols, params = instance(rng, n=8)
    state = crf.crf_forward(unary, pts, cols, params, 3, "bruteforce")
    gQ = rng.normal(size=unary.shape)
    gz = state.Q * (gQ - (gQ * state.Q).sum(axis=1, keepdims=True))
    a = crf.crf_backward(state, grad_Q=gQ)
    b = crf.crf_backward(state, grad_logits=gz)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-12)
    with pytest.raises(ValueError):
        crf.crf_backward(state)


def test_zero_upstream_gradient_gives_zero():
    rng = np.random.default_rng(6)
    unary, pts, cols, params = instance(rng)
    state = crf.crf_forward(unary, pts, cols, params, 2, "bruteforce")
    g = crf.crf_backward(state, grad_Q=np.zeros_like(unary))
    assert not np.any(g["unary"]) and g["w_s"] == 0 and g["w_b"] == 0 and not np.any(g["mu"])


def test_more_iterations_settle_on_a_clear_instance():
    rng = np.random.default_rng(7)
    pts = rng.random((300, 3)) * [1.0, 1.0, 0.2]
    labels = (pts[:, 0] > 0.5).astype(int)
    cols = np.where(labels[:, None] == 1, 200.0, 60.0) + rng.normal(0, 5, (300, 3))
    unary = -(2.0 * np.eye(2)[labels] + rng.normal(0, 1.0, (300, 2)))
    params = crf.CrfParams(label_count=2)
    q10 = crf.crf_forward(unary, pts, cols, params, 10, "bruteforce").Q
    q20 = crf.crf_forward(unary, pts, cols, params, 20, "bruteforce").Q
    assert np.abs(q10 - q20).max() < 1e-3


def test_defaults_and_validation():
    assert crf.TRAIN_ITERATIONS == 5 and crf.TEST_ITERATIONS == 10
    p = crf.CrfParams(label_count=3)
    assert (p.w_s, p.w_b, p.theta_alpha, p.theta_beta, p.theta_gamma) == (3.0, 5.0, 0.8, 11.0, 0.05)
    np.testing.assert_array_equal(p.mu, 1 - np.eye(3))
    with pytest.raises(ValueError):
        crf.CrfParams()
    with pytest.raises(ValueError):
        crf.CrfParams(mu=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        crf.CrfParams(label_count=2, theta_gamma=0.0)
    with pytest.raises(ValueError):
        crf.crf_forward(np.zeros((2, 3)), np.zeros((2, 3)), None, crf.CrfParams(label_count=2))
    with pytest.raises(ValueError):
        crf.crf_forward(np.zeros((2, 2)), np.zeros((2, 3)), None, crf.CrfParams(label_count=2), 0)
    assert crf.resolve_backend("lattice") == "permutohedral"
