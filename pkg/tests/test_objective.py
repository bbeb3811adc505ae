import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import circulant_blur_matrix, dft_matrix, pywt_synthesis_matrix, random_problems
from proxaccel.forward_models import MatrixModel, make_gaussian_blur, make_inpainting, make_partial_fourier
from proxaccel.objective import (
    NMSE_FLOOR_DB,
    DiagScaling,
    LassoProblem,
    estimate_lipschitz,
    fidelity,
    gradient,
    nmse,
    nmse_db,
    objective,
    prox_scaled,
    soft_threshold,
)
from proxaccel.wavelet import WaveletSpec, dwt_forward, get_wavelet, subband_groups

vals = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _brute_prox(v: float, tau: float) -> float:
    """argmin_z tau*|z| + 0.5*(z - v)^2 by grid search, refined once."""
    grid = np.linspace(v - abs(v) - tau - 1, v + abs(v) + tau + 1, 20001)
    z = grid[np.argmin(tau * np.abs(grid) + 0.5 * (grid - v) ** 2)]
    step = grid[1] - grid[0]
    fine = np.linspace(z - step, z + step, 2001)
    return float(fine[np.argmin(tau * np.abs(fine) + 0.5 * (fine - v) ** 2)])


def _problem8(kind: str, seed: int, lam=0.1) -> LassoProblem:
    rng = np.random.default_rng(seed)
    if kind == "inpainting":
        model = make_inpainting((8, 8), 0.5, seed)
    elif kind == "fourier":
        model = make_partial_fourier((8, 8), 0.5, seed)
    else:
        model = make_gaussian_blur((8, 8), 1.5)
    img = rng.uniform(size=(8, 8))
    y = model.apply(model.transform.forward(img))
    y = y + 0.05 * rng.standard_normal(y.shape)
    return LassoProblem(model, y, lam)


def test_soft_threshold_examples():
    np.testing.assert_array_equal(soft_threshold(np.array([3.0, -0.5, 1.0]), 1.0), [2.0, 0.0, 0.0])
    x = np.array([1.5, -2.0, 0.0, 7.0])
    np.testing.assert_array_equal(soft_threshold(x, 0.0), x)
    np.testing.assert_array_equal(soft_threshold(x, np.array([1.0, 3.0, 0.0, 2.0])), [0.5, 0.0, 0.0, 5.0])
    with pytest.raises(ValueError):
        soft_threshold(x, -1e-3)
    with pytest.raises(ValueError):
        soft_threshold(x, np.array([1.0, -1.0, 0.0, 0.0]))


def test_soft_threshold_keeps_coeff_vector_type():
    c = dwt_forward(np.arange(64.0).reshape(8, 8), WaveletSpec("haar", 1))
    out = soft_threshold(c, 1.0)
    assert out.layout == c.layout and out.shape == c.shape


def test_soft_threshold_matches_brute_force(rng):
    for _ in range(200):
        v = rng.uniform(-5, 5)
        tau = rng.uniform(0, 3)
        assert abs(soft_threshold(np.array([v]), tau)[0] - _brute_prox(v, tau)) <= 1e-4


@settings(max_examples=200, deadline=None)
@given(vals, st.floats(0, 20, allow_nan=False))
def test_soft_threshold_is_exact_minimizer(v, tau):
    z = soft_threshold(np.array([v]), tau)[0]
    obj = lambda u: tau * abs(u) + 0.5 * (u - v) ** 2  # noqa: E731
    assert obj(z + 1e-3) >= obj(z) - 1e-12
    assert obj(z - 1e-3) >= obj(z) - 1e-12
    assert abs(z) <= abs(v)
    if abs(v) <= tau:
        assert z == 0.0


def test_prox_scaled(rng):
    groups = [sl for _, sl in subband_groups(WaveletSpec("haar", 1), (4, 4))]
    x = rng.standard_normal(16) * 3
    ones = DiagScaling.identity(groups, 16, delta=2.0)
    np.testing.assert_array_equal(prox_scaled(x, ones, 0.7), soft_threshold(x, 0.7))
    vals = np.ones(4)
    vals[2] = 2.0
    d = DiagScaling(vals, groups, 2.0, 16)
    tau = 0.7 * d.expand()
    assert np.all(tau[groups[2]] == 1.4) and np.all(np.delete(tau, np.r_[groups[2]]) == 0.7)
    out = prox_scaled(x, d, 0.7)
    # weighted prox: argmin lam*||z||_1 + 0.5 * sum (z_i - x_i)^2 / d_i
    for i in range(16):
        assert abs(out[i] - _brute_prox(x[i], 0.7 * d.expand()[i])) <= 1e-4
    np.testing.assert_allclose(prox_scaled(x, d, 0.7, t=0.5), soft_threshold(x, 0.35 * d.expand()))


def test_diag_scaling_bounds():
    groups = [slice(0, 2), slice(2, 4)]
    with pytest.raises(ValueError):
        DiagScaling(np.array([0.05, 1.0]), groups, 10.0, 4)
    with pytest.raises(ValueError):
        DiagScaling(np.array([11.0, 1.0]), groups, 10.0, 4)
    with pytest.raises(ValueError):
        DiagScaling(np.array([1.0]), groups, 10.0, 4)
    with pytest.raises(ValueError):
        DiagScaling(np.array([1.0, 1.0]), groups, 0.5, 4)
    d = DiagScaling.clamped(np.array([0.01, 50.0]), groups, 10.0, 4)
    np.testing.assert_array_equal(d.values, [0.1, 10.0])
    with pytest.raises(ValueError):
        DiagScaling(np.ones(1), [slice(0, 2)], 1.0, 4).expand()


@pytest.mark.parametrize("kind", ["inpainting", "fourier", "blur"])
def test_fidelity_matches_dense_oracle(kind):
    p = _problem8(kind, 1)
    synth = pywt_synthesis_matrix("sym4", 3, (8, 8))
    rng = np.random.default_rng(2)
    x = rng.standard_normal(64)
    if kind == "inpainting":
        dense = np.eye(64)[p.model.pattern.indices] @ synth
    elif kind == "fourier":
        dense = dft_matrix((8, 8))[p.model.pattern.indices] @ synth
    else:
        dense = circulant_blur_matrix((8, 8), 1.5) @ synth
    r = dense @ x - p.y
    assert abs(fidelity(p, x) - 0.5 * np.vdot(r, r).real) <= 1e-10
    np.testing.assert_allclose(gradient(p, x), (dense.conj().T @ r).real, atol=1e-10)
    assert fidelity(p, np.zeros(64)) == pytest.approx(0.5 * np.vdot(p.y, p.y).real, rel=1e-14)


def test_zero_residual_and_identity_model(rng):
    model = make_inpainting((8, 8), 0.5, 0)
    x = rng.standard_normal(64)
    p = LassoProblem(model, model.apply(x), 0.1)
    assert fidelity(p, x) == 0.0
    assert not np.any(gradient(p, x))
    y = rng.standard_normal(10)
    ident = LassoProblem(MatrixModel(np.eye(10)), y, 0.0)
    z = rng.standard_normal(10)
    np.testing.assert_allclose(gradient(ident, z), z - y, atol=1e-15)
    assert objective(ident, z) == pytest.approx(fidelity(ident, z))


def test_objective_recomputed_independently(rng):
    for seed in range(5):
        p = _problem8("fourier", seed)
        x = rng.standard_normal(64)
        img = p.model.transform.inverse(x)
        r = np.fft.fft2(img, norm="ortho").ravel()[p.model.pattern.indices] - p.y
        ref = 0.5 * float(np.sum(r.real**2 + r.imag**2)) + p.lam * float(np.sum(np.abs(x)))
        assert abs(objective(p, x) - ref) <= 1e-12 * max(1.0, ref)
        assert objective(p, np.zeros(64)) == pytest.approx(0.5 * np.sum(np.abs(p.y) ** 2), rel=1e-14)


def test_gradient_finite_differences():
    rng = np.random.default_rng(7)
    kinds = ["inpainting", "fourier", "blur"]
    worst = 0.0
    for i in range(20):
        p = _problem8(kinds[i % 3], 100 + i)
        x = rng.standard_normal(64)
        g = gradient(p, x)
        h = 1e-5
        fd = np.empty(64)
        for j in range(64):
            e = np.zeros(64)
            e[j] = h
            fd[j] = (fidelity(p, x + e) - fidelity(p, x - e)) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - g) / np.linalg.norm(g))
    assert worst <= 1e-5


def test_descent_with_lipschitz_step():
    rng = np.random.default_rng(3)
    probs = random_problems(4, 21) + random_problems(3, 22, kind="partial_fourier") + random_problems(
        3, 23, kind="gaussian_blur")
    for trial in range(100):
        p, _ = probs[trial % len(probs)]
        x = rng.standard_normal(p.n) * 5
        assert fidelity(p, x - p.step * gradient(p, x)) <= fidelity(p, x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (64,), elements=vals), arrays(np.float64, (64,), elements=vals))
def test_objective_convex_along_segments(a, b):
    p = _problem8("inpainting", 5)
    mid = objective(p, 0.5 * (a + b))
    assert mid <= 0.5 * (objective(p, a) + objective(p, b)) + 1e-9 * max(1.0, objective(p, a) + objective(p, b))


def test_lipschitz_estimates():
    assert estimate_lipschitz(make_inpainting((16, 16), 1.0, 0)) == pytest.approx(1.01, abs=1e-6)
    assert estimate_lipschitz(make_gaussian_blur((32, 32), 2.0)) <= 1.01
    rng = np.random.default_rng(4)
    for kind in ("inpainting", "fourier", "blur"):
        p = _problem8(kind, 9)
        dense = np.stack([p.model.apply(e) for e in np.eye(64)], axis=1)
        true = float(np.linalg.eigvalsh((dense.conj().T @ dense).real).max())
        est = estimate_lipschitz(p.model, safety=1.0)
        assert abs(est - true) <= 0.01 * true
        assert p.lipschitz >= true
    mat = rng.standard_normal((20, 30))
    assert estimate_lipschitz(MatrixModel(mat)) >= np.linalg.norm(mat, 2) ** 2


def test_problem_validation():
    model = make_inpainting((8, 8), 0.5, 0)
    with pytest.raises(ValueError):
        LassoProblem(model, np.zeros(5), 0.1)
    with pytest.raises(ValueError):
        LassoProblem(model, np.zeros(model.m), -0.1)
    with pytest.raises(ValueError):
        fidelity(LassoProblem(model, np.zeros(model.m), 0.1), np.zeros(10))


def test_nmse_values(rng):
    spec = WaveletSpec()
    img = rng.uniform(size=(16, 16))
    ref = dwt_forward(img, spec)
    assert nmse(ref, ref, spec) <= -300.0 and nmse(ref, ref, spec) == NMSE_FLOOR_DB
    zero = get_wavelet(spec, (16, 16)).wrap(np.zeros(256))
    assert nmse(zero, ref, spec) == pytest.approx(0.0, abs=1e-12)
    scaled = get_wavelet(spec, (16, 16)).wrap(1.1 * ref.data)
    assert nmse(scaled, ref, spec) == pytest.approx(-20.0, abs=1e-9)
    with pytest.raises(ValueError):
        nmse_db(ref.data, np.zeros(256), get_wavelet(spec, (16, 16)))
