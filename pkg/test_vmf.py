"""Тесты нормировки, моментов и сэмплеров матричного vMF."""
import math

import numpy as np
import pytest
from scipy.special import i0, ive

from parafac2.services import vmf
from parafac2.services.linalg import uniform_stiefel


def _param(rng, j, s):
    """B = U diag(s) Vᵀ со случайными ортонормальными U, V."""
    m = len(s)
    u = uniform_stiefel(rng, j, m)
    v = uniform_stiefel(rng, m, m)
    return vmf.VmfMatrix.from_parameter((u * np.asarray(s)) @ v.T)


def test_stiefel_volume_small_cases():
    assert vmf.stiefel_log_volume(1, 1) == pytest.approx(math.log(2.0))
    assert vmf.stiefel_log_volume(2, 1) == pytest.approx(math.log(2.0 * math.pi))
    assert vmf.stiefel_log_volume(3, 1) == pytest.approx(math.log(4.0 * math.pi))


@pytest.mark.parametrize("s", [0.5, 2.0, 40.0])
def test_bessel_matches_closed_form_on_sphere(s):
    # J = 3: ₀F₁(3/2; s²/4) = sinh(s)/s
    value, grad, used = vmf.log_hyp0f1([s], 3, "bessel")
    assert used == "bessel"
    expected = s - math.log(2.0 * s) + math.log1p(-math.exp(-2.0 * s))
    assert value == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert grad[0] == pytest.approx(1.0 / math.tanh(s) - 1.0 / s, rel=1e-10)


def test_reference_value_j3_s2():
    value, _, _ = vmf.log_hyp0f1([2.0], 3, "auto")
    assert value == pytest.approx(0.595220, abs=1e-6)


def test_series_matches_bessel_for_one_column():
    v_b, g_b, _ = vmf.log_hyp0f1([3.0], 5, "bessel")
    v_s, g_s, _ = vmf.log_hyp0f1([3.0], 5, "series")
    assert v_s == pytest.approx(v_b, abs=1e-10)
    assert g_s[0] == pytest.approx(g_b[0], abs=1e-7)


def test_series_matches_orthogonal_group_closed_form():
    # J = M = 2: ₀F₁(1; S²/4) = ½[I0(s1 + s2) + I0(s1 − s2)]
    s = np.array([1.5, 0.7])
    value, _, used = vmf.log_hyp0f1(s, 2, "series")
    assert used == "series"
    assert value == pytest.approx(math.log(0.5 * (i0(2.2) + i0(0.8))), abs=1e-10)


def test_saddle_is_exact_at_zero():
    value, grad, _ = vmf.log_hyp0f1([0.0, 0.0, 0.0], 7, "saddle")
    assert value == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(grad, 0.0)


def test_saddle_close_to_exact_for_one_column():
    v_s, g_s, _ = vmf.log_hyp0f1([5.0], 10, "saddle")
    v_b, g_b, _ = vmf.log_hyp0f1([5.0], 10, "bessel")
    assert v_s == pytest.approx(v_b, abs=0.01)
    assert g_s[0] == pytest.approx(g_b[0], abs=0.005)
    _, g3, _ = vmf.log_hyp0f1([2.0], 3, "saddle")
    assert g3[0] == pytest.approx(1.0 / math.tanh(2.0) - 0.5, abs=0.01)


def test_saddle_small_concentration_matches_series():
    s = np.array([0.5, 0.3])
    v_s, g_s, _ = vmf.log_hyp0f1(s, 6, "saddle")
    v_e, g_e, _ = vmf.log_hyp0f1(s, 6, "series")
    assert v_s == pytest.approx(v_e, abs=1e-3)
    assert np.allclose(g_s, g_e, atol=0.01)


def test_saddle_large_concentration_asymptotics():
    # g_m ≈ 1 − (J − M)/(2 S_m) − ½ Σ_{m'≠m} 1/(S_m + S_m')
    j = 10
    s = np.array([1e4, 5e3])
    _, g, _ = vmf.log_hyp0f1(s, j, "saddle")
    expected = 1.0 - (j - 2) / (2.0 * s) - 0.5 / s.sum()
    assert np.allclose(g, expected, atol=1e-5)
    assert np.all(g < 1.0)


def test_auto_dispatch():
    assert vmf.log_hyp0f1([1.0], 4, "auto")[2] == "bessel"
    assert vmf.log_hyp0f1([1.0, 0.5], 4, "auto")[2] == "series"
    assert vmf.log_hyp0f1([50.0, 0.5], 4, "auto")[2] == "saddle"
    assert vmf.log_hyp0f1([1.0, 0.5, 0.2], 4, "auto")[2] == "saddle"


def test_out_of_range():
    with pytest.raises(vmf.ApproximationOutOfRange):
        vmf.log_hyp0f1([1.0, 1.0, 1.0], 5, "series")
    with pytest.raises(vmf.ApproximationOutOfRange):
        vmf.log_hyp0f1([30.0, 1.0], 5, "series")
    with pytest.raises(vmf.ApproximationOutOfRange):
        vmf.log_hyp0f1([1.0, 1.0], 5, "bessel")
    with pytest.raises(vmf.ApproximationOutOfRange):
        vmf.log_hyp0f1([np.inf], 5, "saddle")


def test_uniform_distribution_summary():
    d = vmf.VmfMatrix.from_parameter(np.zeros((5, 2)))
    summary = vmf.evaluate(d, "saddle")
    assert np.allclose(summary.mean, 0.0)
    assert summary.entropy == pytest.approx(vmf.stiefel_log_volume(5, 2))


def test_mean_and_mode(rng):
    d = _param(rng, 6, [4.0, 1.0])
    mean = vmf.moments(d, "series")
    g = vmf.log_hyp0f1(d.S, d.J, "series")[1]
    assert np.allclose(mean, (d.svd.U * g) @ d.svd.V.T)
    assert np.all((g >= 0) & (g < 1))
    mode = vmf.mode(d)
    assert np.allclose(mode.T @ mode, np.eye(2))
    assert np.trace(d.B.T @ mode) == pytest.approx(float(np.sum(d.S)))


def test_rejection_sampler_matches_moments(rng):
    d = _param(rng, 4, [1.0, 0.5])
    samples = vmf.vmf_sample(d, rng, size=20000)
    assert samples.shape == (20000, 4, 2)
    assert np.allclose(samples.mean(axis=0), vmf.moments(d, "series"), atol=0.02)


def test_rejection_budget_exceeded(rng):
    d = _param(rng, 10, [200.0, 200.0])
    with pytest.raises(vmf.RejectionBudgetExceeded) as exc:
        vmf.vmf_sample(d, rng, size=10, budget=4096, batch=1024)
    assert exc.value.proposals == 4096
    assert exc.value.acceptance_rate < 10 / 4096


def test_wood_vector_sampler_mean(rng):
    z = np.array([0.0, 2.0, 0.0])
    draws = np.array([vmf.sample_vmf_vector(z, rng) for _ in range(20000)])
    assert np.allclose(np.linalg.norm(draws, axis=1), 1.0)
    g = ive(1.5, 2.0) / ive(0.5, 2.0)
    assert np.allclose(draws.mean(axis=0), [0.0, g, 0.0], atol=0.02)


def test_gibbs_sampler_matches_moments(rng):
    d = _param(rng, 5, [15.0, 10.0])
    samples = vmf.vmf_gibbs(d, rng, n_samples=3000, burn_in=200)
    gram = np.einsum("nji,njk->nik", samples, samples)
    assert np.allclose(gram, np.eye(2), atol=1e-10)
    assert np.allclose(samples.mean(axis=0), vmf.moments(d, "series"), atol=0.03)


@pytest.mark.parametrize("s", [0.5, 2.0])
def test_log_norm_const_on_sphere(s):
    # J = 3, M = 1: объём сферы 4π, ₀F₁ = sinh(s)/s
    d = vmf.VmfMatrix.from_parameter(np.array([[s], [0.0], [0.0]]))
    assert vmf.log_norm_const(d, "bessel") == pytest.approx(math.log(4.0 * math.pi * math.sinh(s) / s), rel=1e-12)
    assert vmf.evaluate(d, "bessel").log_norm == pytest.approx(vmf.log_norm_const(d, "bessel"))


def test_saddle_complement_keeps_precision_at_huge_concentration():
    j, s = 10, 1e12
    d = vmf.VmfMatrix.from_parameter(np.vstack([[s], np.zeros((j - 1, 1))]))
    summary = vmf.evaluate(d, "saddle")
    # 1 − g ≈ (J − 1)/(2S)
    assert summary.g_complement[0] * s == pytest.approx(0.5 * (j - 1), rel=1e-6)
    assert math.isfinite(summary.entropy)


@pytest.mark.parametrize("method,s", [("series", [4.0, 1.0]), ("saddle", [30.0, 12.0, 5.0])])
def test_entropy_is_log_norm_minus_linear_term(rng, method, s):
    d = _param(rng, 7, s)
    summary = vmf.evaluate(d, method)
    assert summary.entropy == pytest.approx(summary.log_norm - float(np.dot(d.S, summary.g)), rel=1e-9, abs=1e-9)
    assert np.allclose(summary.g_complement, 1.0 - summary.g, atol=1e-12)


def test_gram_gap(rng):
    uniform = vmf.VmfMatrix.from_parameter(np.zeros((5, 2)))
    assert np.allclose(vmf.gram_gap(uniform, "saddle"), np.eye(2))
    assert np.allclose(vmf.gram_gap(uniform, "series"), np.eye(2))

    d = _param(rng, 6, [4.0, 1.0])
    mean = vmf.moments(d, "series")
    gap = vmf.gram_gap(d, "series")
    assert np.allclose(gap, np.eye(2) - mean.T @ mean)
    assert np.all(np.linalg.eigvalsh(gap) > 0)


@pytest.mark.parametrize("j,s", [(10, [30.0, 15.0]), (20, [60.0, 40.0, 30.0])])
def test_saddle_moments_match_gibbs(rng, j, s):
    d = _param(rng, j, s)
    samples = vmf.vmf_gibbs(d, rng, n_samples=3000, burn_in=200)
    # E[P] = U diag(g) Vᵀ: сравниваем g в базисе сингулярных векторов
    g_mc = np.diag(d.svd.U.T @ samples.mean(axis=0) @ d.svd.V)
    g_saddle = vmf.evaluate(d, "saddle").g
    assert np.allclose(g_mc, g_saddle, atol=0.03)
