"""Тесты вариационного PARAFAC2: ELBO, обновления, ARD."""
import math

import numpy as np
import pytest

from config import NOISE_VARIANCE_FLOOR
from parafac2.services import vb, vmf
from parafac2.services.errors import NumericalFailure
from parafac2.services.model_select import factor_match, noiseless_r2
from parafac2.services.synth import SynthSpec, generate
from parafac2.services.tensor import frobenius_sq, new_ragged
from parafac2.services.vb import (
    AllRestartsFailed,
    GenerativeConfig,
    VariationalState,
    VbOptions,
    component_energy,
    coordinate_updates,
    elbo,
    elbo_terms,
    expected_residual_sq,
    expected_tau,
    fit_vb,
    init_from_direct,
    run_iteration,
    to_point,
    update_alpha,
    update_qA,
    update_qC,
    update_qF,
    update_qP_vmf,
    update_qtau,
)


def _state(orth: str, noise: str, m: int = 2, restart: int = 1, vmf_method: str = "auto"):
    observed, _ = generate(SynthSpec(I=8, J=6, K=3, M_true=2, snr_db=10.0, noise_mode="hetero", seed=7))
    cfg = GenerativeConfig(M=m, orthogonality=orth, noise=noise)
    # auto: при M = 1 точная формула Бесселя
    opts = VbOptions(vmf_method=vmf_method, direct_max_iters=500, seed=1)
    return observed, init_from_direct(observed, cfg, opts, restart=restart)


@pytest.mark.parametrize(
    "orth,noise,m,method",
    [
        ("vmf", "homo", 1, "auto"),
        ("vmf", "hetero", 1, "auto"),
        ("vmf", "homo", 2, "saddle"),
        ("vmf", "hetero", 2, "saddle"),
        ("cmn", "homo", 2, "auto"),
        ("cmn", "hetero", 2, "auto"),
    ],
)
def test_every_update_increases_elbo(orth, noise, m, method):
    t, state = _state(orth, noise, m, vmf_method=method)
    prev = elbo(state, t)
    for _ in range(3):
        for step in coordinate_updates(state, t):
            cur = elbo(state, t)
            assert cur >= prev - 1e-9 * abs(prev), step
            prev = cur


def test_prior_equal_to_posterior_leaves_only_likelihood(rng):
    widths = (3, 4)
    m = 2
    t = new_ragged([rng.standard_normal((4, j)) for j in widths])
    cfg = GenerativeConfig(M=m, orthogonality="vmf", noise="hetero", tau_shape_prior=2.0, tau_scale_prior=0.5)
    state = VariationalState(
        config=cfg,
        mu_A=np.zeros((4, m)),
        Sigma_A=np.eye(m),
        mu_C=np.zeros((2, m)),
        Sigma_C=np.tile(np.eye(m), (2, 1, 1)),
        mu_F=np.zeros((m, m)),
        Sigma_F=np.tile(np.eye(m), (m, 1, 1)),
        P_mean=[np.zeros((j, m)) for j in widths],
        tau_shape=np.full(2, 2.0),
        tau_scale=np.full(2, 0.5),
        alpha=np.ones(m),
        B=[np.zeros((j, m)) for j in widths],
    )
    terms = elbo_terms(state, t)
    rest = sum(v for name, v in terms.items() if name != "likelihood")
    assert rest == pytest.approx(0.0, abs=1e-10)
    assert elbo(state, t) == pytest.approx(terms["likelihood"])


def test_perturbed_covariance_lowers_elbo():
    t, state = _state("cmn", "hetero")
    run_iteration(state, t)
    update_qA(state, t)
    best = elbo(state, t)
    worse = state.copy()
    worse.Sigma_A = 1.5 * worse.Sigma_A
    assert elbo(worse, t) < best

    update_qC(state, t)
    best = elbo(state, t)
    worse = state.copy()
    worse.Sigma_C[0] = 0.5 * worse.Sigma_C[0]
    assert elbo(worse, t) < best


def test_elbo_invariant_to_component_order():
    t, state = _state("cmn", "hetero")
    run_iteration(state, t)
    perm = [1, 0]
    swapped = state.copy()
    swapped.mu_A = state.mu_A[:, perm]
    swapped.Sigma_A = state.Sigma_A[perm][:, perm]
    swapped.mu_C = state.mu_C[:, perm]
    swapped.Sigma_C = state.Sigma_C[:, perm][:, :, perm]
    swapped.mu_F = state.mu_F[:, perm]
    swapped.Sigma_F = state.Sigma_F[:, perm][:, :, perm]
    swapped.alpha = state.alpha[perm]
    assert elbo(swapped, t) == pytest.approx(elbo(state, t), rel=1e-10)


def test_expected_residual_matches_monte_carlo(rng):
    t, state = _state("cmn", "hetero")
    k, n, m = 0, 40000, 2
    state.Sigma_A = np.array([[0.3, 0.05], [0.05, 0.2]])
    state.Sigma_C[k] = np.array([[2.0, 0.3], [0.3, 1.0]])
    state.Sigma_F[0] = 0.05 * np.eye(m)
    state.Sigma_F[1] = 0.08 * np.eye(m)
    state.Sigma_P[k] = np.array([[0.1, 0.02], [0.02, 0.05]])

    def draw(mean, cov, shape):
        return mean + rng.standard_normal(shape + (cov.shape[0],)) @ np.linalg.cholesky(cov).T

    a = draw(state.mu_A, state.Sigma_A, (n, state.mu_A.shape[0]))
    c = draw(state.mu_C[k], state.Sigma_C[k], (n,))
    f = np.stack([draw(state.mu_F[r], state.Sigma_F[r], (n,)) for r in range(m)], axis=1)
    p = draw(state.P_mean[k], state.Sigma_P[k], (n, t[k].shape[1]))
    recon = ((a * c[:, None, :]) @ f.transpose(0, 2, 1)) @ p.transpose(0, 2, 1)
    resid = np.sum((t[k] - recon) ** 2, axis=(1, 2))

    expected = expected_residual_sq(state, t, k)
    assert abs(resid.mean() - expected) < 5.0 * resid.std() / math.sqrt(n)


def test_large_ard_precision_shrinks_component():
    t, state = _state("cmn", "hetero")
    state.alpha = np.array([1e12, 1.0])
    update_qC(state, t)
    assert np.abs(state.mu_C[:, 0]).max() < 1e-6


def test_alpha_update_fixed_point():
    t, state = _state("vmf", "hetero", m=1)
    run_iteration(state, t)
    update_alpha(state)
    assert np.allclose(state.alpha * component_energy(state), state.K)


def test_vmf_parameter_for_zero_data_and_tau_scaling():
    t, state = _state("vmf", "hetero", m=1)
    zeros = new_ragged([np.zeros_like(x) for x in t.slabs])
    update_qP_vmf(state, zeros, 0)
    assert np.allclose(state.B[0], 0.0)
    assert np.allclose(state.P_mean[0], 0.0)

    update_qP_vmf(state, t, 1)
    b1 = state.B[1].copy()
    state.tau_scale = 3.0 * state.tau_scale
    update_qP_vmf(state, t, 1)
    assert np.allclose(state.B[1], 3.0 * b1)


def test_cmn_means_stay_orthonormal():
    t, state = _state("cmn", "homo")
    for _ in range(3):
        run_iteration(state, t)
    for p in state.P_mean:
        assert np.allclose(p.T @ p, np.eye(2), atol=1e-10)
    assert np.all(np.linalg.eigvalsh(state.Sigma_P) > 0)


def test_infinite_tolerance_stops_after_one_iteration():
    observed, _ = generate(SynthSpec(I=8, J=6, K=3, M_true=2, snr_db=10.0, seed=4))
    cfg = GenerativeConfig(M=2, orthogonality="cmn", noise="homo")
    _, report = fit_vb(observed, cfg, VbOptions(rel_tol_elbo=math.inf, restarts=1, direct_max_iters=200))
    assert report.iterations == 1
    assert report.converged


def test_near_noiseless_recovery():
    observed, truth = generate(SynthSpec(I=12, J=10, K=5, M_true=2, snr_db=40.0, noise_mode="hetero", seed=3))
    cfg = GenerativeConfig(M=2, orthogonality="vmf", noise="hetero")
    state, report = fit_vb(observed, cfg, VbOptions(max_iters=300, restarts=2, direct_max_iters=3000))
    assert report.method == "vb-vmf-hetero"
    assert len(report.restart_scores) == 2
    assert math.isfinite(report.elbo)
    assert noiseless_r2(state, truth) >= 0.999
    assert factor_match(to_point(state, use_mode=True), truth.as_point()) >= 0.99


def test_cmn_fit_trace_is_monotone():
    observed, _ = generate(SynthSpec(I=10, J=8, K=4, M_true=2, snr_db=5.0, seed=8))
    cfg = GenerativeConfig(M=2, orthogonality="cmn", noise="hetero")
    _, report = fit_vb(observed, cfg, VbOptions(max_iters=150, restarts=1, direct_max_iters=500))
    assert report.diagnostics["monotonicity_violations"] == 0
    for prev, cur in zip(report.trace, report.trace[1:]):
        assert cur >= prev - 1e-8 * abs(prev)


@pytest.mark.parametrize("orth", ["cmn", "vmf"])
def test_heteroscedastic_model_wins_on_heteroscedastic_data(orth):
    observed, _ = generate(
        SynthSpec(I=20, J=15, K=6, M_true=2, snr_db=0.0, noise_mode="hetero", hetero_range=(0.1, 10.0), seed=21)
    )
    opts = VbOptions(max_iters=200, restarts=1, direct_max_iters=1000)
    _, homo = fit_vb(observed, GenerativeConfig(M=2, orthogonality=orth, noise="homo"), opts)
    _, hetero = fit_vb(observed, GenerativeConfig(M=2, orthogonality=orth, noise="hetero"), opts)
    assert hetero.elbo > homo.elbo


def test_ard_shrinks_spurious_component():
    observed, _ = generate(SynthSpec(I=20, J=15, K=8, M_true=1, snr_db=10.0, seed=13))
    cfg = GenerativeConfig(M=2, orthogonality="cmn", noise="hetero")
    state, _ = fit_vb(observed, cfg, VbOptions(max_iters=400, rel_tol_elbo=1e-14, restarts=1, direct_max_iters=1000))
    assert state.alpha.max() / state.alpha.min() >= 10.0


def test_all_restarts_failed(monkeypatch):
    observed, _ = generate(SynthSpec(I=6, J=5, K=3, M_true=1, snr_db=10.0, seed=1))

    def boom(state, t):
        raise NumericalFailure("сбой")

    monkeypatch.setattr(vb, "update_qA", boom)
    with pytest.raises(AllRestartsFailed) as exc:
        fit_vb(observed, GenerativeConfig(M=1), VbOptions(max_iters=5, restarts=2, direct_max_iters=50))
    assert len(exc.value.failures) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        GenerativeConfig(M=2, orthogonality="gauss")
    with pytest.raises(ValueError):
        VbOptions(vmf_method="magic")
    assert GenerativeConfig(M=3, orthogonality="VMF", noise="Homo").variant == "vmf-homo"


@pytest.mark.parametrize("orth", ["cmn", "vmf"])
def test_qF_update_is_coordinate_optimum(rng, orth):
    t, state = _state(orth, "hetero", m=2, vmf_method="saddle")
    run_iteration(state, t)
    update_qF(state, t)
    best = elbo(state, t)
    shifted = state.copy()
    shifted.mu_F = shifted.mu_F + 0.05 * rng.standard_normal(shifted.mu_F.shape)
    assert elbo(shifted, t) < best
    for factor in (0.5, 1.5):
        scaled = state.copy()
        scaled.Sigma_F = factor * scaled.Sigma_F
        assert elbo(scaled, t) < best


def test_vmf_expected_residual_matches_full_expansion(rng):
    t, state = _state("vmf", "hetero", m=2)
    k = 0
    state.B[k] = 3.0 * rng.standard_normal(state.B[k].shape)
    state.P_mean[k] = vmf.moments(vmf.VmfMatrix.from_parameter(state.B[k]), state.vmf_method)
    x = t[k]
    lin = float(np.sum(x * (((state.mu_A * state.mu_C[k]) @ state.mu_F.T) @ state.P_mean[k].T)))
    # E[PᵀP] = I для vMF
    quad = float(np.sum(vb._e_dkd(state, k) * vb._e_ftqf(state, np.eye(2))))
    assert expected_residual_sq(state, t, k) == pytest.approx(float(np.sum(x**2)) - 2.0 * lin + quad, rel=1e-9)


def test_vb_start_uses_best_of_all_direct_restarts(monkeypatch):
    observed, _ = generate(SynthSpec(I=6, J=5, K=3, M_true=1, snr_db=10.0, seed=1))
    seen = []
    original = vb.fit_direct

    def spy(t, m, opts=None):
        seen.append(opts.restarts)
        return original(t, m, opts)

    monkeypatch.setattr(vb, "fit_direct", spy)
    fit_vb(observed, GenerativeConfig(M=1), VbOptions(max_iters=5, restarts=3, direct_max_iters=50))
    assert seen == [3]


@pytest.mark.parametrize("orth", ["vmf", "cmn"])
def test_noiseless_recovery(noiseless_small, orth):
    observed, truth = noiseless_small
    cfg = GenerativeConfig(M=2, orthogonality=orth, noise="hetero")
    state, report = fit_vb(observed, cfg, VbOptions(max_iters=200, restarts=1, direct_max_iters=3000))
    assert all(math.isfinite(v) for v in report.trace)
    assert report.diagnostics["monotonicity_violations"] == 0
    for prev, cur in zip(report.trace, report.trace[1:]):
        assert cur >= prev - 1e-8 * abs(prev)
    assert np.all(np.isfinite(expected_tau(state)))
    assert noiseless_r2(state, truth) >= 0.999
    assert factor_match(to_point(state, use_mode=True), truth.as_point()) >= 0.99


def test_residual_floor_bounds_noise_precision(noiseless_small):
    observed, truth = noiseless_small
    cfg = GenerativeConfig(M=2, orthogonality="cmn", noise="hetero")
    state = init_from_direct(observed, cfg, VbOptions(), direct=truth.as_point())
    state.Sigma_A = np.zeros_like(state.Sigma_A)
    state.Sigma_C = np.zeros_like(state.Sigma_C)
    state.Sigma_F = np.zeros_like(state.Sigma_F)
    state.Sigma_P = np.zeros_like(state.Sigma_P)
    update_qtau(state, observed)
    assert state.diagnostics["residual_clamps"] == observed.K
    mean_sq = frobenius_sq(observed) / sum(observed.I * j for j in observed.widths)
    tau = expected_tau(state)
    assert np.all(np.isfinite(tau))
    assert np.all(tau <= 1.1 / (NOISE_VARIANCE_FLOOR * mean_sq))
