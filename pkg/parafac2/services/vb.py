"""
Variational Bayes PARAFAC2.

Mean-field posterior q(A) q(C) Π_m q(f_m) Π_k q(P_k) q(τ):

* rows of A share one Gaussian covariance Σ_A; each c_k has its own Σ_{c_k};
  each row f_m of F has its own Σ_{f_m};
* P_k is matrix von Mises-Fisher (``vmf``) or a matrix normal with
  orthonormal mean (``cmn``; row covariance I, column covariance Σ_{P_k});
* τ is Gamma, one factor per slab (``hetero``) or one shared (``homo``);
* α (ARD precisions on the columns of C) is a point estimate.

Every update is an exact coordinate-ascent step on the ELBO, so the ELBO
trace is non-decreasing up to the accuracy of the ₀F₁ evaluator.
"""
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from config import (
    ARD_DELAY_ITERS,
    ELBO_SLACK,
    INIT_COVARIANCE,
    MAX_ITERS,
    NOISE_VARIANCE_FLOOR,
    RESTART_JITTER,
    STRICT_ELBO,
    TAU_SCALE_PRIOR,
    TAU_SHAPE_PRIOR,
    VB_REL_TOL_ELBO,
    VB_RESTARTS,
    VMF_INIT_CONCENTRATION,
)
from parafac2.services import vmf
from parafac2.services.direct_fit import (
    DirectFitOptions,
    Parafac2Point,
    core_consistency,
    fit_direct,
    residual_precisions,
)
from parafac2.services.errors import InputError, NumericalFailure, Parafac2Error
from parafac2.services.linalg import hadamard_outer_expectation, inv_pd, orthonormal_procrustes
from parafac2.services.reports import FitReport
from parafac2.services.tensor import RaggedTensor3, frobenius_sq

logger = logging.getLogger(__name__)

ORTHOGONALITY = ("vmf", "cmn")
NOISE = ("homo", "hetero")
_LOG_2PI = math.log(2.0 * math.pi)
# Порог «компонента жива»: доля энергии от максимальной
EFFECTIVE_ENERGY_THRESHOLD = 1e-3


class NonFiniteElbo(NumericalFailure):
    """Одно из слагаемых ELBO не конечно."""

    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"слагаемое ELBO '{term}' не конечно: {value}")


class ElboDecreased(NumericalFailure):
    """ELBO упал сильнее допуска (строгий режим)."""


class AllRestartsFailed(NumericalFailure):
    """Ни один рестарт не дошёл до конца."""

    def __init__(self, failures: list[dict]):
        self.failures = failures
        details = "; ".join(f"рестарт {f['restart']}: {f['error']}" for f in failures)
        super().__init__(f"все рестарты VB завершились ошибкой ({details})")


@dataclass
class GenerativeConfig:
    M: int
    orthogonality: str = "vmf"
    noise: str = "hetero"
    tau_shape_prior: float = TAU_SHAPE_PRIOR
    tau_scale_prior: float = TAU_SCALE_PRIOR

    def __post_init__(self):
        self.orthogonality = self.orthogonality.lower()
        self.noise = self.noise.lower()
        if self.M < 1:
            raise InputError("M должно быть ≥ 1")
        if self.orthogonality not in ORTHOGONALITY:
            raise InputError(f"ортогональность: {self.orthogonality}, ожидалось одно из {ORTHOGONALITY}")
        if self.noise not in NOISE:
            raise InputError(f"шум: {self.noise}, ожидалось одно из {NOISE}")
        if not (self.tau_shape_prior > 0 and self.tau_scale_prior > 0):
            raise InputError("параметры априорного Gamma для τ должны быть > 0")

    @property
    def variant(self) -> str:
        return f"{self.orthogonality}-{self.noise}"


@dataclass
class VbOptions:
    max_iters: int = MAX_ITERS
    rel_tol_elbo: float = VB_REL_TOL_ELBO
    restarts: int = VB_RESTARTS
    ard_delay_iters: int = ARD_DELAY_ITERS
    seed: int = 0
    jitter: float = RESTART_JITTER
    delay_freezes: str = "tau"
    vmf_method: str = "saddle"
    strict_monotone: bool = STRICT_ELBO
    direct_max_iters: int = MAX_ITERS
    init_concentration: float = VMF_INIT_CONCENTRATION
    init_covariance: float = INIT_COVARIANCE

    def __post_init__(self):
        if self.max_iters < 1 or self.direct_max_iters < 1:
            raise InputError("число итераций должно быть ≥ 1")
        if not self.rel_tol_elbo > 0:
            raise InputError("rel_tol_elbo должен быть > 0")
        if self.restarts < 1:
            raise InputError("restarts должен быть ≥ 1")
        if self.ard_delay_iters < 0:
            raise InputError("ard_delay_iters не может быть отрицательным")
        if self.delay_freezes not in ("tau", "alpha"):
            raise InputError("delay_freezes: 'tau' или 'alpha'")
        if self.vmf_method not in vmf.METHODS:
            raise InputError(f"vmf_method: одно из {vmf.METHODS}")
        if not (self.init_concentration >= 0 and self.init_covariance > 0):
            raise InputError("init_concentration ≥ 0 и init_covariance > 0")


@dataclass(eq=False)
class VariationalState:
    """Параметры факторов q; P_mean хранит E[P_k] (vMF) или M_{P_k} (cMN)."""

    config: GenerativeConfig
    mu_A: np.ndarray
    Sigma_A: np.ndarray
    mu_C: np.ndarray
    Sigma_C: np.ndarray
    mu_F: np.ndarray
    Sigma_F: np.ndarray
    P_mean: list[np.ndarray]
    tau_shape: np.ndarray
    tau_scale: np.ndarray
    alpha: np.ndarray
    B: list[np.ndarray] | None = None
    Sigma_P: np.ndarray | None = None
    vmf_method: str = "saddle"
    trace: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.mu_A.shape[1]

    @property
    def K(self) -> int:
        return self.mu_C.shape[0]

    def copy(self) -> "VariationalState":
        return VariationalState(
            config=GenerativeConfig(**vars(self.config)),
            mu_A=self.mu_A.copy(),
            Sigma_A=self.Sigma_A.copy(),
            mu_C=self.mu_C.copy(),
            Sigma_C=self.Sigma_C.copy(),
            mu_F=self.mu_F.copy(),
            Sigma_F=self.Sigma_F.copy(),
            P_mean=[p.copy() for p in self.P_mean],
            tau_shape=self.tau_shape.copy(),
            tau_scale=self.tau_scale.copy(),
            alpha=self.alpha.copy(),
            B=None if self.B is None else [b.copy() for b in self.B],
            Sigma_P=None if self.Sigma_P is None else self.Sigma_P.copy(),
            vmf_method=self.vmf_method,
            trace=list(self.trace),
            diagnostics=dict(self.diagnostics),
        )


# --- Моменты ------------------------------------------------------------------

def expected_tau(state: VariationalState) -> np.ndarray:
    """E[τ_k] для каждого среза (для homo все равны)."""
    return np.broadcast_to(state.tau_shape * state.tau_scale, (state.K,)).copy()


def expected_log_tau(state: VariationalState) -> np.ndarray:
    return np.broadcast_to(digamma(state.tau_shape) + np.log(state.tau_scale), (state.K,)).copy()


def _e_ata(state: VariationalState) -> np.ndarray:
    return state.mu_A.T @ state.mu_A + state.mu_A.shape[0] * state.Sigma_A


def _e_ctc(state: VariationalState) -> np.ndarray:
    """E[c_kᵀc_k] стопкой (K, M, M)."""
    return state.mu_C[:, :, None] * state.mu_C[:, None, :] + state.Sigma_C


def expected_gram_P(state: VariationalState, k: int) -> np.ndarray:
    """E[P_kᵀP_k]: I для vMF, MᵀM + J_k Σ_{P_k} для cMN."""
    m = state.M
    if state.config.orthogonality == "vmf":
        return np.eye(m)
    p = state.P_mean[k]
    return p.T @ p + p.shape[0] * state.Sigma_P[k]


def gram_gap_P(state: VariationalState, k: int) -> np.ndarray:
    """E[P_kᵀP_k] − E[P_k]ᵀE[P_k] (неотрицательно определена)."""
    if state.config.orthogonality == "vmf":
        return vmf.gram_gap(vmf.VmfMatrix.from_parameter(state.B[k]), state.vmf_method)
    return state.P_mean[k].shape[0] * state.Sigma_P[k]


def _e_ftqf(state: VariationalState, q: np.ndarray) -> np.ndarray:
    """E[Fᵀ Q F] при независимых строках F."""
    return state.mu_F.T @ q @ state.mu_F + np.einsum("m,mij->ij", np.diag(q), state.Sigma_F)


def _e_fkft(state: VariationalState, kk: np.ndarray) -> np.ndarray:
    """E[F K Fᵀ]: диагональ получает tr(K Σ_{f_m})."""
    out = state.mu_F @ kk @ state.mu_F.T
    out[np.diag_indices_from(out)] += np.einsum("ij,mji->m", kk, state.Sigma_F)
    return out


def _e_dkd(state: VariationalState, k: int) -> np.ndarray:
    """E[D_k AᵀA D_k] = E[c_k c_kᵀ] ∘ E[AᵀA]."""
    return hadamard_outer_expectation(state.mu_C[k], state.Sigma_C[k], state.mu_A, state.Sigma_A)


def expected_residual_sq(state: VariationalState, t: RaggedTensor3, k: int) -> float:
    """
    E‖X_k − A D_k Fᵀ P_kᵀ‖² = ‖X_k − X̂_k‖² + поправка на дисперсии q.
    Поправка собрана из адамаровых произведений неотрицательно определённых
    матриц и потому ≥ 0 без вычитания близких чисел.
    """
    x = t[k]
    x_hat = ((state.mu_A * state.mu_C[k]) @ state.mu_F.T) @ state.P_mean[k].T
    mean_part = float(np.sum((x - x_hat) ** 2))

    p = state.P_mean[k]
    m_aa = state.mu_A.T @ state.mu_A
    v_aa = state.mu_A.shape[0] * state.Sigma_A
    m_cc = np.outer(state.mu_C[k], state.mu_C[k])
    v_cc = state.Sigma_C[k]
    gap = gram_gap_P(state, k)
    m_ff = state.mu_F.T @ (p.T @ p) @ state.mu_F
    v_ff = state.mu_F.T @ gap @ state.mu_F + np.einsum("m,mij->ij", np.diag(expected_gram_P(state, k)), state.Sigma_F)
    e_ff = m_ff + v_ff
    variance_part = float(
        np.sum(v_aa * (m_cc + v_cc) * e_ff) + np.sum(m_aa * v_cc * e_ff) + np.sum(m_aa * m_cc * v_ff)
    )
    return mean_part + max(variance_part, 0.0)


def component_energy(state: VariationalState) -> np.ndarray:
    """Σ_k E[c_km²] по компонентам."""
    return np.sum(state.mu_C**2, axis=0) + np.einsum("kmm->m", state.Sigma_C)


def effective_components(state: VariationalState, threshold: float = EFFECTIVE_ENERGY_THRESHOLD) -> int:
    """Число компонент с относительной энергией выше порога."""
    energy = component_energy(state)
    top = float(energy.max(initial=0.0))
    if top <= 0:
        return 0
    return int(np.sum(energy / top > threshold))


# --- Обновления ---------------------------------------------------------------

def update_qA(state: VariationalState, t: RaggedTensor3) -> VariationalState:
    tau = expected_tau(state)
    e_cc = _e_ctc(state)
    precision = np.eye(state.M)
    rhs = np.zeros_like(state.mu_A)
    for k, x in enumerate(t.slabs):
        g = _e_ftqf(state, expected_gram_P(state, k))
        precision += tau[k] * e_cc[k] * g
        rhs += tau[k] * ((x @ state.P_mean[k]) @ state.mu_F) * state.mu_C[k]
    state.Sigma_A, _ = inv_pd(precision, "A")
    state.mu_A = rhs @ state.Sigma_A
    return state


def update_qC(state: VariationalState, t: RaggedTensor3) -> VariationalState:
    tau = expected_tau(state)
    e_aa = _e_ata(state)
    for k, x in enumerate(t.slabs):
        g = _e_ftqf(state, expected_gram_P(state, k))
        precision = tau[k] * e_aa * g + np.diag(state.alpha)
        cov, _ = inv_pd(precision, f"c_{k + 1}")
        lin = tau[k] * np.einsum("im,im->m", state.mu_A, (x @ state.P_mean[k]) @ state.mu_F)
        state.Sigma_C[k] = cov
        state.mu_C[k] = cov @ lin
    return state


def update_qF(state: VariationalState, t: RaggedTensor3) -> VariationalState:
    """Построчный проход m = 1..M; строки F связаны через недиагональ E[PᵀP]."""
    tau = expected_tau(state)
    kk = [_e_dkd(state, k) for k in range(state.K)]
    grams = [expected_gram_P(state, k) for k in range(state.K)]
    # Zₖ = E[P_k]ᵀ X_kᵀ μ_A diag(μ_ck): строка m: линейный член для f_m
    z = [((x @ state.P_mean[k]).T @ state.mu_A) * state.mu_C[k] for k, x in enumerate(t.slabs)]

    for m in range(state.M):
        precision = np.eye(state.M)
        lin = np.zeros(state.M)
        for k in range(state.K):
            q = grams[k]
            precision += tau[k] * q[m, m] * kk[k]
            cross = q[m] @ state.mu_F - q[m, m] * state.mu_F[m]
            lin += tau[k] * (z[k][m] - kk[k] @ cross)
        cov, _ = inv_pd(precision, f"f_{m + 1}")
        state.Sigma_F[m] = cov
        state.mu_F[m] = cov @ lin
    return state


def update_qP_vmf(state: VariationalState, t: RaggedTensor3, k: int) -> VariationalState:
    """B_k = E[τ_k] X_kᵀ E[A] E[D_k] E[F]ᵀ; моменты через vmf."""
    tau = expected_tau(state)[k]
    b = tau * (t[k].T @ ((state.mu_A * state.mu_C[k]) @ state.mu_F.T))
    try:
        summary = vmf.evaluate(vmf.VmfMatrix.from_parameter(b), state.vmf_method)
    except vmf.ApproximationOutOfRange as e:
        raise vmf.ApproximationOutOfRange(str(e), slab=k + 1) from e
    state.B[k] = b
    state.P_mean[k] = summary.mean
    return state


def update_qP_cmn(state: VariationalState, t: RaggedTensor3, k: int) -> VariationalState:
    """Среднее через Прокруста, Σ_{P_k} = (E[τ_k] E[F D_k AᵀA D_k Fᵀ] + I)⁻¹."""
    tau = expected_tau(state)[k]
    g = (state.mu_F * state.mu_C[k]) @ (state.mu_A.T @ t[k])
    state.P_mean[k] = orthonormal_procrustes(g).P
    h = _e_fkft(state, _e_dkd(state, k))
    state.Sigma_P[k], _ = inv_pd(tau * h + np.eye(state.M), f"P_{k + 1}")
    return state


def update_qP(state: VariationalState, t: RaggedTensor3, k: int) -> VariationalState:
    if state.config.orthogonality == "vmf":
        return update_qP_vmf(state, t, k)
    return update_qP_cmn(state, t, k)


def _residual_floors(t: RaggedTensor3) -> np.ndarray:
    """Нижняя граница E‖E_k‖²: дисперсия шума не меньше доли среднего квадрата данных."""
    counts = np.array([t.I * j for j in t.widths], dtype=np.float64)
    mean_sq = max(frobenius_sq(t) / counts.sum(), np.finfo(float).tiny)
    return NOISE_VARIANCE_FLOOR * mean_sq * counts


def _residuals(state: VariationalState, t: RaggedTensor3) -> np.ndarray:
    out = np.array([expected_residual_sq(state, t, k) for k in range(state.K)])
    floors = _residual_floors(t)
    low = out < floors
    if np.any(low):
        logger.debug("срезы %s: ожидаемый остаток ниже пола", (np.flatnonzero(low) + 1).tolist())
        state.diagnostics["residual_clamps"] = state.diagnostics.get("residual_clamps", 0) + int(low.sum())
    return np.maximum(out, floors)


def update_qtau(state: VariationalState, t: RaggedTensor3) -> VariationalState:
    cfg = state.config
    counts = np.array([t.I * j for j in t.widths], dtype=np.float64)
    resid = _residuals(state, t)
    if cfg.noise == "hetero":
        state.tau_shape = cfg.tau_shape_prior + 0.5 * counts
        state.tau_scale = 1.0 / (1.0 / cfg.tau_scale_prior + 0.5 * resid)
    else:
        state.tau_shape = np.array([cfg.tau_shape_prior + 0.5 * counts.sum()])
        state.tau_scale = np.array([1.0 / (1.0 / cfg.tau_scale_prior + 0.5 * resid.sum())])
    return state


def update_alpha(state: VariationalState) -> VariationalState:
    """α_m = K / Σ_k E[c_km²]."""
    state.alpha = state.K / component_energy(state)
    return state


# --- ELBO ---------------------------------------------------------------------

def _gaussian_entropy(logdet: float, dim: int) -> float:
    return 0.5 * logdet + 0.5 * dim * (1.0 + _LOG_2PI)


def _logdet(cov: np.ndarray) -> float:
    sign, value = np.linalg.slogdet(cov)
    if sign <= 0:
        return -math.inf
    return float(value)


def elbo_terms(state: VariationalState, t: RaggedTensor3) -> dict[str, float]:
    """Слагаемые ELBO по отдельности (имена совпадают с NonFiniteElbo.term)."""
    cfg = state.config
    n_rows, m = state.mu_A.shape
    tau = expected_tau(state)
    log_tau = expected_log_tau(state)
    e_aa = _e_ata(state)
    e_cc = _e_ctc(state)
    widths = t.widths

    likelihood = 0.0
    for k in range(state.K):
        n = n_rows * widths[k]
        likelihood += 0.5 * n * (log_tau[k] - _LOG_2PI) - 0.5 * tau[k] * expected_residual_sq(state, t, k)

    terms = {"likelihood": likelihood}
    terms["prior_A"] = -0.5 * n_rows * m * _LOG_2PI - 0.5 * float(np.trace(e_aa))
    log_alpha = float(np.sum(np.log(state.alpha)))
    terms["prior_C"] = float(
        sum(-0.5 * m * _LOG_2PI + 0.5 * log_alpha - 0.5 * float(np.dot(state.alpha, np.diag(e_cc[k]))) for k in range(state.K))
    )
    terms["prior_F"] = -0.5 * m * m * _LOG_2PI - 0.5 * (
        float(np.sum(state.mu_F**2)) + float(np.einsum("mii->", state.Sigma_F))
    )

    entropy_p = 0.0
    if cfg.orthogonality == "vmf":
        terms["prior_P"] = -sum(vmf.stiefel_log_volume(j, m) for j in widths)
        for k in range(state.K):
            try:
                entropy_p += vmf.entropy(vmf.VmfMatrix.from_parameter(state.B[k]), state.vmf_method)
            except vmf.ApproximationOutOfRange as e:
                raise vmf.ApproximationOutOfRange(str(e), slab=k + 1) from e
    else:
        prior_p = 0.0
        for k, j in enumerate(widths):
            prior_p += -0.5 * j * m * _LOG_2PI - 0.5 * float(np.trace(expected_gram_P(state, k)))
            entropy_p += 0.5 * j * m * (1.0 + _LOG_2PI) + 0.5 * j * _logdet(state.Sigma_P[k])
        terms["prior_P"] = prior_p

    a0, b0 = cfg.tau_shape_prior, cfg.tau_scale_prior
    shape, scale = state.tau_shape, state.tau_scale
    e_tau = shape * scale
    e_log = digamma(shape) + np.log(scale)
    terms["prior_tau"] = float(np.sum((a0 - 1.0) * e_log - e_tau / b0 - gammaln(a0) - a0 * math.log(b0)))

    terms["entropy_A"] = n_rows * _gaussian_entropy(_logdet(state.Sigma_A), m)
    terms["entropy_C"] = float(sum(_gaussian_entropy(_logdet(s), m) for s in state.Sigma_C))
    terms["entropy_F"] = float(sum(_gaussian_entropy(_logdet(s), m) for s in state.Sigma_F))
    terms["entropy_P"] = entropy_p
    terms["entropy_tau"] = float(np.sum(shape + np.log(scale) + gammaln(shape) + (1.0 - shape) * digamma(shape)))
    return terms


def elbo(state: VariationalState, t: RaggedTensor3) -> float:
    terms = elbo_terms(state, t)
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NonFiniteElbo(name, value)
    return float(sum(terms.values()))


# --- Инициализация и цикл -----------------------------------------------------

def _direct_options(opts: VbOptions) -> DirectFitOptions:
    """Старт VB: лучшая по целевой функции из opts.restarts прямых подгонок."""
    return DirectFitOptions(max_iters=opts.direct_max_iters, restarts=opts.restarts, seed=opts.seed)


def init_from_direct(
    t: RaggedTensor3,
    cfg: GenerativeConfig,
    opts: VbOptions | None = None,
    restart: int = 0,
    direct: Parafac2Point | None = None,
) -> VariationalState:
    """
    Старт VB из решения прямой подгонки.
    Рестарт r ≥ 1 добавляет гауссов шум σ = opts.jitter к средним A, C, F.
    """
    opts = opts or VbOptions()
    if direct is None:
        direct, _ = fit_direct(t, cfg.M, _direct_options(opts))
    m, k_slabs = cfg.M, t.K

    mu_a, mu_c, mu_f = direct.A.copy(), direct.C.copy(), direct.F.copy()
    if restart > 0:
        rng = np.random.default_rng([opts.seed, restart])
        mu_a += opts.jitter * rng.standard_normal(mu_a.shape)
        mu_c += opts.jitter * rng.standard_normal(mu_c.shape)
        mu_f += opts.jitter * rng.standard_normal(mu_f.shape)

    eye = opts.init_covariance * np.eye(m)
    precisions = direct.tau if direct.tau is not None else residual_precisions(direct, t)
    counts = np.array([t.I * j for j in t.widths], dtype=np.float64)
    if cfg.noise == "hetero":
        shape = cfg.tau_shape_prior + 0.5 * counts
        scale = precisions / shape
    else:
        pooled = counts.sum() / float(np.sum(counts / precisions))
        shape = np.array([cfg.tau_shape_prior + 0.5 * counts.sum()])
        scale = np.array([pooled]) / shape

    state = VariationalState(
        config=cfg,
        mu_A=mu_a,
        Sigma_A=eye.copy(),
        mu_C=mu_c,
        Sigma_C=np.tile(eye, (k_slabs, 1, 1)),
        mu_F=mu_f,
        Sigma_F=np.tile(eye, (m, 1, 1)),
        P_mean=[p.copy() for p in direct.P],
        tau_shape=shape,
        tau_scale=scale,
        alpha=np.ones(m),
        vmf_method=opts.vmf_method,
    )
    if cfg.orthogonality == "vmf":
        state.B = [opts.init_concentration * p for p in direct.P]
        state.P_mean = [vmf.moments(vmf.VmfMatrix.from_parameter(b), opts.vmf_method) for b in state.B]
    else:
        state.Sigma_P = np.tile(eye, (k_slabs, 1, 1))
    return state


def coordinate_updates(state: VariationalState, t: RaggedTensor3, update_tau: bool = True, update_ard: bool = True):
    """
    Генератор одной итерации: после каждого шага отдаёт его имя.
    Порядок A, C, F, P_1..P_K, τ, α.
    """
    update_qA(state, t)
    yield "A"
    update_qC(state, t)
    yield "C"
    update_qF(state, t)
    yield "F"
    for k in range(state.K):
        update_qP(state, t, k)
        yield f"P_{k + 1}"
    if update_tau:
        update_qtau(state, t)
        yield "tau"
    if update_ard:
        update_alpha(state)
        yield "alpha"


def run_iteration(state: VariationalState, t: RaggedTensor3, update_tau: bool = True, update_ard: bool = True):
    for _ in coordinate_updates(state, t, update_tau, update_ard):
        pass
    return state


def _run_restart(state: VariationalState, t: RaggedTensor3, opts: VbOptions) -> bool:
    prev = elbo(state, t)
    state.trace = [prev]
    violations = 0
    converged = False
    for it in range(1, opts.max_iters + 1):
        delayed = it <= opts.ard_delay_iters
        run_iteration(
            state,
            t,
            update_tau=not (delayed and opts.delay_freezes == "tau"),
            update_ard=not (delayed and opts.delay_freezes == "alpha"),
        )
        cur = elbo(state, t)
        state.trace.append(cur)
        if cur < prev - ELBO_SLACK * abs(prev):
            violations += 1
            logger.warning("итерация %d: ELBO упал с %.10g до %.10g", it, prev, cur)
            if opts.strict_monotone:
                raise ElboDecreased(f"итерация {it}: ELBO упал с {prev:.10g} до {cur:.10g}")
        if it % 100 == 0:
            logger.debug("VB итерация %d: ELBO=%.10g", it, cur)
        if abs(cur - prev) < opts.rel_tol_elbo * abs(prev):
            converged = True
            break
        prev = cur
    state.diagnostics["monotonicity_violations"] = violations
    return converged


def to_point(state: VariationalState, use_mode: bool = False) -> Parafac2Point:
    """Точечная модель из средних q; use_mode=True берёт моды vMF (ортонормальные P_k)."""
    if use_mode and state.config.orthogonality == "vmf":
        p = [vmf.mode(vmf.VmfMatrix.from_parameter(b)) for b in state.B]
    else:
        p = [x.copy() for x in state.P_mean]
    return Parafac2Point(A=state.mu_A.copy(), F=state.mu_F.copy(), C=state.mu_C.copy(), P=p, tau=expected_tau(state))


def reconstruct_mean(state: VariationalState) -> list[np.ndarray]:
    """Апостериорное среднее срезов: μ_A diag(μ_ck) μ_Fᵀ E[P_k]ᵀ."""
    return [((state.mu_A * state.mu_C[k]) @ state.mu_F.T) @ state.P_mean[k].T for k in range(state.K)]


def vb_r2(state: VariationalState, t: RaggedTensor3) -> float:
    resid = sum(float(np.sum((x - xh) ** 2)) for x, xh in zip(t.slabs, reconstruct_mean(state)))
    return 1.0 - resid / frobenius_sq(t)


def fit_vb(
    t: RaggedTensor3,
    cfg: GenerativeConfig,
    opts: VbOptions | None = None,
) -> tuple[VariationalState, FitReport]:
    """
    opts.restarts запусков вокруг лучшей из opts.restarts прямых подгонок;
    возвращает запуск с наибольшим итоговым ELBO.
    """
    opts = opts or VbOptions()
    started = time.perf_counter()
    direct, direct_trace = fit_direct(t, cfg.M, _direct_options(opts))
    logger.info("VB %s, M=%d: старт из прямой подгонки (цель %.6g)", cfg.variant, cfg.M, direct_trace[-1])

    best = None
    scores: list[float] = []
    failures: list[dict] = []
    for r in range(opts.restarts):
        try:
            state = init_from_direct(t, cfg, opts, restart=r, direct=direct)
            converged = _run_restart(state, t, opts)
        except Parafac2Error as e:
            logger.warning("рестарт %d не удался: %s", r + 1, e)
            failures.append({"restart": r + 1, "error": f"{type(e).__name__}: {e}"})
            scores.append(float("nan"))
            continue
        scores.append(state.trace[-1])
        logger.debug("рестарт %d: ELBO %.10g за %d итераций", r + 1, state.trace[-1], len(state.trace) - 1)
        if best is None or state.trace[-1] > best[0].trace[-1]:
            best = (state, converged)

    if best is None:
        raise AllRestartsFailed(failures)

    state, converged = best
    state.diagnostics.update(
        {
            "vmf_method": state.vmf_method if cfg.orthogonality == "vmf" else None,
            "restart_failures": failures,
            "direct_objective": direct_trace[-1],
            "alpha": state.alpha.tolist(),
            "expected_tau": expected_tau(state).tolist(),
        }
    )
    report = FitReport(
        method=f"vb-{cfg.variant}",
        trace=list(state.trace),
        iterations=len(state.trace) - 1,
        converged=converged,
        r2=vb_r2(state, t),
        ccd=core_consistency(to_point(state, use_mode=True), t),
        elbo=state.trace[-1],
        effective_components=effective_components(state),
        restart_scores=scores,
        diagnostics=dict(state.diagnostics),
        wall_time=time.perf_counter() - started,
    )
    logger.info(
        "VB %s, M=%d: ELBO %.10g, R2 %.6f, эффективных компонент %d",
        cfg.variant, cfg.M, report.elbo, report.r2, report.effective_components,
    )
    return state, report
