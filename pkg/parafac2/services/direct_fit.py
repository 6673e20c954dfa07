"""
Direct-fitting PARAFAC2 by alternating least squares.

Each iteration solves the orthogonal Procrustes problem for every P_k and
then runs one CP least-squares sweep (A, then C, then F) on the projected
slabs X_k P_k. Also hosts R2 and the core consistency diagnostic.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from config import DIRECT_REL_TOL_R2, DIRECT_RESTARTS, MAX_ITERS, NOISE_VARIANCE_FLOOR, RESTART_JITTER
from parafac2.services.errors import InputError, NumericalFailure
from parafac2.services.linalg import orthonormal_procrustes, solve_gram
from parafac2.services.tensor import RaggedTensor3, frobenius_sq, project_slabs

logger = logging.getLogger(__name__)


class ModelOrderTooLarge(InputError):
    """M больше ширины какого-то среза: P_k не может быть ортонормальной."""


class DegenerateData(InputError):
    """Все элементы тензора нулевые."""


class ZeroDataNorm(InputError):
    """R2 не определён для нулевых данных."""


class SingularDesign(NumericalFailure):
    """Одна из матриц нагрузок вырождена, ядро Таккера не оценить."""


@dataclass(eq=False)
class Parafac2Point:
    """Точечная модель X_k ≈ A diag(C_k) Fᵀ P_kᵀ."""

    A: np.ndarray
    F: np.ndarray
    C: np.ndarray
    P: list[np.ndarray]
    tau: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.A.shape[1]

    @property
    def K(self) -> int:
        return self.C.shape[0]

    def slab(self, k: int) -> np.ndarray:
        return reconstruct_slab(self.A, self.C[k], self.F, self.P[k])

    def reconstruct(self) -> list[np.ndarray]:
        return [self.slab(k) for k in range(self.K)]

    def copy(self) -> "Parafac2Point":
        return Parafac2Point(
            A=self.A.copy(),
            F=self.F.copy(),
            C=self.C.copy(),
            P=[p.copy() for p in self.P],
            tau=None if self.tau is None else self.tau.copy(),
        )


@dataclass
class DirectFitOptions:
    max_iters: int = MAX_ITERS
    rel_tol_r2: float = DIRECT_REL_TOL_R2
    restarts: int = DIRECT_RESTARTS
    seed: int = 0
    jitter: float = RESTART_JITTER

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters должен быть ≥ 1")
        if not self.rel_tol_r2 > 0:
            raise InputError("rel_tol_r2 должен быть > 0")
        if self.restarts < 1:
            raise InputError("restarts должен быть ≥ 1")


def reconstruct_slab(a: np.ndarray, c_k: np.ndarray, f: np.ndarray, p_k: np.ndarray) -> np.ndarray:
    """A diag(c_k) Fᵀ P_kᵀ."""
    return ((a * c_k) @ f.T) @ p_k.T


def objective(model: Parafac2Point, t: RaggedTensor3) -> float:
    """Σ_k ‖X_k − A D_k Fᵀ P_kᵀ‖²."""
    total = 0.0
    for k, x in enumerate(t.slabs):
        resid = x - model.slab(k)
        total += float(np.vdot(resid, resid))
    return total


def r2(model: Parafac2Point, t: RaggedTensor3) -> float:
    """Доля объяснённой суммы квадратов; может быть отрицательной."""
    total = frobenius_sq(t)
    if total == 0:
        raise ZeroDataNorm("R2: данные нулевые")
    return 1.0 - objective(model, t) / total


def residual_precisions(model: Parafac2Point, t: RaggedTensor3) -> np.ndarray:
    """Оценки точности шума по срезам: I·J_k / ‖X_k − X̂_k‖² (с нижней границей дисперсии)."""
    n_total = sum(t.I * j for j in t.widths)
    floor = NOISE_VARIANCE_FLOOR * max(frobenius_sq(t) / n_total, np.finfo(float).tiny)
    out = np.empty(t.K)
    for k, x in enumerate(t.slabs):
        resid = x - model.slab(k)
        n = x.size
        out[k] = 1.0 / max(float(np.vdot(resid, resid)) / n, floor)
    return out


def update_projections(model: Parafac2Point, t: RaggedTensor3) -> list[np.ndarray]:
    """P_k = Procrustes(F D_k Aᵀ X_k) для каждого среза."""
    out = []
    for k, x in enumerate(t.slabs):
        g = (model.F * model.C[k]) @ (model.A.T @ x)
        sol = orthonormal_procrustes(g)
        if sol.rank_deficient:
            logger.debug("срез %d: вырожденная задача Прокруста", k + 1)
        out.append(sol.P)
    return out


def cp_als_sweep(y: np.ndarray, model: Parafac2Point) -> Parafac2Point:
    """
    Один проход CP-ALS по Y (I×M×K): A, затем C, затем F.
    Каждый шаг есть точное решение МНК при остальных фиксированных.
    """
    a, f, c = model.A, model.F, model.C

    a = solve_gram((f.T @ f) * (c.T @ c), np.einsum("ijk,jm,km->im", y, f, c))
    c = solve_gram((a.T @ a) * (f.T @ f), np.einsum("im,ijk,jm->km", a, y, f))
    f = solve_gram((a.T @ a) * (c.T @ c), np.einsum("ijk,im,km->jm", y, a, c))

    return Parafac2Point(A=a, F=f, C=c, P=model.P, tau=model.tau)


def _check_order(t: RaggedTensor3, m: int) -> None:
    if m < 1:
        raise ModelOrderTooLarge("число компонент должно быть ≥ 1")
    if m > min(t.widths):
        raise ModelOrderTooLarge(f"M={m} больше минимальной ширины среза {min(t.widths)}")


def initial_loadings(t: RaggedTensor3, m: int, seed: int = 0) -> np.ndarray:
    """Старт A: ведущие собственные векторы Σ_k X_k X_kᵀ (знаки зафиксированы)."""
    s = sum(x @ x.T for x in t.slabs)
    _, vecs = scipy.linalg.eigh(s)
    a = vecs[:, ::-1][:, :m]
    if a.shape[1] < m:
        # M > I: недостающие столбцы случайные
        rng = np.random.default_rng(seed)
        a = np.hstack([a, rng.standard_normal((t.I, m - a.shape[1]))])
    return _fix_signs(a)


def _fix_signs(a: np.ndarray) -> np.ndarray:
    cols = np.arange(a.shape[1])
    signs = np.sign(a[np.argmax(np.abs(a), axis=0), cols])
    signs[signs == 0] = 1.0
    return a * signs


def _fit_single(t: RaggedTensor3, a0: np.ndarray, opts: DirectFitOptions, total: float):
    m = a0.shape[1]
    model = Parafac2Point(A=a0, F=np.eye(m), C=np.ones((t.K, m)), P=[])
    model.P = update_projections(model, t)
    trace = [objective(model, t)]
    r2_prev = 1.0 - trace[0] / total
    converged = False

    for it in range(1, opts.max_iters + 1):
        model.P = update_projections(model, t)
        model = cp_als_sweep(project_slabs(t, model.P), model)
        trace.append(objective(model, t))
        r2_now = 1.0 - trace[-1] / total
        if it % 500 == 0:
            logger.debug("ALS итерация %d: R2=%.12f", it, r2_now)
        if abs(r2_now - r2_prev) < opts.rel_tol_r2 * max(abs(r2_prev), np.finfo(float).tiny):
            converged = True
            break
        r2_prev = r2_now

    return model, trace, converged


def fit_direct(
    t: RaggedTensor3,
    m: int,
    opts: DirectFitOptions | None = None,
) -> tuple[Parafac2Point, list[float]]:
    """
    PARAFAC2 методом прямой подгонки.
    Возвращает лучшую из opts.restarts моделей и трассу её целевой функции.
    """
    opts = opts or DirectFitOptions()
    _check_order(t, m)
    total = frobenius_sq(t)
    if total == 0:
        raise DegenerateData("тензор целиком нулевой")

    base = initial_loadings(t, m, opts.seed)
    best = None
    for r in range(opts.restarts):
        a0 = base.copy()
        if r > 0:
            rng = np.random.default_rng([opts.seed, r])
            a0 = a0 + opts.jitter * rng.standard_normal(a0.shape)
        model, trace, converged = _fit_single(t, a0, opts, total)
        logger.debug("рестарт %d: цель %.6g за %d итераций", r + 1, trace[-1], len(trace) - 1)
        if best is None or trace[-1] < best[1][-1]:
            best = (model, trace, converged)

    model, trace, converged = best
    model.tau = residual_precisions(model, t)
    if not converged:
        logger.info("ALS остановлен по лимиту итераций (%d)", opts.max_iters)
    return model, trace


def estimate_core(y: np.ndarray, a: np.ndarray, f: np.ndarray, c: np.ndarray) -> np.ndarray:
    """МНК-ядро Таккера G (M×M×M) при фиксированных A, F, C."""
    pinvs = []
    for name, loading in (("A", a), ("F", f), ("C", c)):
        s = np.linalg.svd(loading, compute_uv=False)
        m = loading.shape[1]
        if loading.shape[0] < m or s[-1] <= np.finfo(float).eps * max(loading.shape) * s[0]:
            raise SingularDesign(f"матрица {name} вырождена")
        pinvs.append(scipy.linalg.pinv(loading))
    return np.einsum("pi,qj,rk,ijk->pqr", pinvs[0], pinvs[1], pinvs[2], y)


def ccd_from_core(g: np.ndarray) -> float:
    """100·(1 − ‖G − I‖² / ‖I‖²) для суперидиагонального I."""
    m = g.shape[0]
    ideal = np.zeros_like(g)
    ideal[np.arange(m), np.arange(m), np.arange(m)] = 1.0
    return 100.0 * (1.0 - float(np.sum((g - ideal) ** 2)) / m)


def balance_scales(a: np.ndarray, f: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Одна и та же норма компоненты во всех трёх модах (модель не меняется)."""
    norms = [np.linalg.norm(x, axis=0) for x in (a, f, c)]
    common = np.cbrt(norms[0] * norms[1] * norms[2])
    return tuple(x * (common / np.where(n > 0, n, 1.0)) for x, n in zip((a, f, c), norms))


def core_consistency(model: Parafac2Point, t: RaggedTensor3) -> float:
    """CCD модели по сбалансированным нагрузкам; NaN, если нагрузки вырождены."""
    y = project_slabs(t, model.P)
    try:
        g = estimate_core(y, *balance_scales(model.A, model.F, model.C))
    except SingularDesign as e:
        logger.warning("CCD не определён: %s", e)
        return float("nan")
    return ccd_from_core(g)
