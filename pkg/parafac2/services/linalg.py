"""Thin SVD, orthonormal Procrustes and small SPD helpers shared by all solvers."""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg

from parafac2.services.errors import InputError, NumericalFailure

logger = logging.getLogger(__name__)

# Порог «сингулярное число считается нулём» относительно максимального
RANK_TOL = 1e-12
SYMMETRY_TOL = 1e-10
CHOLESKY_JITTER = 1e-10
GRAM_JITTER = 1e-12


class ConvergenceFailure(NumericalFailure):
    """LAPACK не смог посчитать SVD."""


class AsymmetricInput(InputError):
    """Ковариационная матрица несимметрична сильнее допуска."""


class CovarianceNotPD(NumericalFailure):
    """Точность не положительно определена даже после добавки к диагонали."""

    def __init__(self, what: str):
        self.what = what
        super().__init__(f"ковариация {what} не положительно определена")


class SingularNormalEquations(NumericalFailure):
    """Нормальные уравнения дали нечисловое решение."""


@dataclass(frozen=True, eq=False)
class ThinSvd:
    """M = U diag(S) Vᵀ, r = min(p, q)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


class ProcrustesSolution(NamedTuple):
    P: np.ndarray
    objective: float
    rank_deficient: bool


def thin_svd(m: np.ndarray) -> ThinSvd:
    """
    Тонкое SVD с детерминированным выбором знаков:
    наибольший по модулю элемент каждого столбца U неотрицателен.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InputError("SVD: матрица содержит NaN/Inf")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd иногда не сходится там, где gesvd справляется
        logger.debug("gesdd не сошёлся для матрицы %s, пробуем gesvd", m.shape)
        try:
            u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as e:
            raise ConvergenceFailure(f"SVD матрицы {m.shape} не сошлось: {e}") from e

    v = vh.T.copy()
    if u.shape[1]:
        cols = np.arange(u.shape[1])
        signs = np.sign(u[np.argmax(np.abs(u), axis=0), cols])
        signs[signs == 0] = 1.0
        u = u * signs
        v = v * signs
    return ThinSvd(U=u, S=s, V=v)


def orthonormal_procrustes(g: np.ndarray) -> ProcrustesSolution:
    """
    P (J×M), максимизирующая tr(G P) при PᵀP = I, для G размера M×J.
    P = V Uᵀ из thin_svd(G).
    """
    g = np.asarray(g, dtype=np.float64)
    m, j = g.shape
    if j < m:
        raise InputError(f"Procrustes: нужно J ≥ M, получено J={j}, M={m}")
    svd = thin_svd(g)
    p = svd.V @ svd.U.T
    smax = svd.S[0] if svd.S.size else 0.0
    rank_deficient = bool(smax == 0.0 or svd.S[-1] < RANK_TOL * smax)
    if rank_deficient:
        logger.debug("Procrustes: G вырождена, максимизатор не единственный")
    return ProcrustesSolution(P=p, objective=float(np.sum(svd.S)), rank_deficient=rank_deficient)


def _check_symmetric(name: str, cov: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise AsymmetricInput(f"{name} несимметрична")


def hadamard_outer_expectation(
    mean_c: np.ndarray,
    cov_c: np.ndarray,
    mean_a: np.ndarray,
    cov_a: np.ndarray,
) -> np.ndarray:
    """
    E[D aᵀa D] для D = diag(c): (E[ccᵀ]) ∘ (E[aᵀa]).
    mean_a может быть стопкой строк (N×M) с общей ковариацией: тогда E[AᵀA] = μᵀμ + N·cov_a.
    """
    cov_c = np.asarray(cov_c, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    _check_symmetric("cov_c", cov_c)
    _check_symmetric("cov_a", cov_a)
    rows = np.atleast_2d(np.asarray(mean_a, dtype=np.float64))
    e_cc = np.outer(mean_c, mean_c) + cov_c
    e_aa = rows.T @ rows + rows.shape[0] * cov_a
    out = e_cc * e_aa
    return 0.5 * (out + out.T)


def inv_pd(precision: np.ndarray, what: str = "") -> tuple[np.ndarray, float]:
    """
    Обращает SPD-матрицу точности через Холецкого.
    Возвращает (ковариация, log det ковариации). Одна повторная попытка с jitter.
    """
    precision = 0.5 * (precision + precision.T)
    n = precision.shape[0]
    try:
        factor = scipy.linalg.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError:
        jitter = CHOLESKY_JITTER * float(np.trace(precision))
        if not np.isfinite(jitter) or jitter <= 0:
            raise CovarianceNotPD(what)
        logger.debug("Холецкий не прошёл для %s, добавляем jitter %.3g", what, jitter)
        try:
            factor = scipy.linalg.cho_factor(precision + jitter * np.eye(n), lower=True)
        except np.linalg.LinAlgError as e:
            raise CovarianceNotPD(what) from e

    cov = scipy.linalg.cho_solve(factor, np.eye(n))
    cov = 0.5 * (cov + cov.T)
    logdet = -2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return cov, logdet


def solve_gram(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Решает X · gram = rhs (gram симметрична, M×M; rhs N×M).
    При вырожденной gram: Tikhonov 1e-12·trace, затем решение минимальной нормы.
    """
    gram = 0.5 * (gram + gram.T)
    n = gram.shape[0]
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs.T).T
    except np.linalg.LinAlgError:
        pass

    jitter = GRAM_JITTER * float(np.trace(gram))
    if jitter > 0:
        try:
            factor = scipy.linalg.cho_factor(gram + jitter * np.eye(n))
            return scipy.linalg.cho_solve(factor, rhs.T).T
        except np.linalg.LinAlgError:
            pass

    sol = scipy.linalg.lstsq(gram, rhs.T)[0].T
    if not np.all(np.isfinite(sol)):
        raise SingularNormalEquations("нормальные уравнения ALS не решаются")
    return sol


def uniform_stiefel(rng: np.random.Generator, j: int, m: int, size: int | None = None) -> np.ndarray:
    """Равномерные (Хаар) ортонормальные J×M матрицы через QR гауссовой матрицы."""
    shape = (j, m) if size is None else (size, j, m)
    z = rng.standard_normal(shape)
    q, r = np.linalg.qr(z)
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    d = np.where(d == 0, 1.0, d)
    return q * d[..., None, :]
