"""
Matrix von Mises-Fisher distribution on the Stiefel manifold.

Density p(P) ∝ exp(tr BᵀP) for J×M orthonormal P. Everything depends on B
only through its thin SVD B = U diag(S) Vᵀ: the normaliser is
₀F₁(J/2; S²/4) times the Stiefel volume, and E[P] = U diag(g) Vᵀ with
g_m = ∂ log ₀F₁ / ∂S_m.

Three evaluators of log ₀F₁ are available:

* ``bessel``  exact for M = 1 (modified Bessel functions);
* ``series``  exact zonal-polynomial series (Jack polynomials, α = 2) for
  M ≤ 2 and moderate S; gradients by central differences;
* ``saddle``  per-singular-value saddle point with pairwise curvature terms.
  Exact at S = 0 and equal to the Laplace expansion of the Stiefel integral
  for large S, so it covers the whole range including S_m > 10³.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.special import gammaln, hyp0f1, ive, logsumexp, multigammaln

from parafac2.services.errors import BudgetExceeded, InputError, NumericalFailure
from parafac2.services.linalg import ThinSvd, thin_svd, uniform_stiefel

logger = logging.getLogger(__name__)

METHODS = ("auto", "bessel", "series", "saddle")

# Проверенный диапазон сингулярных чисел
ENVELOPE_MAX_S = 1e3
# Ряд по зональным многочленам: только M ≤ 2 и умеренные S
SERIES_MAX_M = 2
SERIES_MAX_S = 20.0
SERIES_MAX_DEGREE = 400
SERIES_RTOL = 1e-17
# Шаг центральных разностей: h = max(FD_ABS_STEP, FD_REL_STEP·S)
FD_ABS_STEP = 1e-5
FD_REL_STEP = 1e-5
REJECTION_BUDGET = 10**7
_ALPHA = 2.0
_G_MAX = 1.0 - 1e-15


class ApproximationOutOfRange(NumericalFailure):
    """Сингулярные числа вне области, где выбранное приближение ₀F₁ применимо."""

    def __init__(self, detail: str, slab: int | None = None):
        self.slab = slab
        prefix = f"срез {slab}: " if slab is not None else ""
        super().__init__(prefix + detail)


class RejectionBudgetExceeded(BudgetExceeded):
    """Сэмплер с равномерным предложением исчерпал бюджет."""

    def __init__(self, proposals: int, accepted: int):
        self.proposals = proposals
        self.accepted = accepted
        self.acceptance_rate = accepted / proposals if proposals else 0.0
        super().__init__(
            f"принято {accepted} из {proposals} предложений "
            f"(доля {self.acceptance_rate:.3g}); уменьшите концентрацию или увеличьте бюджет"
        )


@dataclass(frozen=True, eq=False)
class VmfMatrix:
    """Параметр B (J×M) и его тонкое SVD."""

    B: np.ndarray
    svd: ThinSvd

    @classmethod
    def from_parameter(cls, b: np.ndarray) -> "VmfMatrix":
        b = np.asarray(b, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] < 1 or b.shape[0] < b.shape[1]:
            raise InputError(f"vMF: нужна матрица J×M с J ≥ M ≥ 1, получено {b.shape}")
        return cls(B=b, svd=thin_svd(b))

    @property
    def J(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def S(self) -> np.ndarray:
        return self.svd.S


class VmfSummary(NamedTuple):
    log_norm: float
    mean: np.ndarray
    entropy: float
    g: np.ndarray
    g_complement: np.ndarray
    method: str


def stiefel_log_volume(j: int, m: int) -> float:
    """log(2^M π^{JM/2} / Γ_M(J/2))."""
    if not j >= m >= 1:
        raise InputError(f"объём Штифеля: нужно J ≥ M ≥ 1, получено J={j}, M={m}")
    return m * math.log(2.0) + 0.5 * j * m * math.log(math.pi) - float(multigammaln(0.5 * j, m))


# --- M = 1: модифицированные функции Бесселя ---------------------------------

def _hyp0f1_bessel(s: float, j: int) -> tuple[float, float, float]:
    """(log ₀F₁, g, 1 − g) для M = 1."""
    b = 0.5 * j
    if s == 0.0:
        return 0.0, 0.0, 1.0
    if s < 1.0:
        x = 0.25 * s * s
        f0 = hyp0f1(b, x)
        g = float(0.5 * s * hyp0f1(b + 1.0, x) / (b * f0))
        return float(np.log(f0)), g, 1.0 - g
    nu = b - 1.0
    i_nu = ive(nu, s)
    i_b = ive(b, s)
    value = gammaln(b) - nu * math.log(0.5 * s) + math.log(i_nu) + s
    return float(value), float(i_b / i_nu), float((i_nu - i_b) / i_nu)


# --- Ряд по зональным многочленам ---------------------------------------------

def _partitions(k: int, parts: int, max_part: int | None = None):
    """Разбиения k не более чем на parts частей, по невозрастанию."""
    if max_part is None:
        max_part = k
    if k == 0:
        yield ()
        return
    if parts == 0:
        return
    for first in range(min(k, max_part), 0, -1):
        for rest in _partitions(k - first, parts - 1, first):
            yield (first,) + rest


def _conjugate(kappa: tuple[int, ...]) -> tuple[int, ...]:
    if not kappa:
        return ()
    return tuple(sum(1 for p in kappa if p >= col) for col in range(1, kappa[0] + 1))


@lru_cache(maxsize=None)
def _log_beta(kappa: tuple[int, ...], mu: tuple[int, ...]) -> float:
    """log β_{κμ} из рекурсии для многочленов Джека при полосе κ/μ."""
    kc, mc = _conjugate(kappa), _conjugate(mu)
    total = 0.0
    for i, row in enumerate(kappa, 1):
        for col in range(1, row + 1):
            kcol = kc[col - 1]
            mcol = mc[col - 1] if col <= len(mc) else 0
            if kcol == mcol:
                h = kcol - i + _ALPHA * (row - col + 1)
            else:
                h = kcol - i + 1 + _ALPHA * (row - col)
            total += math.log(h)
    for i, row in enumerate(mu, 1):
        for col in range(1, row + 1):
            kcol, mcol = kc[col - 1], mc[col - 1]
            if kcol == mcol:
                h = mcol - i + _ALPHA * (row - col + 1)
            else:
                h = mcol - i + 1 + _ALPHA * (row - col)
            total -= math.log(h)
    return total


@lru_cache(maxsize=None)
def _log_hook_product(kappa: tuple[int, ...]) -> float:
    """log j_κ: произведение верхних и нижних крюков."""
    kc = _conjugate(kappa)
    total = 0.0
    for i, row in enumerate(kappa, 1):
        for col in range(1, row + 1):
            leg = kc[col - 1] - i
            arm = row - col
            total += math.log(leg + _ALPHA * (arm + 1)) + math.log(leg + 1 + _ALPHA * arm)
    return total


@lru_cache(maxsize=None)
def _log_pochhammer(c: float, kappa: tuple[int, ...]) -> float:
    total = 0.0
    for i, row in enumerate(kappa, 1):
        for col in range(1, row + 1):
            total += math.log(c - (i - 1) / _ALPHA + col - 1)
    return total


@lru_cache(maxsize=None)
def _log_jack_one(k: int) -> float:
    """log коэффициента J_(k)(x) = x^k Π_{t<k} (1 + α t)."""
    return float(sum(math.log(1.0 + _ALPHA * t) for t in range(k)))


def _log_jack(kappa: tuple[int, ...], logx: tuple[float, ...], n: int, cache: dict) -> float:
    """log J_κ(x_1..x_n), рекурсия по последней переменной."""
    if len(kappa) > n:
        return -math.inf
    if not kappa:
        return 0.0
    key = (kappa, n)
    if key in cache:
        return cache[key]

    size = sum(kappa)
    last = logx[n - 1]
    if n == 1:
        out = size * last + _log_jack_one(size) if last > -math.inf else -math.inf
        cache[key] = out
        return out

    padded = kappa + (0,) * (n + 1 - len(kappa))
    ranges = [range(padded[i + 1], padded[i] + 1) for i in range(n - 1)]
    terms = []
    for mu in itertools.product(*ranges):
        mu = tuple(p for p in mu if p > 0)
        d = size - sum(mu)
        if d > 0 and last == -math.inf:
            continue
        lj = _log_jack(mu, logx, n - 1, cache)
        if lj == -math.inf:
            continue
        terms.append(lj + (d * last if d else 0.0) + _log_beta(kappa, mu))
    out = float(logsumexp(terms)) if terms else -math.inf
    cache[key] = out
    return out


def _log_hyp0f1_series_value(s: np.ndarray, j: int) -> float:
    m = s.size
    c = 0.5 * j
    x = 0.25 * s * s
    logx = tuple(math.log(v) if v > 0 else -math.inf for v in x)
    cache: dict = {}
    log_total = 0.0
    prev = None
    for k in range(1, SERIES_MAX_DEGREE + 1):
        terms = []
        for kappa in _partitions(k, m):
            lj = _log_jack(kappa, logx, m, cache)
            if lj == -math.inf:
                continue
            terms.append(k * math.log(_ALPHA) + lj - _log_hook_product(kappa) - _log_pochhammer(c, kappa))
        if not terms:
            return log_total
        lt = float(logsumexp(terms))
        log_total = float(np.logaddexp(log_total, lt))
        if prev is not None and lt < prev and lt - log_total < math.log(SERIES_RTOL):
            return log_total
        prev = lt
    raise ApproximationOutOfRange(f"ряд ₀F₁ не сошёлся за {SERIES_MAX_DEGREE} членов")


def _hyp0f1_series(s: np.ndarray, j: int) -> tuple[float, np.ndarray]:
    value = _log_hyp0f1_series_value(s, j)
    grad = np.empty_like(s)
    for idx in range(s.size):
        h = max(FD_ABS_STEP, FD_REL_STEP * s[idx])
        up, down = s.copy(), s.copy()
        up[idx] += h
        down[idx] -= h
        # ₀F₁ зависит от S², поэтому отрицательный аргумент допустим
        grad[idx] = (_log_hyp0f1_series_value(up, j) - _log_hyp0f1_series_value(down, j)) / (2.0 * h)
    return value, grad


# --- Седловая точка -----------------------------------------------------------

def _hyp0f1_saddle(s: np.ndarray, j: int) -> tuple[float, np.ndarray, np.ndarray, float]:
    """(log ₀F₁, g, 1 − g, log ₀F₁ − Sᵀg) без вычитания больших чисел при S ≫ 1."""
    b = 0.5 * j
    half = 0.5 * s
    root = np.hypot(b, s)
    sh = 0.5 * (b + root)

    phi = sh + half * (half / sh) - b * np.log(sh) - (b - b * math.log(b))
    curv = (sh[:, None] + sh[None, :] - b) / (sh[:, None] * sh[None, :])
    upper = np.triu_indices(s.size)
    pair_log = 0.5 * np.sum(np.log(b * curv[upper]))
    value = float(np.sum(phi) - pair_log)

    d_pair = -0.5 * (
        np.sum(1.0 / (sh[:, None] + sh[None, :] - b), axis=1)
        + 1.0 / (2.0 * sh - b)
        - (s.size + 1) / sh
    )
    pair_grad = d_pair * s / (2.0 * root)
    grad = half / sh + pair_grad
    # 1 − S/(b + root) = (b + b²/(root + S)) / (b + root)
    complement = (b + b * b / (root + s)) / (b + root) - pair_grad
    # phi − S·S/(2sh) = −b log(sh/b)
    dual = float(np.sum(-b * np.log(sh / b) - s * pair_grad) - pair_log)
    return value, grad, complement, dual


def _log_hyp0f1_parts(s: np.ndarray, j: int, method: str):
    """(значение, g, 1 − g, значение − Sᵀg, метод) после проверок и выбора метода."""
    s = np.asarray(s, dtype=np.float64).ravel()
    m = s.size
    if method not in METHODS:
        raise InputError(f"неизвестный метод ₀F₁: {method}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ApproximationOutOfRange(f"сингулярные числа вне области: {s}")
    if j < m:
        raise InputError(f"₀F₁: нужно J ≥ M, получено J={j}, M={m}")

    if method == "auto":
        if m == 1:
            method = "bessel"
        elif m <= SERIES_MAX_M and s.max(initial=0.0) <= SERIES_MAX_S:
            method = "series"
        else:
            method = "saddle"

    complement = dual = None
    if method == "bessel":
        if m != 1:
            raise ApproximationOutOfRange(f"формула Бесселя только для M = 1, получено M={m}")
        value, g, gap = _hyp0f1_bessel(float(s[0]), j)
        grad, complement = np.array([g]), np.array([gap])
    elif method == "series":
        if m > SERIES_MAX_M or s.max(initial=0.0) > SERIES_MAX_S:
            raise ApproximationOutOfRange(
                f"ряд применим при M ≤ {SERIES_MAX_M} и S ≤ {SERIES_MAX_S}, получено M={m}, max S={s.max():.4g}"
            )
        value, grad = _hyp0f1_series(s, j)
    else:
        if s.max(initial=0.0) > ENVELOPE_MAX_S:
            logger.debug("max S=%.3g > %.0e: седловая точка в асимптотическом режиме", s.max(), ENVELOPE_MAX_S)
        value, grad, complement, dual = _hyp0f1_saddle(s, j)

    if complement is None:
        complement = 1.0 - grad
    clipped = (grad < 0.0) | (grad > _G_MAX)
    grad = np.clip(grad, 0.0, _G_MAX)
    complement = np.where(clipped, 1.0 - grad, complement)
    if dual is None or np.any(clipped):
        dual = value - float(np.dot(s, grad))
    if not np.isfinite(value) or not np.all(np.isfinite(grad)) or not math.isfinite(dual):
        raise ApproximationOutOfRange(f"₀F₁ ({method}) дал нечисловой результат при S={s}")
    return float(value), grad, complement, float(dual), method


def log_hyp0f1(s, j: int, method: str = "auto") -> tuple[float, np.ndarray, str]:
    """
    log ₀F₁(J/2; diag(S)²/4) и его градиент по S.
    Возвращает (значение, градиент, фактически использованный метод).
    """
    value, grad, _, _, used = _log_hyp0f1_parts(s, j, method)
    return value, grad, used


def evaluate(d: VmfMatrix, method: str = "auto") -> VmfSummary:
    """Нормировка, среднее, энтропия и 1 − g за один проход."""
    value, g, complement, dual, used = _log_hyp0f1_parts(d.S, d.J, method)
    log_volume = stiefel_log_volume(d.J, d.M)
    mean = (d.svd.U * g) @ d.svd.V.T
    return VmfSummary(
        log_norm=value + log_volume,
        mean=mean,
        entropy=dual + log_volume,
        g=g,
        g_complement=complement,
        method=used,
    )


def log_norm_const(d: VmfMatrix, method: str = "auto") -> float:
    value, _, _ = log_hyp0f1(d.S, d.J, method)
    return value + stiefel_log_volume(d.J, d.M)


def moments(d: VmfMatrix, method: str = "auto") -> np.ndarray:
    """E[P]; второй момент E[PᵀP] тождественно равен I_M."""
    return evaluate(d, method).mean


def gram_gap(d: VmfMatrix, method: str = "auto") -> np.ndarray:
    """E[PᵀP] − E[P]ᵀE[P] = V diag(1 − g²) Vᵀ."""
    c = evaluate(d, method).g_complement
    return (d.svd.V * (c * (2.0 - c))) @ d.svd.V.T


def entropy(d: VmfMatrix, method: str = "auto") -> float:
    return evaluate(d, method).entropy


def mode(d: VmfMatrix) -> np.ndarray:
    """Мода U Vᵀ."""
    return d.svd.U @ d.svd.V.T


# --- Сэмплеры -----------------------------------------------------------------

def vmf_sample(
    d: VmfMatrix,
    rng: np.random.Generator,
    size: int | None = None,
    budget: int = REJECTION_BUDGET,
    batch: int = 4096,
) -> np.ndarray:
    """
    Точные выборки отбором: равномерное предложение на многообразии Штифеля,
    принятие с вероятностью exp(tr BᵀP − ΣS).
    """
    target = 1 if size is None else size
    shift = float(np.sum(d.S))
    chunks = []
    accepted = proposals = 0
    while accepted < target:
        if proposals >= budget:
            raise RejectionBudgetExceeded(proposals, accepted)
        n = min(batch, budget - proposals)
        q = uniform_stiefel(rng, d.J, d.M, n)
        log_acc = np.einsum("jm,njm->n", d.B, q) - shift
        keep = np.log(rng.uniform(size=n)) < log_acc
        chunks.append(q[keep])
        accepted += int(keep.sum())
        proposals += n
    out = np.concatenate(chunks)[:target]
    return out[0] if size is None else out


def sample_vmf_vector(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Единичный вектор с плотностью ∝ exp(zᵀy) на сфере (алгоритм Вуда).
    """
    dim = z.size
    kappa = float(np.linalg.norm(z))
    if dim == 1:
        # сфера S⁰ = {−1, +1}
        p_plus = 1.0 / (1.0 + math.exp(-2.0 * z[0])) if z[0] > -350 else 0.0
        return np.array([1.0 if rng.uniform() < p_plus else -1.0])
    if kappa == 0.0:
        y = rng.standard_normal(dim)
        return y / np.linalg.norm(y)

    b = (dim - 1) / (2.0 * kappa + math.sqrt(4.0 * kappa**2 + (dim - 1) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (dim - 1) * math.log(1.0 - x0**2)
    while True:
        zz = rng.beta(0.5 * (dim - 1), 0.5 * (dim - 1))
        w = (1.0 - (1.0 + b) * zz) / (1.0 - (1.0 - b) * zz)
        if kappa * w + (dim - 1) * math.log(1.0 - x0 * w) - c >= math.log(rng.uniform()):
            break

    v = rng.standard_normal(dim - 1)
    v /= np.linalg.norm(v)
    x = np.concatenate(([w], math.sqrt(max(1.0 - w * w, 0.0)) * v))

    # отражение Хаусхолдера переводит e1 в mu
    mu = z / kappa
    u = -mu.copy()
    u[0] += 1.0
    nu = float(np.dot(u, u))
    if nu < 1e-30:
        return x
    return x - (2.0 * np.dot(u, x) / nu) * u


def vmf_gibbs(
    d: VmfMatrix,
    rng: np.random.Generator,
    n_samples: int,
    burn_in: int = 200,
    thin: int = 1,
) -> np.ndarray:
    """
    Цепь Гиббса по столбцам: столбец m при остальных распределён как
    векторный vMF на ортогональном дополнении остальных столбцов.
    """
    p = mode(d).copy()
    out = np.empty((n_samples, d.J, d.M))
    total = burn_in + n_samples * thin
    for it in range(total):
        for m in range(d.M):
            if d.M > 1:
                basis = scipy.linalg.null_space(np.delete(p, m, axis=1).T)
            else:
                basis = np.eye(d.J)
            y = sample_vmf_vector(basis.T @ d.B[:, m], rng)
            p[:, m] = basis @ y
        if it >= burn_in and (it - burn_in) % thin == 0:
            out[(it - burn_in) // thin] = p
    return out
