"""Synthetic PARAFAC2 data with controlled SNR and homo-/heteroscedastic noise."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from parafac2.services.direct_fit import Parafac2Point, reconstruct_slab
from parafac2.services.errors import InputError
from parafac2.services.linalg import uniform_stiefel
from parafac2.services.tensor import RaggedTensor3, frobenius_sq, new_ragged

logger = logging.getLogger(__name__)

NOISE_MODES = ("homo", "hetero")


class ZeroSignal(InputError):
    """Чистый тензор нулевой: SNR не определён."""


@dataclass
class SynthSpec:
    I: int = 50  # noqa: E741
    J: int = 50
    K: int = 10
    M_true: int = 4
    snr_db: float = 4.0
    noise_mode: str = "homo"
    offdiag: float = 0.4
    c_range: tuple[float, float] = (0.0, 30.0)
    seed: int = 0
    widths: tuple[int, ...] | None = None
    hetero_range: tuple[float, float] = (1.0 / 3.0, 3.0)

    def __post_init__(self):
        self.noise_mode = self.noise_mode.lower()
        self.snr_db = float(self.snr_db)
        self.c_range = tuple(self.c_range)
        self.hetero_range = tuple(self.hetero_range)
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
            if len(self.widths) != self.K:
                raise InputError(f"ширин {len(self.widths)}, а срезов K={self.K}")
        if min(self.I, self.K, min(self.slab_widths)) < 1:
            raise InputError("размеры должны быть ≥ 1")
        if not 1 <= self.M_true <= min(self.I, min(self.slab_widths)):
            raise InputError(f"M_true={self.M_true} должно быть в [1, min(I, J_k)]")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise InputError("snr_db должен быть конечным или +inf")
        if not 0 <= self.offdiag < 1:
            raise InputError("offdiag должен быть в [0, 1)")
        if self.noise_mode not in NOISE_MODES:
            raise InputError(f"noise_mode: одно из {NOISE_MODES}")
        if not self.c_range[0] <= self.c_range[1]:
            raise InputError("c_range: нижняя граница больше верхней")
        if not 0 < self.hetero_range[0] <= self.hetero_range[1]:
            raise InputError("hetero_range должен быть положительным интервалом")

    @property
    def slab_widths(self) -> tuple[int, ...]:
        return self.widths if self.widths is not None else (self.J,) * self.K

    def to_dict(self) -> dict:
        data = asdict(self)
        # JSON не знает бесконечности
        if math.isinf(self.snr_db):
            data["snr_db"] = "inf"
        data["c_range"] = list(self.c_range)
        data["hetero_range"] = list(self.hetero_range)
        data["widths"] = None if self.widths is None else list(self.widths)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("snr_db"), str):
            known["snr_db"] = float(known["snr_db"])
        return cls(**known)


@dataclass(eq=False)
class SynthTruth:
    A: np.ndarray
    F: np.ndarray
    C: np.ndarray
    P: list[np.ndarray]
    clean: RaggedTensor3
    noise: list[np.ndarray]
    noise_variances: np.ndarray
    noise_factors: np.ndarray | None = None
    snr_db: float = math.inf
    noise_mode: str = "homo"
    provenance: dict = field(default_factory=dict)

    def as_point(self) -> Parafac2Point:
        return Parafac2Point(A=self.A.copy(), F=self.F.copy(), C=self.C.copy(), P=[p.copy() for p in self.P])


def target_gram(m: int, offdiag: float) -> np.ndarray:
    """Единицы на диагонали, offdiag вне её."""
    return np.full((m, m), offdiag) + (1.0 - offdiag) * np.eye(m)


def realized_snr_db(clean: RaggedTensor3, noise: list[np.ndarray]) -> float:
    power = float(sum(np.vdot(e, e) for e in noise))
    if power == 0:
        return math.inf
    return 10.0 * math.log10(frobenius_sq(clean) / power)


def _stratified_factors(k: int, bounds: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Лог-равномерные множители: по одному на страту, страты перемешаны."""
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    u = (rng.permutation(k) + rng.uniform(size=k)) / k
    return np.exp(lo + (hi - lo) * u)


def add_noise(
    clean: RaggedTensor3,
    snr_db: float,
    mode: str,
    rng: np.random.Generator,
    hetero_range: tuple[float, float] = (1.0 / 3.0, 3.0),
) -> tuple[RaggedTensor3, list[np.ndarray], np.ndarray, np.ndarray | None]:
    """
    Гауссов шум с точным глобальным SNR (реализованный шум масштабируется).
    Возвращает (наблюдения, шум, дисперсии по срезам, множители hetero).
    """
    signal = frobenius_sq(clean)
    if signal == 0:
        raise ZeroSignal("чистый тензор нулевой")
    if snr_db == math.inf:
        zeros = [np.zeros_like(x) for x in clean.slabs]
        return clean, zeros, np.zeros(clean.K), None

    raw = [rng.standard_normal(x.shape) for x in clean.slabs]
    factors = None
    if mode == "hetero":
        factors = _stratified_factors(clean.K, hetero_range, rng)
        raw = [f * e for f, e in zip(factors, raw)]
    power = float(sum(np.vdot(e, e) for e in raw))
    scale = math.sqrt(signal / (power * 10.0 ** (snr_db / 10.0)))
    noise = [scale * e for e in raw]
    observed = new_ragged([x + e for x, e in zip(clean.slabs, noise)])
    variances = np.array([float(np.vdot(e, e)) / e.size for e in noise])
    return observed, noise, variances, factors


def generate(spec: SynthSpec, rng: np.random.Generator | None = None) -> tuple[RaggedTensor3, SynthTruth]:
    """
    A ~ N(0, 1), F = Lᵀ (LLᵀ: Холецкий целевой Gram), C ~ U(c_range),
    P_k: ортонормализация гауссовой матрицы. Затем шум через add_noise.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    m = spec.M_true
    a = rng.standard_normal((spec.I, m))
    f = np.linalg.cholesky(target_gram(m, spec.offdiag)).T
    c = rng.uniform(spec.c_range[0], spec.c_range[1], size=(spec.K, m))
    p = [uniform_stiefel(rng, j, m) for j in spec.slab_widths]
    clean = new_ragged([reconstruct_slab(a, c[k], f, p[k]) for k in range(spec.K)])

    observed, noise, variances, factors = add_noise(clean, spec.snr_db, spec.noise_mode, rng, spec.hetero_range)
    truth = SynthTruth(
        A=a,
        F=f,
        C=c,
        P=p,
        clean=clean,
        noise=noise,
        noise_variances=variances,
        noise_factors=factors,
        snr_db=spec.snr_db,
        noise_mode=spec.noise_mode,
        provenance={
            "generator": spec.to_dict(),
            "snr_definition": "10*log10(||clean||_F^2 / ||noise||_F^2), global, realized noise rescaled",
            "hetero_recipe": "per-slab sd factors, stratified log-uniform on hetero_range, global rescale",
            "F_convention": "F = L^T, F^T F = target Gram",
        },
    )
    logger.debug("сгенерирован набор %d×%s, SNR %s дБ (%s)", spec.I, spec.slab_widths, spec.snr_db, spec.noise_mode)
    return observed, truth
