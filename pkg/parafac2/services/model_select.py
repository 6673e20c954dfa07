"""
Model-order sweeps and evaluation metrics.

Cells of a sweep are independent fits; they run in a process pool and the
report is assembled in grid order, so results never depend on the pool size.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from config import resolve_workers
from parafac2.services.direct_fit import (
    DirectFitOptions,
    Parafac2Point,
    core_consistency,
    fit_direct,
    r2,
)
from parafac2.services.errors import InputError, Parafac2Error
from parafac2.services.reports import FitReport
from parafac2.services.synth import SynthSpec, SynthTruth, generate
from parafac2.services.tensor import RaggedTensor3, frobenius_sq
from parafac2.services.vb import (
    GenerativeConfig,
    VariationalState,
    VbOptions,
    fit_vb,
    reconstruct_mean,
    to_point,
)

logger = logging.getLogger(__name__)

METHODS = ("direct", "vb-vmf-homo", "vb-vmf-hetero", "vb-cmn-homo", "vb-cmn-hetero")
METRICS = ("r2", "noiseless_r2", "ccd", "elbo", "effective_components")
ELBOW_FRACTION = 0.1
CCD_THRESHOLD = 80.0


def parse_method(name: str) -> GenerativeConfig | None:
    """'direct' → None; 'vb-vMF-hetero' → GenerativeConfig (M подставляется позже)."""
    key = name.strip().lower()
    if key not in METHODS:
        raise InputError(f"неизвестный метод '{name}', допустимы: {', '.join(METHODS)}")
    if key == "direct":
        return None
    _, orth, noise = key.split("-")
    return GenerativeConfig(M=1, orthogonality=orth, noise=noise)


def run_method(
    t: RaggedTensor3,
    method: str,
    m: int,
    seed: int = 0,
    direct_opts: DirectFitOptions | None = None,
    vb_opts: VbOptions | None = None,
) -> tuple[Parafac2Point | VariationalState, FitReport]:
    """Одна подгонка выбранным методом; для прямой подгонки тоже строится FitReport."""
    cfg = parse_method(method)
    if cfg is None:
        opts = replace(direct_opts or DirectFitOptions(), seed=seed)
        started = time.perf_counter()
        model, trace = fit_direct(t, m, opts)
        report = FitReport(
            method="direct",
            trace=trace,
            iterations=len(trace) - 1,
            converged=len(trace) - 1 < opts.max_iters,
            r2=r2(model, t),
            ccd=core_consistency(model, t),
            diagnostics={"tau": model.tau.tolist()},
            wall_time=time.perf_counter() - started,
        )
        return model, report
    cfg.M = m
    return fit_vb(t, cfg, replace(vb_opts or VbOptions(), seed=seed))


# --- Метрики ------------------------------------------------------------------

def _reconstruction(model) -> list[np.ndarray]:
    if isinstance(model, VariationalState):
        return reconstruct_mean(model)
    return model.reconstruct()


def noiseless_r2(model: Parafac2Point | VariationalState, truth: SynthTruth) -> float:
    """R2 реконструкции относительно чистого (бесшумного) тензора."""
    total = frobenius_sq(truth.clean)
    resid = sum(float(np.sum((x - xh) ** 2)) for x, xh in zip(truth.clean.slabs, _reconstruction(model)))
    return 1.0 - resid / total


def congruence_matrix(est: np.ndarray, ref: np.ndarray, kind: str = "tucker") -> np.ndarray:
    """
    Конгруэнтность Таккера (косинус сырых столбцов) или корреляция Пирсона.
    Нулевой столбец даёт нули в своей строке/столбце.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape[0] != ref.shape[0]:
        raise InputError(f"конгруэнтность: {est.shape[0]} строк против {ref.shape[0]}")
    if kind == "pearson":
        est = est - est.mean(axis=0)
        ref = ref - ref.mean(axis=0)
    elif kind != "tucker":
        raise InputError(f"неизвестная метрика конгруэнтности: {kind}")

    ne = np.linalg.norm(est, axis=0)
    nr = np.linalg.norm(ref, axis=0)
    if np.any(ne == 0) or np.any(nr == 0):
        logger.debug("конгруэнтность: нулевые столбцы, записи обнулены")
    ne = np.where(ne == 0, np.inf, ne)
    nr = np.where(nr == 0, np.inf, nr)
    return np.clip((est / ne).T @ (ref / nr), -1.0, 1.0)


def match_components(congruence: np.ndarray) -> list[tuple[int, int, float, float]]:
    """Венгерский алгоритм по |конгруэнтности|: (оценка, эталон, знак, значение)."""
    rows, cols = linear_sum_assignment(-np.abs(congruence))
    out = []
    for r, c in zip(rows, cols):
        value = float(congruence[r, c])
        out.append((int(r), int(c), 1.0 if value >= 0 else -1.0, value))
    return out


def _mode2_stack(point: Parafac2Point) -> np.ndarray:
    return np.vstack([p @ point.F for p in point.P])


def factor_match(est: Parafac2Point, ref: Parafac2Point, kind: str = "tucker") -> float:
    """Средняя по сопоставленным компонентам |cong(A)·cong(C)·cong(P_k F)|."""
    product = (
        congruence_matrix(est.A, ref.A, kind)
        * congruence_matrix(est.C, ref.C, kind)
        * congruence_matrix(_mode2_stack(est), _mode2_stack(ref), kind)
    )
    pairs = match_components(product)
    return float(np.mean([abs(v) for _, _, _, v in pairs]))


def component_congruence(est: Parafac2Point, ref: Parafac2Point, kind: str = "tucker") -> list[dict]:
    """
    |Конгруэнтность| по модам A, B (стопка P_k F) и C для каждой эталонной компоненты
    после сопоставления по произведению трёх мод. Данные для тепловой карты.
    """
    per_mode = {
        "A": congruence_matrix(est.A, ref.A, kind),
        "B": congruence_matrix(_mode2_stack(est), _mode2_stack(ref), kind),
        "C": congruence_matrix(est.C, ref.C, kind),
    }
    pairs = match_components(per_mode["A"] * per_mode["B"] * per_mode["C"])
    out = []
    for e, r, _, _ in sorted(pairs, key=lambda p: p[1]):
        out.append({"component": r + 1, **{mode: abs(float(c[e, r])) for mode, c in per_mode.items()}})
    return out


def elbow(ms: list[int], values: list[float], fraction: float = ELBOW_FRACTION) -> int | None:
    """Наименьшее M, прирост с которого ниже fraction от первого прироста."""
    if len(ms) < 2:
        return ms[0] if ms else None
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        return None
    gains = np.diff(values)
    first = gains[0]
    if first <= 0:
        return ms[0]
    for i, gain in enumerate(gains):
        if gain < fraction * first:
            return ms[i]
    return ms[-1]


def ccd_choice(ms: list[int], ccds: list[float], threshold: float = CCD_THRESHOLD) -> int | None:
    """Наибольшее M с CCD ≥ threshold."""
    ok = [m for m, v in zip(ms, ccds) if v is not None and math.isfinite(v) and v >= threshold]
    return max(ok) if ok else None


def derive_seed(master: int, *keys: int) -> int:
    """Сид ячейки из мастер-сида и целочисленных ключей (SeedSequence.spawn_key)."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- Перебор ------------------------------------------------------------------

@dataclass(eq=False)
class SweepDataset:
    name: str
    tensor: RaggedTensor3
    truth: SynthTruth | None = None


@dataclass
class SweepCell:
    dataset: str
    method: str
    M: int
    seed: int
    r2: float = float("nan")
    noiseless_r2: float | None = None
    ccd: float = float("nan")
    elbo: float | None = None
    effective_components: int | None = None
    congruence: float | None = None
    congruence_pearson: float | None = None
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    error: str | None = None


CSV_COLUMNS = (
    "dataset", "method", "M", "seed", "r2", "noiseless_r2", "ccd", "elbo",
    "effective_components", "congruence", "congruence_pearson", "iterations", "converged", "error",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class SweepReport:
    cells: list[SweepCell] = field(default_factory=list)

    def rows(self) -> list[dict]:
        """Строки CSV (без wall_time, чтобы файл был воспроизводим)."""
        return [{col: _fmt(getattr(c, col)) for col in CSV_COLUMNS} for c in self.cells]

    def long_rows(self) -> list[dict]:
        """Длинный формат: dataset, method, M, seed, metric, value."""
        out = []
        for c in self.cells:
            if c.error:
                continue
            for metric in METRICS:
                value = getattr(c, metric)
                if value is None:
                    continue
                out.append({"dataset": c.dataset, "method": c.method, "M": c.M, "seed": c.seed,
                            "metric": metric, "value": _fmt(float(value))})
        return out

    def selections(self) -> list[dict]:
        """Выбор M по правилу локтя (ELBO, R2) и по CCD для каждой пары набор×метод."""
        out = []
        groups: dict[tuple[str, str], list[SweepCell]] = {}
        for c in self.cells:
            groups.setdefault((c.dataset, c.method), []).append(c)
        for (dataset, method), cells in groups.items():
            cells = sorted((c for c in cells if not c.error), key=lambda c: c.M)
            ms = [c.M for c in cells]
            out.append({
                "dataset": dataset,
                "method": method,
                "elbo_elbow": _fmt(elbow(ms, [c.elbo for c in cells]) if cells and cells[0].elbo is not None else None),
                "r2_elbow": _fmt(elbow(ms, [c.r2 for c in cells])),
                "ccd_choice": _fmt(ccd_choice(ms, [c.ccd for c in cells])),
            })
        return out

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "selections": self.selections()}


def _run_cell(task: dict) -> SweepCell:
    cell = SweepCell(dataset=task["dataset"].name, method=task["method"], M=task["M"], seed=task["seed"])
    dataset: SweepDataset = task["dataset"]
    try:
        model, report = run_method(dataset.tensor, task["method"], task["M"], task["seed"],
                                   task["direct_opts"], task["vb_opts"])
    except Parafac2Error as e:
        logger.warning("ячейка %s/%s/M=%d не посчитана: %s", cell.dataset, cell.method, cell.M, e)
        cell.error = f"{type(e).__name__}: {e}"
        return cell

    cell.r2 = report.r2
    cell.ccd = report.ccd
    cell.elbo = report.elbo
    cell.effective_components = report.effective_components
    cell.iterations = report.iterations
    cell.converged = report.converged
    cell.wall_time = report.wall_time
    if dataset.truth is not None:
        cell.noiseless_r2 = noiseless_r2(model, dataset.truth)
        point = to_point(model, use_mode=True) if isinstance(model, VariationalState) else model
        cell.congruence = factor_match(point, dataset.truth.as_point())
        cell.congruence_pearson = factor_match(point, dataset.truth.as_point(), kind="pearson")
    return cell


def _map(tasks: list[dict], workers: int | None, fn=_run_cell) -> list:
    n = resolve_workers(workers)
    if n <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, tasks))


def sweep(
    datasets: list[SweepDataset],
    m_range: list[int],
    methods: list[str],
    direct_opts: DirectFitOptions | None = None,
    vb_opts: VbOptions | None = None,
    master_seed: int = 0,
    workers: int | None = None,
) -> SweepReport:
    """Все ячейки (набор × метод × M); сид общий для всех ячеек одного набора."""
    if not datasets or not m_range or not methods:
        raise InputError("сетка перебора пуста")
    methods = [m.strip().lower() for m in methods]
    for name in methods:
        parse_method(name)

    tasks = []
    for d_idx, dataset in enumerate(datasets):
        seed = derive_seed(master_seed, d_idx)
        for method in methods:
            for m in m_range:
                tasks.append({"dataset": dataset, "method": method, "M": int(m), "seed": seed,
                              "direct_opts": direct_opts, "vb_opts": vb_opts})
    logger.info("перебор: %d ячеек", len(tasks))
    return SweepReport(cells=_map(tasks, workers))


def _snr_cell(task: dict) -> list[dict]:
    observed, truth = generate(task["spec"])
    rows = []
    for method in task["methods"]:
        base = {"method": method, "snr": task["spec"].snr_db, "repeat": task["repeat"],
                "seed": task["spec"].seed, "component": "", "error": ""}
        try:
            model, _ = run_method(observed, method, task["M"], task["spec"].seed,
                                  task["direct_opts"], task["vb_opts"])
        except Parafac2Error as e:
            logger.warning("SNR %s, повтор %d, %s: %s", task["spec"].snr_db, task["repeat"], method, e)
            rows.append({**base, "metric": "noiseless_r2", "value": "", "error": f"{type(e).__name__}: {e}"})
            continue
        rows.append({**base, "metric": "noiseless_r2", "value": repr(noiseless_r2(model, truth))})
        # тепловая карта: |конгруэнтность| по модам для каждой истинной компоненты
        point = to_point(model, use_mode=True) if isinstance(model, VariationalState) else model
        for entry in component_congruence(point, truth.as_point()):
            for mode in ("A", "B", "C"):
                rows.append({**base, "metric": f"congruence_{mode}", "component": entry["component"],
                             "value": repr(entry[mode])})
    return rows


def snr_study(
    base: SynthSpec,
    snr_grid: list[float],
    repeats: int,
    methods: list[str],
    m: int,
    direct_opts: DirectFitOptions | None = None,
    vb_opts: VbOptions | None = None,
    master_seed: int = 0,
    workers: int | None = None,
) -> list[dict]:
    """
    Бесшумный R2 и конгруэнтность по модам против SNR.
    Строки (method, snr, repeat, seed, metric, component, value, error).
    """
    if repeats < 1 or not snr_grid or not methods:
        raise InputError("snr-study: нужна непустая сетка SNR, методы и repeats ≥ 1")
    methods = [x.strip().lower() for x in methods]
    for name in methods:
        parse_method(name)

    tasks = []
    for s_idx, snr in enumerate(snr_grid):
        for rep in range(repeats):
            spec = replace(base, snr_db=float(snr), seed=derive_seed(master_seed, s_idx, rep))
            tasks.append({"spec": spec, "repeat": rep, "methods": methods, "M": m,
                          "direct_opts": direct_opts, "vb_opts": vb_opts})
    logger.info("snr-study: %d уровней × %d повторов × %d методов", len(snr_grid), repeats, len(methods))
    return [row for rows in _map(tasks, workers, _snr_cell) for row in rows]

