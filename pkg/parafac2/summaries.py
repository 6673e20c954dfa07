"""Console summaries printed by the command handlers."""
import math
from collections import defaultdict

from parafac2.services.model_select import SweepReport
from parafac2.services.reports import FitReport
from parafac2.services.synth import SynthTruth
from parafac2.services.tensor import RaggedTensor3


def _num(value, fmt: str = ".4f") -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "—"
    return format(value, fmt)


def dataset_summary(t: RaggedTensor3, truth: SynthTruth | None = None) -> str:
    """Размеры набора и, для синтетики, параметры шума."""
    widths = sorted(set(t.widths))
    width_text = str(widths[0]) if len(widths) == 1 else f"{widths[0]}…{widths[-1]}"
    lines = [f"📦 Набор: I={t.I}, K={t.K}, J_k={width_text}"]
    if truth is not None:
        lines.append(f"   Истинных компонент: {truth.A.shape[1]}, SNR {truth.snr_db} дБ, шум {truth.noise_mode}")
    return "\n".join(lines)


def fit_summary(report: FitReport, noiseless: float | None = None) -> str:
    status = "✅ сошлось" if report.converged else "⚠️ лимит итераций"
    lines = [
        f"Метод: {report.method}: {status} за {report.iterations} итераций",
        f"R2: {_num(report.r2, '.6f')}",
        f"CCD: {_num(report.ccd, '.2f')}",
    ]
    if report.elbo is not None:
        lines.append(f"ELBO: {_num(report.elbo, '.6f')}")
    if report.effective_components is not None:
        lines.append(f"Эффективных компонент: {report.effective_components}")
    if noiseless is not None:
        lines.append(f"R2 без шума: {_num(noiseless, '.6f')}")
    if report.restart_scores and len(report.restart_scores) > 1:
        scores = ", ".join(_num(s, ".4g") for s in report.restart_scores)
        lines.append(f"Рестарты: {scores}")
    violations = report.diagnostics.get("monotonicity_violations")
    if violations:
        lines.append(f"⚠️ Нарушений монотонности ELBO: {violations}")
    return "\n".join(lines)


def sweep_summary(report: SweepReport) -> str:
    """Таблица по ячейкам и выбор M по трём критериям."""
    lines = [f"{'набор':<10} {'метод':<14} {'M':>3} {'R2':>9} {'CCD':>8} {'ELBO':>14} {'эфф':>4}"]
    for c in report.cells:
        if c.error:
            lines.append(f"{c.dataset:<10} {c.method:<14} {c.M:>3} ❌ {c.error}")
            continue
        lines.append(
            f"{c.dataset:<10} {c.method:<14} {c.M:>3} {_num(c.r2):>9} {_num(c.ccd, '.1f'):>8} "
            f"{_num(c.elbo, '.2f'):>14} {_num(c.effective_components, 'd'):>4}"
        )
    lines.append("")
    lines.append("Выбор M (локоть ELBO / локоть R2 / CCD ≥ 80):")
    for s in report.selections():
        lines.append(
            f"  {s['dataset']} {s['method']}: {s['elbo_elbow'] or '—'} / {s['r2_elbow'] or '—'} / {s['ccd_choice'] or '—'}"
        )
    return "\n".join(lines)


def snr_summary(rows: list[dict]) -> str:
    """Средний R2 без шума по (метод, SNR)."""
    acc: dict[tuple[str, float], list[float]] = defaultdict(list)
    failed = 0
    for row in rows:
        if row.get("error"):
            failed += 1
            continue
        if row["metric"] != "noiseless_r2":
            continue
        acc[(row["method"], row["snr"])].append(float(row["value"]))
    lines = [f"{'метод':<14} {'SNR':>6} {'R2 без шума':>12} {'n':>3}"]
    for (method, snr), values in sorted(acc.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        lines.append(f"{method:<14} {snr:>6g} {sum(values) / len(values):>12.4f} {len(values):>3}")
    if failed:
        lines.append(f"⚠️ Не посчитано ячеек: {failed}")
    return "\n".join(lines)
