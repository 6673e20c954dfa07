"""
On-disk formats: dataset directories (manifest.json + CSV slabs), model
files, experiment configs and run.json records.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from config import FORMAT_VERSION, OUTPUT_DIR
from parafac2.services.direct_fit import DirectFitOptions, Parafac2Point, reconstruct_slab
from parafac2.services.errors import InputError
from parafac2.services.synth import SynthSpec, SynthTruth
from parafac2.services.tensor import RaggedTensor3, ShapeMismatch, new_ragged
from parafac2.services.vb import GenerativeConfig, VariationalState, VbOptions

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RUN_FILE = "run.json"


class ManifestMissing(InputError):
    """Нет manifest.json или файла, на который он ссылается."""

    def __init__(self, file: str | Path):
        self.file = str(file)
        super().__init__(f"файл не найден: {self.file}")


class SchemaVersionUnsupported(InputError):
    """format_version не поддерживается."""


class ParseError(InputError):
    """Файл не разбирается; line с 1, 0 означает ошибку структуры."""

    def __init__(self, file: str | Path, line: int, detail: str = ""):
        self.file, self.line = str(file), line
        super().__init__(f"{self.file}:{line}: ошибка разбора" + (f" ({detail})" if detail else ""))


class VariantMismatch(InputError):
    """Файл модели другого варианта, чем запрошено."""


# --- JSON ---------------------------------------------------------------------

def _load_raw(path: Path) -> dict:
    """Читает JSON; любая ошибка даёт ParseError с номером строки."""
    if not path.exists():
        raise ManifestMissing(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from e
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(path, 0, str(e)) from e


def _save_raw(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")


def _check_version(path: Path, data: dict) -> None:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaVersionUnsupported(f"{path}: format_version={version!r}, поддерживается {FORMAT_VERSION}")


# --- CSV-матрицы --------------------------------------------------------------

def write_matrix(path: Path, m: np.ndarray) -> None:
    """Построчно, 17 значащих цифр: значения восстанавливаются бит в бит."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    with open(path, "w", encoding="utf-8", newline="") as f:
        for row in m:
            f.write(",".join("%.17g" % v for v in row))
            f.write("\n")


def read_matrix(path: Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    if not path.exists():
        raise ManifestMissing(path)
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                values = [float(cell) for cell in row]
            except ValueError as e:
                raise ParseError(path, line_no, str(e)) from e
            if rows and len(values) != len(rows[0]):
                raise ParseError(path, line_no, f"{len(values)} значений вместо {len(rows[0])}")
            rows.append(values)
    if not rows:
        raise ParseError(path, 1, "пустой файл")
    out = np.array(rows, dtype=np.float64)
    if shape is not None and out.shape != tuple(shape):
        raise ShapeMismatch(path.name, f"в файле {out.shape}, в манифесте {tuple(shape)}")
    return out


# --- Наборы данных ------------------------------------------------------------

def _slab_name(k: int) -> str:
    return f"slab_{k + 1:03d}.csv"


def save_dataset(path: str | Path, t: RaggedTensor3, truth: SynthTruth | None = None) -> Path:
    """Каталог с manifest.json и CSV-срезами (плюс истинные факторы для синтетики)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [_slab_name(k) for k in range(t.K)]
    for name, x in zip(names, t.slabs):
        write_matrix(path / name, x)

    manifest = {
        "format_version": FORMAT_VERSION,
        "I": t.I,
        "K": t.K,
        "widths": list(t.widths),
        "slabs": names,
        "provenance": None,
        "truth": None,
    }
    if truth is not None:
        p_names = [f"P_{k + 1:03d}.csv" for k in range(len(truth.P))]
        for name, matrix in (("A.csv", truth.A), ("F.csv", truth.F), ("C.csv", truth.C)):
            write_matrix(path / name, matrix)
        for name, p in zip(p_names, truth.P):
            write_matrix(path / name, p)
        manifest["provenance"] = truth.provenance
        manifest["truth"] = {
            "A": "A.csv",
            "F": "F.csv",
            "C": "C.csv",
            "P": p_names,
            "noise_variances": truth.noise_variances.tolist(),
            "noise_factors": None if truth.noise_factors is None else truth.noise_factors.tolist(),
            "snr_db": "inf" if math.isinf(truth.snr_db) else truth.snr_db,
            "noise_mode": truth.noise_mode,
        }
    _save_raw(path / MANIFEST, manifest)
    logger.info("набор сохранён: %s (%d срезов)", path, t.K)
    return path


def _load_truth(path: Path, manifest: dict, t: RaggedTensor3) -> SynthTruth:
    block = manifest["truth"]
    a = read_matrix(path / block["A"])
    f = read_matrix(path / block["F"])
    c = read_matrix(path / block["C"])
    m = a.shape[1]
    if a.shape[0] != t.I or f.shape != (m, m) or c.shape != (t.K, m):
        raise ShapeMismatch("truth", f"A {a.shape}, F {f.shape}, C {c.shape}")
    p = [read_matrix(path / name, (j, m)) for name, j in zip(block["P"], t.widths)]
    clean = new_ragged([reconstruct_slab(a, c[k], f, p[k]) for k in range(t.K)])
    snr = float(block["snr_db"])
    factors = block.get("noise_factors")
    return SynthTruth(
        A=a,
        F=f,
        C=c,
        P=p,
        clean=clean,
        noise=[x - xc for x, xc in zip(t.slabs, clean.slabs)],
        noise_variances=np.asarray(block["noise_variances"], dtype=np.float64),
        noise_factors=None if factors is None else np.asarray(factors, dtype=np.float64),
        snr_db=snr,
        noise_mode=block.get("noise_mode", "homo"),
        provenance=manifest.get("provenance") or {},
    )


def load_dataset(path: str | Path) -> tuple[RaggedTensor3, SynthTruth | None]:
    """
    Каталог с manifest.json или книга .xlsx (лист на срез).
    Истинные факторы возвращаются, если они записаны в манифест.
    """
    path = Path(path)
    if path.suffix.lower() == ".xlsx":
        from parafac2.services.excel_import import parse_workbook

        return parse_workbook(path), None

    manifest_path = path / MANIFEST
    manifest = _load_raw(manifest_path)
    _check_version(manifest_path, manifest)
    try:
        n_rows, k_slabs = int(manifest["I"]), int(manifest["K"])
        widths = [int(w) for w in manifest["widths"]]
        names = list(manifest["slabs"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(manifest_path, 0, f"поле манифеста: {e}") from e
    if len(names) != k_slabs or len(widths) != k_slabs:
        raise ShapeMismatch(MANIFEST, f"K={k_slabs}, файлов {len(names)}, ширин {len(widths)}")

    for name in names:
        if not (path / name).exists():
            raise ManifestMissing(path / name)
    t = new_ragged([read_matrix(path / name, (n_rows, j)) for name, j in zip(names, widths)])
    truth = _load_truth(path, manifest, t) if manifest.get("truth") else None
    return t, truth


# --- Модели -------------------------------------------------------------------

def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _model_to_dict(model: Parafac2Point | VariationalState) -> dict:
    if isinstance(model, Parafac2Point):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "point",
            "variant": "direct",
            "A": model.A.tolist(),
            "F": model.F.tolist(),
            "C": model.C.tolist(),
            "P": [p.tolist() for p in model.P],
            "tau": None if model.tau is None else model.tau.tolist(),
        }
    return {
        "format_version": FORMAT_VERSION,
        "kind": "variational",
        "variant": model.config.variant,
        "config": asdict(model.config),
        "vmf_method": model.vmf_method,
        "mu_A": model.mu_A.tolist(),
        "Sigma_A": model.Sigma_A.tolist(),
        "mu_C": model.mu_C.tolist(),
        "Sigma_C": model.Sigma_C.tolist(),
        "mu_F": model.mu_F.tolist(),
        "Sigma_F": model.Sigma_F.tolist(),
        "P_mean": [p.tolist() for p in model.P_mean],
        "B": None if model.B is None else [b.tolist() for b in model.B],
        "Sigma_P": None if model.Sigma_P is None else model.Sigma_P.tolist(),
        "tau_shape": model.tau_shape.tolist(),
        "tau_scale": model.tau_scale.tolist(),
        "alpha": model.alpha.tolist(),
        "trace": list(model.trace),
        "diagnostics": model.diagnostics,
    }


def _model_from_dict(data: dict) -> Parafac2Point | VariationalState:
    if data["kind"] == "point":
        return Parafac2Point(
            A=_arr(data["A"]),
            F=_arr(data["F"]),
            C=_arr(data["C"]),
            P=[_arr(p) for p in data["P"]],
            tau=None if data.get("tau") is None else _arr(data["tau"]),
        )
    if data["kind"] != "variational":
        raise KeyError(f"kind={data['kind']!r}")
    return VariationalState(
        config=GenerativeConfig(**data["config"]),
        mu_A=_arr(data["mu_A"]),
        Sigma_A=_arr(data["Sigma_A"]),
        mu_C=_arr(data["mu_C"]),
        Sigma_C=_arr(data["Sigma_C"]),
        mu_F=_arr(data["mu_F"]),
        Sigma_F=_arr(data["Sigma_F"]),
        P_mean=[_arr(p) for p in data["P_mean"]],
        B=None if data["B"] is None else [_arr(b) for b in data["B"]],
        Sigma_P=None if data["Sigma_P"] is None else _arr(data["Sigma_P"]),
        tau_shape=_arr(data["tau_shape"]),
        tau_scale=_arr(data["tau_scale"]),
        alpha=_arr(data["alpha"]),
        vmf_method=data.get("vmf_method", "saddle"),
        trace=[float(v) for v in data.get("trace", [])],
        diagnostics=data.get("diagnostics") or {},
    )


def save_model(path: str | Path, model: Parafac2Point | VariationalState) -> Path:
    path = Path(path)
    _save_raw(path, _model_to_dict(model))
    logger.info("модель сохранена: %s", path)
    return path


def load_model(path: str | Path, expect: str | None = None) -> Parafac2Point | VariationalState:
    """
    expect: 'direct', 'point', 'variational', 'vmf', 'cmn' или полный вариант
    ('vmf-hetero'); при несовпадении VariantMismatch.
    """
    path = Path(path)
    data = _load_raw(path)
    _check_version(path, data)
    variant = str(data.get("variant", ""))
    if expect is not None:
        accepted = {variant, str(data.get("kind")), variant.split("-")[0]}
        if expect.lower() not in accepted:
            raise VariantMismatch(f"{path}: в файле вариант {variant}, запрошен {expect}")
    try:
        return _model_from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, 0, f"структура модели: {e}") from e


# --- Конфигурация эксперимента и run.json -------------------------------------

@dataclass
class ExperimentConfig:
    """Набор данных (путь или SynthSpec), сетка методов × M и опции решателей."""

    methods: list[str]
    m_range: list[int]
    dataset: str | None = None
    synth: SynthSpec | None = None
    datasets: int = 1
    vb: VbOptions = field(default_factory=VbOptions)
    direct: DirectFitOptions = field(default_factory=DirectFitOptions)
    out_dir: str = str(OUTPUT_DIR / "select")
    master_seed: int = 0
    workers: int = 0

    def __post_init__(self):
        if not self.methods or not self.m_range:
            raise InputError("в конфигурации эксперимента пустые methods или m_range")
        if (self.dataset is None) == (self.synth is None):
            raise InputError("нужен ровно один источник данных: dataset или synth")
        if self.datasets < 1:
            raise InputError("datasets должен быть ≥ 1")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "methods": list(self.methods),
            "m_range": [int(m) for m in self.m_range],
            "dataset": self.dataset,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "datasets": self.datasets,
            "vb": asdict(self.vb),
            "direct": asdict(self.direct),
            "out_dir": self.out_dir,
            "master_seed": self.master_seed,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(
            methods=list(data["methods"]),
            m_range=[int(m) for m in data["m_range"]],
            dataset=data.get("dataset"),
            synth=None if data.get("synth") is None else SynthSpec.from_dict(data["synth"]),
            datasets=int(data.get("datasets", 1)),
            vb=VbOptions(**(data.get("vb") or {})),
            direct=DirectFitOptions(**(data.get("direct") or {})),
            out_dir=data.get("out_dir", str(OUTPUT_DIR / "select")),
            master_seed=int(data.get("master_seed", 0)),
            workers=int(data.get("workers", 0)),
        )


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    data = _load_raw(path)
    _check_version(path, data)
    try:
        return ExperimentConfig.from_dict(data)
    except (KeyError, TypeError) as e:
        raise ParseError(path, 0, f"конфигурация эксперимента: {e}") from e


def save_experiment(path: str | Path, cfg: ExperimentConfig) -> Path:
    path = Path(path)
    _save_raw(path, cfg.to_dict())
    return path


def write_run_record(out_dir: str | Path, command: str, args: dict) -> Path:
    """run.json: команда и все разрешённые аргументы (включая сиды)."""
    path = Path(out_dir) / RUN_FILE
    _save_raw(path, {"format_version": FORMAT_VERSION, "command": command, "args": args})
    return path


def read_run_record(path: str | Path) -> tuple[str, dict]:
    path = Path(path)
    data = _load_raw(path)
    _check_version(path, data)
    try:
        return str(data["command"]), dict(data["args"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, 0, f"run.json: {e}") from e


def write_rows(path: str | Path, rows: list[dict], columns: list[str] | tuple[str, ...]) -> Path:
    """CSV с фиксированным порядком колонок."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def save_json(path: str | Path, data: dict) -> Path:
    path = Path(path)
    _save_raw(path, data)
    return path
