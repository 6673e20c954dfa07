"""Команда select: перебор числа компонент по сетке методов."""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from parafac2.handlers.common import parse_int_range, parse_list, record_run
from parafac2.handlers.fit import solver_options
from parafac2.handlers.generate import spec_from_args
from parafac2.services.model_select import CSV_COLUMNS, SweepDataset, derive_seed, sweep
from parafac2.services.storage import (
    ExperimentConfig,
    load_dataset,
    load_experiment,
    save_experiment,
    save_json,
    write_rows,
)
from parafac2.services.synth import generate
from parafac2.summaries import sweep_summary

logger = logging.getLogger(__name__)

LONG_COLUMNS = ("dataset", "method", "M", "seed", "metric", "value")
SELECTION_COLUMNS = ("dataset", "method", "elbo_elbow", "r2_elbow", "ccd_choice")


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        return load_experiment(args.config)
    direct, vb = solver_options(args)
    if args.data:
        source = {"dataset": str(args.data)}
    else:
        source = {"synth": spec_from_args(args)}
    return ExperimentConfig(
        methods=parse_list(args.methods),
        m_range=parse_int_range(args.components),
        datasets=args.datasets,
        vb=vb,
        direct=direct,
        out_dir=str(args.out) if args.out else ExperimentConfig.__dataclass_fields__["out_dir"].default,
        master_seed=args.seed,
        workers=args.workers,
        **source,
    )


def build_datasets(cfg: ExperimentConfig) -> list[SweepDataset]:
    if cfg.dataset is not None:
        t, truth = load_dataset(cfg.dataset)
        return [SweepDataset(name=Path(cfg.dataset).name or "dataset", tensor=t, truth=truth)]
    out = []
    for n in range(cfg.datasets):
        spec = replace(cfg.synth, seed=derive_seed(cfg.master_seed, 0, n))
        observed, truth = generate(spec)
        out.append(SweepDataset(name=f"synth_{n + 1:02d}", tensor=observed, truth=truth))
    return out


def handle_select(args: argparse.Namespace) -> int:
    cfg = experiment_from_args(args)
    if args.out:
        cfg.out_dir = str(args.out)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(cfg)
    report = sweep(datasets, cfg.m_range, cfg.methods, cfg.direct, cfg.vb, cfg.master_seed, cfg.workers)

    save_experiment(out / "experiment.json", cfg)
    write_rows(out / "sweep.csv", report.rows(), CSV_COLUMNS)
    write_rows(out / "metrics_long.csv", report.long_rows(), LONG_COLUMNS)
    write_rows(out / "selections.csv", report.selections(), SELECTION_COLUMNS)
    save_json(out / "sweep.json", report.to_dict())

    # replay читает конфигурацию из каталога результатов
    args.config = str((out / "experiment.json").resolve())
    record_run(out, "select", args)

    print(sweep_summary(report))
    print(f"✅ Результаты перебора в {out}")
    return 0
