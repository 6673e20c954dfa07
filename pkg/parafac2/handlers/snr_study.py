"""Команда snr-study: R2 без шума и конгруэнтность по модам в зависимости от SNR."""
import argparse
import logging

from parafac2.handlers.common import output_dir, parse_float_range, parse_list, record_run
from parafac2.handlers.fit import solver_options
from parafac2.handlers.generate import spec_from_args
from parafac2.services.model_select import snr_study
from parafac2.services.storage import write_rows
from parafac2.summaries import snr_summary

logger = logging.getLogger(__name__)

COLUMNS = ("method", "snr", "repeat", "seed", "metric", "component", "value", "error")


def handle_snr_study(args: argparse.Namespace) -> int:
    grid = parse_float_range(args.snr)
    methods = parse_list(args.methods)
    spec = spec_from_args(argparse.Namespace(**{**vars(args), "snr": grid[0]}))
    direct_opts, vb_opts = solver_options(args)
    out = output_dir(args, "snr-study")

    rows = snr_study(spec, grid, args.repeats, methods, args.components,
                     direct_opts, vb_opts, master_seed=args.seed, workers=args.workers)
    write_rows(out / "snr_study.csv", rows, COLUMNS)
    record_run(out, "snr-study", args)

    print(snr_summary(rows))
    print(f"✅ {len(rows)} строк записано в {out / 'snr_study.csv'}")
    return 0
