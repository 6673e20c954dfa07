"""Команда generate: синтетический набор PARAFAC2 на диск."""
import argparse
import logging

from parafac2.handlers.common import UsageError, output_dir, record_run
from parafac2.services.excel_import import save_workbook
from parafac2.services.storage import save_dataset
from parafac2.services.synth import SynthSpec, generate
from parafac2.summaries import dataset_summary

logger = logging.getLogger(__name__)


def spec_from_args(args: argparse.Namespace) -> SynthSpec:
    """SynthSpec из общих флагов generate / select / snr-study."""
    widths = None
    if getattr(args, "widths", None):
        try:
            widths = tuple(int(w) for w in args.widths.split(","))
        except ValueError as e:
            raise UsageError(f"--widths: ожидались целые через запятую, получено '{args.widths}'") from e
    return SynthSpec(
        I=args.I,
        J=args.J,
        K=args.K,
        M_true=args.true_components,
        snr_db=getattr(args, "snr", 4.0),
        noise_mode=args.noise,
        offdiag=args.offdiag,
        c_range=(args.c_min, args.c_max),
        seed=args.seed,
        widths=widths,
    )


def handle_generate(args: argparse.Namespace) -> int:
    spec = spec_from_args(args)
    out = output_dir(args, "generate")
    observed, truth = generate(spec)
    save_dataset(out, observed, truth)
    if args.xlsx:
        save_workbook(args.xlsx, observed)
        print(f"📄 Книга Excel: {args.xlsx}")
    record_run(out, "generate", args)

    print(dataset_summary(observed, truth))
    print(f"✅ Набор записан в {out}")
    return 0
