"""Команда fit: одна подгонка прямым методом или VB."""
import argparse
import logging

from parafac2.handlers.common import output_dir, record_run
from parafac2.services.direct_fit import DirectFitOptions
from parafac2.services.model_select import factor_match, noiseless_r2, run_method
from parafac2.services.storage import load_dataset, save_json, save_model
from parafac2.services.vb import VariationalState, VbOptions, to_point
from parafac2.summaries import dataset_summary, fit_summary

logger = logging.getLogger(__name__)


def solver_options(args: argparse.Namespace) -> tuple[DirectFitOptions, VbOptions]:
    """Опции решателей из флагов (общие для fit / select / snr-study)."""
    direct = DirectFitOptions(
        max_iters=args.max_iters,
        restarts=args.restarts,
        seed=args.seed,
    )
    vb = VbOptions(
        max_iters=args.max_iters,
        rel_tol_elbo=args.tol,
        restarts=args.restarts,
        ard_delay_iters=args.ard_delay,
        seed=args.seed,
        delay_freezes=args.delay_freezes,
        vmf_method=args.vmf_method,
        direct_max_iters=args.max_iters,
    )
    return direct, vb


def method_name(args: argparse.Namespace) -> str:
    if args.method == "direct":
        return "direct"
    return f"vb-{args.orth}-{args.noise}"


def handle_fit(args: argparse.Namespace) -> int:
    t, truth = load_dataset(args.data)
    print(dataset_summary(t, truth))
    out = output_dir(args, "fit")
    direct_opts, vb_opts = solver_options(args)
    method = method_name(args)

    logger.info("подгонка %s, M=%d", method, args.components)
    model, report = run_method(t, method, args.components, args.seed, direct_opts, vb_opts)

    noiseless = None
    if truth is not None:
        noiseless = noiseless_r2(model, truth)
        point = to_point(model, use_mode=True) if isinstance(model, VariationalState) else model
        report.diagnostics["noiseless_r2"] = noiseless
        report.diagnostics["congruence"] = factor_match(point, truth.as_point())

    save_model(out / "model.json", model)
    save_json(out / "fit_report.json", report.to_dict())
    record_run(out, "fit", args)

    print(fit_summary(report, noiseless))
    print(f"✅ Модель и отчёт записаны в {out}")
    return 0
