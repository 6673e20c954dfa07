"""Command-line entry point for the probabilistic PARAFAC2 toolkit."""
import argparse
import logging
import re
import sys

from config import ARD_DELAY_ITERS, LOG_LEVEL, MAX_ITERS, VB_REL_TOL_ELBO, VB_RESTARTS
from parafac2.handlers.common import UsageError, parse_snr
from parafac2.handlers.fit import handle_fit
from parafac2.handlers.generate import handle_generate
from parafac2.handlers.replay import handle_replay
from parafac2.handlers.select import handle_select
from parafac2.handlers.snr_study import handle_snr_study
from parafac2.services.errors import Parafac2Error
from parafac2.services.model_select import METHODS
from parafac2.services.vmf import METHODS as VMF_METHODS

logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=getattr(logging, LOG_LEVEL, logging.INFO),
)
logger = logging.getLogger(__name__)

# Флаги, значение которых может начинаться с минуса (-20:2:10)
_SIGNED_VALUE_FLAGS = ("--snr", "--components")
_SIGNED_VALUE = re.compile(r"^-(\d|\.\d|inf)")


class CliParser(argparse.ArgumentParser):
    """argparse с кодом 1 на ошибку использования вместо 2."""

    def error(self, message):
        raise UsageError(message)


def _normalize_argv(argv: list[str]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _SIGNED_VALUE_FLAGS and i + 1 < len(argv) and _SIGNED_VALUE.match(argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def _add_synth_flags(p: argparse.ArgumentParser, snr_as_range: bool = False) -> None:
    p.add_argument("--I", type=int, default=50, help="число строк (общая мода)")
    p.add_argument("--J", type=int, default=50, help="ширина среза")
    p.add_argument("--K", type=int, default=10, help="число срезов")
    p.add_argument("--widths", default=None, help="ширины срезов через запятую (неравные J_k)")
    p.add_argument("--true-components", dest="true_components", type=int, default=4)
    p.add_argument("--noise", choices=("homo", "hetero"), default="homo")
    p.add_argument("--offdiag", type=float, default=0.4)
    p.add_argument("--c-min", dest="c_min", type=float, default=0.0)
    p.add_argument("--c-max", dest="c_max", type=float, default=30.0)
    if snr_as_range:
        p.add_argument("--snr", default="-20:2:10", help="сетка SNR, дБ: start:step:stop")
    else:
        p.add_argument("--snr", type=parse_snr, default=4.0, help="SNR, дБ (inf: без шума)")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--restarts", type=int, default=VB_RESTARTS)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=MAX_ITERS)
    p.add_argument("--tol", type=float, default=VB_REL_TOL_ELBO, help="относительный порог ELBO")
    p.add_argument("--ard-delay", dest="ard_delay", type=int, default=ARD_DELAY_ITERS)
    p.add_argument("--delay-freezes", dest="delay_freezes", choices=("tau", "alpha"), default="tau")
    p.add_argument("--vmf-method", dest="vmf_method", choices=VMF_METHODS, default="saddle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="каталог результатов")


def build_parser() -> CliParser:
    parser = CliParser(prog="main.py", description="Вероятностный PARAFAC2: генерация, подгонка, выбор модели.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="синтетический набор")
    _add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--xlsx", default=None, help="дополнительно записать книгу Excel")
    p.set_defaults(handler=handle_generate)

    p = sub.add_parser("fit", help="одна подгонка")
    p.add_argument("--data", required=True, help="каталог набора или .xlsx")
    p.add_argument("--method", choices=("direct", "vb"), default="vb")
    p.add_argument("--orth", choices=("vmf", "cmn"), type=str.lower, default="vmf")
    p.add_argument("--noise", choices=("homo", "hetero"), default="hetero")
    p.add_argument("--components", type=int, required=True)
    _add_solver_flags(p)
    p.set_defaults(handler=handle_fit)

    p = sub.add_parser("select", help="перебор числа компонент")
    p.add_argument("--config", default=None, help="ExperimentConfig JSON")
    p.add_argument("--data", default=None, help="каталог набора; без него синтетика")
    p.add_argument("--datasets", type=int, default=1, help="число синтетических наборов")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--components", default="2:8", help="сетка M: start:stop или start:step:stop")
    p.add_argument("--workers", type=int, default=0)
    _add_synth_flags(p)
    _add_solver_flags(p)
    p.set_defaults(handler=handle_select)

    p = sub.add_parser("snr-study", help="R2 без шума и конгруэнтность против SNR")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--methods", default="direct,vb-vmf-hetero")
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--workers", type=int, default=0)
    _add_synth_flags(p, snr_as_range=True)
    _add_solver_flags(p)
    p.set_defaults(handler=handle_snr_study, noise="hetero")

    p = sub.add_parser("replay", help="повторить запуск по run.json")
    p.add_argument("run_json")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=handle_replay)

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    """Код возврата: 0 успех, 1 ошибка использования, 2 ошибка решателя или данных."""
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_normalize_argv(argv))
        return args.handler(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except Parafac2Error as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
