"""Команда replay: повтор записанного запуска по его run.json."""
import argparse
import logging

from parafac2.handlers.common import UsageError
from parafac2.handlers.fit import handle_fit
from parafac2.handlers.generate import handle_generate
from parafac2.handlers.select import handle_select
from parafac2.handlers.snr_study import handle_snr_study
from parafac2.services.storage import read_run_record

logger = logging.getLogger(__name__)

HANDLERS = {
    "generate": handle_generate,
    "fit": handle_fit,
    "select": handle_select,
    "snr-study": handle_snr_study,
}


def handle_replay(args: argparse.Namespace) -> int:
    command, recorded = read_run_record(args.run_json)
    handler = HANDLERS.get(command)
    if handler is None:
        raise UsageError(f"в {args.run_json} неизвестная команда '{command}'")
    if args.out:
        recorded["out"] = args.out
    print(f"🔁 Повтор: {command} → {recorded['out']}")
    logger.info("replay %s из %s", command, args.run_json)
    return handler(argparse.Namespace(**recorded))
