"""Argument parsing helpers shared by the command handlers."""
import argparse
import logging
import math
from pathlib import Path

from config import OUTPUT_DIR
from parafac2.services.storage import write_run_record

logger = logging.getLogger(__name__)

# Аргументы, не попадающие в run.json
_NOT_RECORDED = {"handler"}


class UsageError(Exception):
    """Неверные аргументы командной строки (код возврата 1)."""


def parse_float_range(text: str) -> list[float]:
    """
    'start:step:stop' (stop включительно), 'start:stop' (шаг 1),
    список через запятую или одно число.
    """
    text = text.strip()
    try:
        if ":" not in text:
            return [float(v) for v in text.split(",") if v.strip()]
        parts = [float(v) for v in text.split(":")]
    except ValueError as e:
        raise UsageError(f"не разобрать диапазон '{text}'") from e
    if len(parts) == 2:
        start, step, stop = parts[0], 1.0, parts[1]
    elif len(parts) == 3:
        start, step, stop = parts
    else:
        raise UsageError(f"диапазон '{text}': ожидается start:step:stop")
    if step == 0 or not all(math.isfinite(v) for v in (start, step, stop)) or (stop - start) * step < 0:
        raise UsageError(f"диапазон '{text}' пуст или бесконечен")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


def parse_int_range(text: str) -> list[int]:
    values = parse_float_range(text)
    if not values or any(v != int(v) for v in values):
        raise UsageError(f"ожидались целые числа: '{text}'")
    return [int(v) for v in values]


def parse_list(text: str) -> list[str]:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise UsageError("пустой список")
    return items


def parse_snr(text: str) -> float:
    try:
        value = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"SNR должен быть числом или inf: {text}") from e
    if math.isnan(value) or value == -math.inf:
        raise argparse.ArgumentTypeError("SNR должен быть конечным или inf")
    return value


def output_dir(args: argparse.Namespace, command: str) -> Path:
    """Каталог результатов: --out или PARAFAC2_OUTPUT_DIR/<команда>-seed<S>."""
    out = Path(args.out) if getattr(args, "out", None) else OUTPUT_DIR / f"{command}-seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def record_run(out: Path, command: str, args: argparse.Namespace) -> Path:
    """run.json со всеми разрешёнными аргументами (по нему работает replay)."""
    resolved = {k: v for k, v in vars(args).items() if k not in _NOT_RECORDED}
    resolved["out"] = str(out)
    path = write_run_record(out, command, resolved)
    logger.info("записан %s", path)
    return path
