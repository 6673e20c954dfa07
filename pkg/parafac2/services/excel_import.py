"""Excel (.xlsx) import/export: one worksheet per slab, no header row."""
import logging
from pathlib import Path

import numpy as np
import openpyxl

from parafac2.services.storage import ManifestMissing, ParseError
from parafac2.services.tensor import RaggedTensor3, new_ragged

logger = logging.getLogger(__name__)


def _parse_number(value) -> float | None:
    """Число из ячейки: int/float как есть, строка с запятой вместо точки и пробелами."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError("логическое значение в ячейке")
    if isinstance(value, (int, float)):
        return float(value)
    s = str(value).replace("\xa0", "").replace(" ", "").replace(",", ".").strip()
    if not s:
        return None
    return float(s)


def _sheet_rows(ws, label: str) -> list[list[float]]:
    rows: list[list[float]] = []
    for row_idx in range(1, ws.max_row + 1):
        raw = [ws.cell(row_idx, c).value for c in range(1, ws.max_column + 1)]
        while raw and (raw[-1] is None or str(raw[-1]).strip() == ""):
            raw.pop()
        if not raw:
            continue
        try:
            values = [_parse_number(v) for v in raw]
        except ValueError as e:
            raise ParseError(label, row_idx, str(e)) from e
        if any(v is None for v in values):
            raise ParseError(label, row_idx, "пустая ячейка внутри строки")
        if rows and len(values) != len(rows[0]):
            raise ParseError(label, row_idx, f"{len(values)} значений вместо {len(rows[0])}")
        rows.append(values)
    return rows


def parse_workbook(file_path: str | Path) -> RaggedTensor3:
    """
    Читает книгу: каждый непустой лист есть срез X_k (строки I, столбцы J_k).
    Пустые хвостовые строки и столбцы игнорируются.
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise ManifestMissing(file_path)

    wb = openpyxl.load_workbook(file_path, data_only=True)
    slabs = []
    for ws in wb.worksheets:
        rows = _sheet_rows(ws, f"{file_path.name}[{ws.title}]")
        if not rows:
            logger.debug("лист %s пуст, пропускаем", ws.title)
            continue
        slabs.append(np.array(rows, dtype=np.float64))
    logger.info("книга %s: %d срезов", file_path.name, len(slabs))
    return new_ragged(slabs)


def save_workbook(file_path: str | Path, t: RaggedTensor3) -> Path:
    """Пишет тензор в книгу, лист slab_001, slab_002, …"""
    file_path = Path(file_path)
    wb = openpyxl.Workbook()
    wb.remove(wb.active)
    for k, x in enumerate(t.slabs, 1):
        ws = wb.create_sheet(f"slab_{k:03d}")
        for row in x:
            ws.append([float(v) for v in row])
    file_path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(file_path)
    return file_path
