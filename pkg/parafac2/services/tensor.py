"""Ragged three-way array: K slabs sharing the row dimension I."""
import logging
from dataclasses import dataclass

import numpy as np

from parafac2.services.errors import InputError

logger = logging.getLogger(__name__)


class EmptyInput(InputError):
    """Список срезов пуст."""


class RowMismatch(InputError):
    """Срез с номером slab (с 1) имеет другое число строк."""

    def __init__(self, slab: int, rows: int, expected: int):
        self.slab = slab
        super().__init__(f"срез {slab}: {rows} строк, ожидалось {expected}")


class NonFiniteEntry(InputError):
    """В срезе есть NaN или Inf; координаты с 1."""

    def __init__(self, slab: int, i: int, j: int):
        self.slab, self.i, self.j = slab, i, j
        super().__init__(f"срез {slab}: нечисловое значение в ячейке ({i}, {j})")


class ShapeMismatch(InputError):
    """Проекция или файл не совпадает по форме со срезом."""

    def __init__(self, slab: int | str, detail: str = ""):
        self.slab = slab
        super().__init__(f"несовпадение формы: {slab}" + (f" ({detail})" if detail else ""))


@dataclass(frozen=True, eq=False)
class RaggedTensor3:
    """Неизменяемый набор срезов X_k размера I × J_k."""

    slabs: tuple[np.ndarray, ...]

    @property
    def I(self) -> int:  # noqa: E743
        return self.slabs[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.slabs)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.slabs)

    def __len__(self) -> int:
        return self.K

    def __iter__(self):
        return iter(self.slabs)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.slabs[k]


def new_ragged(slabs) -> RaggedTensor3:
    """
    Проверяет срезы и собирает тензор.
    Каждый срез копируется в float64 (column-major) и замораживается.
    """
    slabs = list(slabs)
    if not slabs:
        raise EmptyInput("нужен хотя бы один срез")

    frozen: list[np.ndarray] = []
    rows = None
    for k, raw in enumerate(slabs, 1):
        x = np.array(raw, dtype=np.float64, order="F", copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1, order="F")
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise ShapeMismatch(k, f"ожидалась непустая матрица, получено {x.shape}")
        if rows is None:
            rows = x.shape[0]
        elif x.shape[0] != rows:
            raise RowMismatch(k, x.shape[0], rows)
        bad = np.argwhere(~np.isfinite(x))
        if bad.size:
            i, j = bad[0]
            raise NonFiniteEntry(k, int(i) + 1, int(j) + 1)
        x.setflags(write=False)
        frozen.append(x)

    return RaggedTensor3(tuple(frozen))


def frobenius_sq(t: RaggedTensor3) -> float:
    """Σ_k ‖X_k‖²_F."""
    return float(sum(np.vdot(x, x) for x in t.slabs))


def slab_norms_sq(t: RaggedTensor3) -> np.ndarray:
    """Квадраты норм Фробениуса по срезам."""
    return np.array([np.vdot(x, x) for x in t.slabs], dtype=np.float64)


def widths(t: RaggedTensor3) -> tuple[int, ...]:
    return t.widths


def project_slabs(t: RaggedTensor3, projections) -> np.ndarray:
    """Возвращает плотный массив I × M × K со срезами X_k P_k."""
    projections = list(projections)
    if len(projections) != t.K:
        raise ShapeMismatch("проекции", f"{len(projections)} матриц на {t.K} срезов")

    m = None
    for k, (x, p) in enumerate(zip(t.slabs, projections), 1):
        if p.ndim != 2 or p.shape[0] != x.shape[1]:
            raise ShapeMismatch(k, f"P имеет форму {p.shape}, у среза {x.shape[1]} столбцов")
        if m is None:
            m = p.shape[1]
        elif p.shape[1] != m:
            raise ShapeMismatch(k, f"P имеет {p.shape[1]} компонент вместо {m}")

    out = np.empty((t.I, m, t.K), dtype=np.float64)
    for k, (x, p) in enumerate(zip(t.slabs, projections)):
        out[:, :, k] = x @ p
    return out
