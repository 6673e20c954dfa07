"""Base exception classes shared by the numerical services."""


class Parafac2Error(Exception):
    """Базовая ошибка пакета: CLI превращает её в код возврата 2."""


class InputError(Parafac2Error, ValueError):
    """Нарушен контракт входных данных (формы, пустые срезы, NaN)."""


class NumericalFailure(Parafac2Error, ArithmeticError):
    """Численный сбой: разложение не сошлось, матрица не положительно определена."""


class BudgetExceeded(Parafac2Error, RuntimeError):
    """Исчерпан бюджет итераций или предложений сэмплера."""
