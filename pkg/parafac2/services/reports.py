"""Fit report shared by the direct and variational solvers."""
from dataclasses import asdict, dataclass, field


@dataclass
class FitReport:
    """Итог одной подгонки: трасса целевой функции, метрики и диагностика."""

    method: str
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    r2: float = float("nan")
    ccd: float = float("nan")
    elbo: float | None = None
    effective_components: int | None = None
    restart_scores: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FitReport":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)
