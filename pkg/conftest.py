"""Общие фикстуры тестов: маленькие воспроизводимые наборы."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Добавляем корень проекта в путь
sys.path.insert(0, str(Path(__file__).resolve().parent))

from parafac2.services.synth import SynthSpec, generate  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def noiseless_small():
    """Точная PARAFAC2-структура: I=12, J=10, K=5, две компоненты."""
    return generate(SynthSpec(I=12, J=10, K=5, M_true=2, snr_db=math.inf, seed=3))


@pytest.fixture
def noisy_small():
    """Гетероскедастичный шум, SNR 10 дБ, неравные ширины срезов."""
    return generate(
        SynthSpec(I=10, J=8, K=4, M_true=2, snr_db=10.0, noise_mode="hetero", seed=5, widths=(8, 7, 9, 8))
    )
