"""Configuration for the PARAFAC2 toolkit."""
import os
from pathlib import Path

from dotenv import load_dotenv

# Загружаем .env из папки проекта (где лежит config.py)
_env_path = Path(__file__).resolve().parent / ".env"
load_dotenv(dotenv_path=_env_path)

# Пул процессов для select / snr-study. 0 или пусто: по числу ядер
_threads_env = (os.getenv("PARAFAC2_THREADS") or "").strip()
PARAFAC2_THREADS = int(_threads_env) if _threads_env.isdigit() and int(_threads_env) > 0 else (os.cpu_count() or 1)

LOG_LEVEL = (os.getenv("PARAFAC2_LOG_LEVEL") or "INFO").strip().upper()

# Прерывать рестарт VB, если ELBO упал сильнее допуска
STRICT_ELBO = os.getenv("PARAFAC2_STRICT_ELBO", "false").lower() in ("true", "1", "yes")

# Протокол экспериментов (значения по умолчанию)
MAX_ITERS = 10_000
DIRECT_REL_TOL_R2 = 1e-12
VB_REL_TOL_ELBO = 1e-9
VB_RESTARTS = 5
ARD_DELAY_ITERS = 50
RESTART_JITTER = 0.1
TAU_SHAPE_PRIOR = 1.0
TAU_SCALE_PRIOR = 1e32
VMF_INIT_CONCENTRATION = 10.0
INIT_COVARIANCE = 1e-4
ELBO_SLACK = 1e-8
DIRECT_RESTARTS = 5
# Дисперсия шума не ниже этой доли среднего квадрата данных (потолок SNR 100 дБ)
NOISE_VARIANCE_FLOOR = 1e-10

# Формат файлов на диске
FORMAT_VERSION = 1

# Output files
OUTPUT_DIR = Path(os.getenv("PARAFAC2_OUTPUT_DIR", "runs"))
OUTPUT_DIR.mkdir(parents=True, exist_ok=True)


def resolve_workers(requested: int | None = None) -> int:
    """Число воркеров: запрошенное, но не больше PARAFAC2_THREADS."""
    if requested is None or requested <= 0:
        return PARAFAC2_THREADS
    return max(1, min(requested, PARAFAC2_THREADS))
