import os
from dotenv import load_dotenv

load_dotenv()


def _int_env(name, default):
    value = os.environ.get(name)
    try:
        return max(1, int(value)) if value else default
    except ValueError:
        return default


class Config:
    # Parallelism cap for thread pools and scipy.fft workers
    THREADS = _int_env('SPECREG_THREADS', os.cpu_count() or 1)

    # Logging
    LOG_LEVEL = os.environ.get('SPECREG_LOG_LEVEL') or 'INFO'
    LOG_FORMAT = os.environ.get('SPECREG_LOG_FORMAT') or '%(asctime)s %(levelname)s %(name)s: %(message)s'

    # Registration defaults
    DEFAULT_MEASURE = (os.environ.get('SPECREG_DEFAULT_MEASURE') or 'ssd').lower()

    # Output
    OUTPUT_FORMAT = os.environ.get('SPECREG_OUTPUT_FORMAT') or 'png'
