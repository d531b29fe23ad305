# wemp/configs/settings.py
import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def default_threads() -> int:
    """Worker count for parallel pools: WEMP_THREADS, else the CPU count."""
    value = os.getenv("WEMP_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


OUTPUT_DIR = os.getenv("WEMP_OUTPUT_DIR", "runs")
LOG_LEVEL = os.getenv("WEMP_LOG_LEVEL", "INFO").upper()
