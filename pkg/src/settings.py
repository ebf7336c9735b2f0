"""Environment-driven settings (paths and log level)."""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).parent.parent

CONFIG_DIR = Path(os.getenv("SHATTER_CONFIG_DIR", str(BASE_DIR / "config")))
RUNS_DIR = Path(os.getenv("SHATTER_RUNS_DIR", str(BASE_DIR / "runs")))
LOG_LEVEL = os.getenv("SHATTER_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
