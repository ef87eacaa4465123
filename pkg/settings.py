import logging.config
from pathlib import Path

from decouple import AutoConfig, Config, Csv, RepositoryEnv

DOTENV_FILE = Path(__file__).parent / ".env"
dotenv_path = DOTENV_FILE.resolve()

# Read environment variables from .env file if it exists
if Path(dotenv_path).is_file():
    config = Config(RepositoryEnv(dotenv_path))
else:
    config = AutoConfig()


# ---------------- Intersection Geolocation ----------------
DBSCAN_EPS = config("DBSCAN_EPS", default=50.0, cast=float)
DBSCAN_MIN_PTS = config("DBSCAN_MIN_PTS", default=5, cast=int)
MERGE_RADIUS = config("MERGE_RADIUS", default=25.0, cast=float)
GEOMEDIAN_TOL = config("GEOMEDIAN_TOL", default=1e-6, cast=float)
GEOMEDIAN_MAX_ITER = config("GEOMEDIAN_MAX_ITER", default=1000, cast=int)
STOP_SIGN_LABEL = config("STOP_SIGN_LABEL", default="stop_sign")
DETECTION_CLASSES = config(
    "DETECTION_CLASSES",
    default=(
        "stop_sign,traffic_light,traffic_sign,yield_sign,pedestrian,"
        "vehicle,bus,bicycle"
    ),
    cast=Csv(),
)


# ---------------- CGM / Fusion ----------------
CGM_CADENCE_S = config("CGM_CADENCE_S", default=300, cast=int)
CGM_RATE_WINDOW_S = config("CGM_RATE_WINDOW_S", default=900, cast=int)
CGM_MAX_RATE = config("CGM_MAX_RATE", default=0.25, cast=float)
FDA_MAX_MISSING = config("FDA_MAX_MISSING", default=0.25, cast=float)
GLUCOSE_STALENESS = config("GLUCOSE_STALENESS", default=360, cast=int)
DISCARD_THRESHOLD = config("DISCARD_THRESHOLD", default=0.05, cast=float)


# ---------------- Encounters ----------------
CAPTURE_RADIUS = config("CAPTURE_RADIUS", default=25.0, cast=float)
REFRACTORY_S = config("REFRACTORY_S", default=60, cast=int)
UPSTREAM_M = config("UPSTREAM_M", default=91.44, cast=float)
DOWNSTREAM_M = config("DOWNSTREAM_M", default=60.96, cast=float)
V_STOP_EPS = config("V_STOP_EPS", default=0.5, cast=float)
MIN_STOP_S = config("MIN_STOP_S", default=2.0, cast=float)
NO_STOP_RATIO = config("NO_STOP_RATIO", default=0.9, cast=float)
V_ENTRY_FLOOR = config("V_ENTRY_FLOOR", default=1.0, cast=float)


# ---------------- Models ----------------
GLMM_TOL = config("GLMM_TOL", default=1e-3, cast=float)
GLMM_MAX_ITER = config("GLMM_MAX_ITER", default=2000, cast=int)
LRT_ALPHA = config("LRT_ALPHA", default=0.05, cast=float)
COOKS_THRESHOLD = config("COOKS_THRESHOLD", default=0.5, cast=float)
MAX_WORKERS = config("MAX_WORKERS", default=4, cast=int)


# ---------------- Output Configuration ----------------
DEFAULT_OUTPUT_PATH = Path(__file__).parent / Path(
    config("DEFAULT_OUTPUT_PATH", default="output")
)
DEFAULT_OUTPUT_FORMAT = config("DEFAULT_OUTPUT_FORMAT", default="csv")
REPORT_SCHEMA_VERSION = "1.0"
REPORT_TIMINGS = config("REPORT_TIMINGS", default=False, cast=bool)


# ---------------- Logging Configuration ----------------
LOG_LEVEL = config("LOG_LEVEL", default="INFO")

LOGGING_CONFIG = {
    "version": 1,
    "disable_existing_loggers": False,
    "handlers": {
        "default": {
            "class": "logging.StreamHandler",
            "formatter": "default",
        }
    },
    "formatters": {
        "default": {
            "format": "[%(asctime)s] [%(levelname)s] [%(name)s] - %(message)s",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        }
    },
    "loggers": {
        # Silence asyncio debug chatter from to_thread scheduling
        "asyncio": {
            "handlers": ["default"],
            "level": "WARNING",
            "propagate": False,
        },
    },
    "root": {
        "level": LOG_LEVEL,
        "handlers": ["default"],
    },
}

logging.config.dictConfig(LOGGING_CONFIG)
