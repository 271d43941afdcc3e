import os
from pathlib import Path

from platformdirs import user_data_path

APP_NAME = "stepwatch"

# Environment variables
OUTPUT_DIR_ENV_VAR = "STEPWATCH_OUT"
LOG_LEVEL_ENV_VAR = "STEPWATCH_LOG_LEVEL"

# Frame stream
FRAME_LENGTH_S = 0.2

# Tracker
SELF_TRANSITION_FLOOR = 0.0
EMISSION_SMOOTHING = 0.01
DETECTION_WINDOW_S = 5.0
DETECTION_SMOOTH_S = 1.0

# Graph building
MAX_PATHS = 10_000
MIN_EDGE_COUNT = 1
EDGE_SMOOTHING = 0.0
PROB_TOLERANCE = 1e-9

# Forecaster
N_SAMPLES = 10_000
BIN_WIDTH_S = 1.0
SAMPLE_CHUNK = 1_000
FORECAST_WORKERS = 1

# Policy (stability horizon p, tolerance e, entropy smoothing w)
STABILITY_HORIZON_S = 10.0
STABILITY_TOLERANCE_S = 30.0
ENTROPY_SMOOTH_S = 2.0
K_MINUS_S = 15.0
K_PLUS_S = 15.0
DEFAULT_THRESHOLD_NATS = 3.0
NOTIFY_F1_THRESHOLD = 0.5

# Simulator
DIRICHLET_KAPPA = 50.0
MAX_SESSION_S = 3600.0
MAX_WALK_STEPS = 10_000

# Evaluation
DEFAULT_GRID = tuple(2.0 + 0.5 * i for i in range(9))
MAX_TUNING_SESSIONS = 10
SIGNIFICANCE_ALPHA = 0.05

# Service
SERVICE_HOST = "127.0.0.1"
SERVICE_PORT = 8765
MAX_MESSAGE_BYTES = 64 * 1024

# Logging Configuration
LOG_LEVEL = os.environ.get(LOG_LEVEL_ENV_VAR, "INFO")


def get_output_dir() -> Path:
    """Resolve the default output directory from the environment or the user data dir."""
    configured = os.environ.get(OUTPUT_DIR_ENV_VAR)
    if configured:
        return Path(configured)
    return user_data_path(APP_NAME, ensure_exists=True)
