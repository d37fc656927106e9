# roi_cae/const.py
"""Constants for the ROI-aware autoencoder package."""

import json
import logging
from pathlib import Path

_LOGGER = logging.getLogger(__name__)

# --- Package Domain ---
DOMAIN = "roi_cae"

# --- Phases ---
PHASE_1 = "P1"
PHASE_2 = "P2"
PHASES = (PHASE_1, PHASE_2)

# --- Phase-2 Loss Terms ---
TERM_GLOBAL = "glob"
TERM_L1 = "l1"
TERM_EDGE = "edge"
LOSS_TERMS = (TERM_GLOBAL, TERM_L1, TERM_EDGE)

# --- Configuration Keys (experiment config JSON, see config.py) ---
CONF_TRAIN = "train"
CONF_MODEL = "model"
CONF_SITES = "sites"
CONF_MAX_CONCURRENT_RUNS = "max_concurrent_runs"
CONF_RUN_TIMEOUT = "run_timeout"

CONF_LR_P1 = "lr_p1"
CONF_LR_P2 = "lr_p2"
CONF_BATCH_SIZE = "batch_size"
CONF_MAX_EPOCHS_P1 = "max_epochs_p1"
CONF_MAX_EPOCHS_P2 = "max_epochs_p2"
CONF_PATIENCE_P1 = "patience_p1"
CONF_PATIENCE_P2 = "patience_p2"
CONF_MIN_DELTA_P1 = "min_delta_p1"
CONF_MIN_DELTA_P2 = "min_delta_p2"
CONF_SEEDS = "seeds"
CONF_ENABLED_TERMS = "enabled_terms"
CONF_ABLATION_HORIZON = "ablation_horizon"
CONF_PIN_GLOBAL_WEIGHT = "pin_global_weight"

CONF_INPUT_HEIGHT = "input_height"
CONF_INPUT_WIDTH = "input_width"
CONF_CHANNELS = "channels"
CONF_BOTTLENECK_CHANNELS = "bottleneck_channels"
CONF_LATENT_DIM = "latent_dim"
CONF_LEAKY_SLOPE = "leaky_slope"

# --- Default Values ---
DEFAULT_CANVAS = (160, 112)  # (W_t, H_t), both divisible by 16
FULL_CANVAS = (1280, 880)  # 872 rows rounded up to the next multiple of 16
CANVAS_DIVISOR = 16
DEFAULT_CHANNELS = (8, 16, 32, 64)
DEFAULT_BOTTLENECK_CHANNELS = 64
FULL_CHANNELS = (32, 64, 128, 256)
FULL_BOTTLENECK_CHANNELS = 256
DEFAULT_LATENT_DIM = 128
DEFAULT_LEAKY_SLOPE = 0.1

DEFAULT_LR_P1 = 1e-4
DEFAULT_LR_P2 = 1e-5
DEFAULT_BATCH_SIZE = 8
DEFAULT_MAX_EPOCHS = 250
SHORT_SCHEDULE_EPOCHS_P1 = 150
SHORT_SCHEDULE_EPOCHS_P2 = 100
DEFAULT_PATIENCE_P1 = 5
DEFAULT_PATIENCE_P2 = 7
DEFAULT_MIN_DELTA_P1 = 2e-5
DEFAULT_MIN_DELTA_P2 = 5e-5
DEFAULT_SEEDS = (1000, 1001, 1002, 1003, 1004)
SMOKE_SEEDS = (1000, 1001)
DEFAULT_ABLATION_HORIZON = 15
DEFAULT_MAX_CONCURRENT_RUNS = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

DEFAULT_SITES_COUNT = 3
DEFAULT_PER_SITE = 120
MIN_PER_SITE = 20
VALIDATION_FRACTION = 0.15
ROI_MARGIN_PX = 4.0
MIN_ROI_SIDE_PX = 2.0
MIN_MASK_PIXELS = 4
MIN_CALIBRATION_BATCH = 4

# --- Loss / Metric Constants ---
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SOBEL_EPSILON = 1e-8
PSNR_CAP_DB = 100.0
ROI_SSIM_MIN_CROP = 16

# --- Probe Defaults ---
KNN_K = 10
RIDGE_ALPHA = 1.0
PROBE_EPOCHS = 100
PROBE_LR = 1e-2
PROBE_WEIGHT_DECAY = 1e-4
PCA_DIMS = 2
COVARIANCE_TAU_SCALE = 1e-6
QC_SUITABILITY_THRESHOLD = 0.5

# --- Metric Keys (columns of MetricRecord CSVs, in fixed order) ---
KEY_ID = "id"
KEY_SITE = "site"
KEY_SPLIT = "split"
KEY_PSNR = "psnr"
KEY_MS_SSIM = "ms_ssim"
KEY_ROI_MAE = "roi_mae"
KEY_ROI_MS_SSIM = "roi_ms_ssim"
KEY_ROI_EDGE_MAE = "roi_edge_mae"
METRIC_KEYS = (KEY_PSNR, KEY_MS_SSIM, KEY_ROI_MAE, KEY_ROI_MS_SSIM, KEY_ROI_EDGE_MAE)
METRIC_COLUMNS = (KEY_ID, KEY_SITE, KEY_SPLIT, *METRIC_KEYS)

# --- Split Tags ---
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"

# --- Run Directory Artifacts ---
FILE_CONFIG_SNAPSHOT = "config.json"
FILE_CHECKPOINT = "checkpoint_{phase}.json"
FILE_TRACE = "trace_{phase}.csv"
FILE_CALIBRATION = "calibration.json"
FILE_METRICS = "metrics_{phase}.csv"
FILE_LATENTS = "latents_{phase}.csv"
FILE_PROBES = "probes.json"
FILE_INTERPOLATION = "interpolation.npy"
FILE_FRAGMENT = "fragment.json"
FILE_MANIFEST = "manifest.jsonl"
FILE_ABLATION_FRAGMENT = "ablation_fragment.json"
FILE_SHARED_P1 = "shared_checkpoint_P1.json"

# --- Report Outputs ---
REPORT_PROTOCOLS = "table_protocols.csv"
REPORT_PER_SEED = "per_seed.csv"
REPORT_DELTAS = "deltas.csv"
REPORT_ABLATION = "table_ablation.csv"
REPORT_ABLATION_ECHO = "table_ablation_test_echo.csv"
REPORT_PROVENANCE = "probes_provenance.csv"
REPORT_OOD = "probes_ood.csv"
REPORT_QC = "probes_qc.csv"
REPORT_PROBES_JSON = "probes.json"
REPORT_JSON = "report.json"
PLOTS_DIR = "plots"
NOT_AVAILABLE = "n/a"

# --- Protocol Presets ---
PRESET_STANDARD_DEV = "standard-dev"
PRESET_HOLD_OUT_PREFIX = "hold-out-"
ABLATION_VARIANTS = (
    ("none", (TERM_GLOBAL,)),
    ("+l1", (TERM_GLOBAL, TERM_L1)),
    ("+edge", (TERM_GLOBAL, TERM_EDGE)),
    ("+l1+edge", LOSS_TERMS),
)
INTERPOLATION_STEPS = 8

TRACE_COLUMNS = ("epoch", "train_loss", "val_loss", "stopped_flag")

CHECKPOINT_FORMAT = "roi-cae-checkpoint"
CHECKPOINT_VERSION = 1


# --- Package Version Helper ---
def get_package_version(package_domain: str = DOMAIN) -> str:
    """
    Get the version of the package from its manifest.json.
    """
    try:
        manifest_path = Path(__file__).parent / "manifest.json"
        with open(manifest_path, encoding="utf-8") as manifest_file:
            manifest_content = json.load(manifest_file)
        return str(manifest_content.get("version", "0.0.0-unknown"))
    except FileNotFoundError:
        _LOGGER.error("Manifest.json not found for %s package.", package_domain)
        return "0.0.0-manifest_missing"
    except (json.JSONDecodeError, TypeError) as err:
        _LOGGER.error("Error parsing manifest.json for %s: %s", package_domain, err)
        return "0.0.0-manifest_error"


PACKAGE_VERSION = get_package_version()
