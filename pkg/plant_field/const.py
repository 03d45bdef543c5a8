"""Constants for plant_field."""

from logging import Logger, getLogger

_LOGGER: Logger = getLogger(__package__)

DOMAIN = "plant_field"

# Semantic classes; 0 is reserved for background.
CLASS_BACKGROUND = 0
CLASS_STEM = 1
CLASS_LEAF = 2
CLASS_FRUIT = 3
CLASS_FLOWER = 4
SEMANTIC_CLASSES: dict[int, str] = {
    CLASS_STEM: "stem",
    CLASS_LEAF: "leaf",
    CLASS_FRUIT: "fruit",
    CLASS_FLOWER: "flower",
}
CLASS_BY_NAME: dict[str, int] = {name: cls for cls, name in SEMANTIC_CLASSES.items()}
NUM_CLASSES = len(SEMANTIC_CLASSES)

# Ray bounds.
T_NEAR = 0.05
T_FAR = 1000.0

# Instance matching.
MAX_IM_ITERATIONS = 12
UNASSIGNED_THRESHOLD = 10
SAMPLE_TARGET = 256
SAMPLE_STEP_CAP = 16
SAMPLE_MIN = 8
MIN_INVERSE_SUPPORT = 0.05
DEPTH_TOLERANCE_FRACTION = 0.01

# Label codec.
MAX_CODEBOOK_CLASSES = 32
MAX_CODEBOOK_INSTANCES = 4096
CODEWORD_LOW = 32
CODEWORD_HIGH = 255

# Joint field.
HASH_LEVELS = 16
HASH_FEATURES = 2
HASH_LOG2_TABLE = 14
HASH_MIN_RESOLUTION = 16
HASH_MAX_RESOLUTION = 256
SH_DEGREE = 3
HIDDEN_WIDTH = 64
HASH_LR = 1e-2
MLP_LR = 1e-3

# Volume rendering and training.
RAYS_PER_ITER = 2048
TRAIN_ITERATIONS = 2000
N_COARSE = 64
N_FINE = 96
PDF_FLOOR = 0.01
HOLDOUT_EVERY = 10

# Point extraction.
GRID_RESOLUTION = 128
SIGMA_THRESHOLD = 10.0
MAX_POINTS = 1_000_000
CAMERA_FILTER_FRACTION = 0.05

# Evaluation.
COMPLETENESS_EPS = 0.025
INSTANCE_IOU_THRESHOLD = 0.5

# Pipeline exit codes.
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_FAILURE = 3
