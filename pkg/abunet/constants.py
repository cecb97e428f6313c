"""Constants used throughout the abunet package."""

# SELU fixed-point constants (zero mean / unit variance attractor)
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
ELU_ALPHA = 1.0

# Degeneracy threshold for blending-weight normalization denominators
NORM_TAU = 1e-8

# Activation config strings accepted in run files and on the command line
FIXED_ACTIVATIONS = ("identity", "tanh", "relu", "elu", "selu", "swish")
SCALED_ACTIVATIONS = tuple(f"a_{name}" for name in FIXED_ACTIVATIONS)
ABU_ACTIVATIONS = ("abu", "abu_nrm", "abu_abs", "abu_pos", "abu_soft")
ALL_ACTIVATIONS = FIXED_ACTIVATIONS + SCALED_ACTIVATIONS + ABU_ACTIVATIONS

# Architecture defaults
CONV_CHANNELS = 64
DENSE_UNITS = (384, 192)
IMAGE_SIZE = 32
IMAGE_CHANNELS = 3
POOL_WINDOW = 3
POOL_STRIDE = 2
DROPOUT_RATE = 0.5
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
FIRST_CONV_BIAS = 0.0
BIAS_INIT = 0.1

# Training defaults
DEFAULT_STEPS = 60000
DEFAULT_BATCH_SIZE = 256
ADAM_LR = 0.001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MOMENTUM_MU = 0.9
MOMENTUM_LR_START = 0.01
MOMENTUM_LR_END = 0.0004
CHECKPOINT_EVERY_EPOCHS = 8
VAL_EVAL_EVERY_STEPS = 250
RECORD_EVERY_STEPS = 100
SMOOTHING_WINDOW = 5
VALIDATION_FRACTION = 0.05

# Checkpoint container
CHECKPOINT_FORMAT_VERSION = 1

# Environment variable naming the CIFAR directory
DATA_DIR_ENV = "ABUNET_DATA_DIR"

# CIFAR binary layout
CIFAR_PIXELS = 32 * 32 * 3
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS
CIFAR_FILES = {
    "cifar10": {
        "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
        "test": ["test_batch.bin"],
        "subdir": "cifar-10-batches-bin",
        "num_classes": 10,
    },
    "cifar100": {
        "train": ["train.bin"],
        "test": ["test.bin"],
        "subdir": "cifar-100-binary",
        "num_classes": 100,
    },
}

# CLI exit codes
EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_VERIFICATION_FAILURE = 3

# Synthetic task (Gaussian-blob images)
SYNTHETIC_SIZE = 2048
SYNTHETIC_TEST_SIZE = 512
SYNTHETIC_CLASSES = 10
SYNTHETIC_NOISE = 16.0
SYNTHETIC_SEPARATION = 3.0

# Data pipeline
SPLIT_SEED = 0
PREFETCH_CAPACITY = 2
EVAL_BATCH_SIZE = 256

# Instrumentation
DRIFT_WINDOW_FRACTION = 0.1
SHAPE_GRID = (-3.0, 3.0, 121)
