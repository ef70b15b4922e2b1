from typing import Literal

CHECKPOINT_MAGIC = b"FLNS"
CHECKPOINT_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ENV_DATA_DIR = "FEATLENS_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

ROTATION_BINS = ("identity", "rot90", "rot180", "rot270")
SCALING_BINS = ("scale2", "scale3")

TYPE_LENS_BIN = Literal["identity", "rot90", "rot180", "rot270", "scale2", "scale3"]

# angle filter of the MNIST-rot protocol, inclusive on both ends
MNIST_ROT_FILTER = (45.0, 315.0)
