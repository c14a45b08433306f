# settings.py

"""
Project-wide constants and logging setup.

Values that differ per machine come from environment variables; everything
else is a plain module constant so the other modules can simply import it.
"""

import logging
import os
from typing import List

# Root directory for run outputs when a command is not given --out.
OUTPUT_ROOT_ENV = "CXR_LOCALIZER_OUTPUT"
DEFAULT_OUTPUT_ROOT = os.environ.get(OUTPUT_ROOT_ENV, "runs")

CHECKPOINT_FORMAT_VERSION = 1

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"

# ChestX-ray14 finding names, in the column order of the public label file.
CHESTXRAY14_CLASSES: List[str] = [
    "Atelectasis", "Cardiomegaly", "Effusion", "Infiltration", "Mass", "Nodule",
    "Pneumonia", "Pneumothorax", "Consolidation", "Edema", "Emphysema", "Fibrosis",
    "Pleural_Thickening", "Hernia",
]
NO_FINDING = "No Finding"

# Region verification threshold on the normalized merged map.
DEFAULT_CAM_THRESHOLD = 0.8

# Localization threshold used when cross-validation cannot pick one.
DEFAULT_LOC_THRESHOLD = 0.5

# IoU thresholds of the localization table.
IOU_THRESHOLDS = (0.1, 0.3, 0.5, 0.7)


def configure_logging(verbose: bool = False) -> None:
    """Configure the root logger once for command-line runs."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
    )
