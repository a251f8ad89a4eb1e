"""Shared constants for supnerf."""

from __future__ import annotations

import math

TOOL_NAME = "supnerf"

# Input patch fed to the encoder (pad-to-square + resize happens upstream)
IMAGE_SIZE = 128

# Binary formats
CHECKPOINT_MAGIC = b"SUPN"
CHECKPOINT_VERSION = 1
TENSOR_MAGIC = b"SUPT"
DTYPE_F64 = 1
DTYPE_U8 = 2
MANIFEST_VERSION = 1

# Geometry
PROJECT_MIN_Z = 1e-6
SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
ORTHONORMAL_TOL = 1e-6  # accepted drift on input
ORTHONORMAL_SNAP = 1e-12  # drift above this is projected back onto SO(3)
MIN_CORNER_DEPTH = 0.5  # refiner behind-camera guard, meters

# Rendering
SIGMA_MAX = 1e4
OCCUPANCY_FLOOR = 1e-6

# Objectives
BCE_EPS = 1e-7
PSNR_CAP = 99.0
PSNR_MSE_FLOOR = 1e-10

# Mask classes
MASK_BACKGROUND = 0.0
MASK_UNKNOWN = 0.5
MASK_FOREGROUND = 1.0

# Pose sampling
DEFAULT_INIT_DEPTH = 20.0
DEFAULT_ROT_PERTURB = math.radians(20.0)
