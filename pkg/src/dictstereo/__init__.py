"""Photometric stereo with a dictionary of measured or parametric BRDFs."""

from __future__ import annotations

import warnings

# numba complains about old TBB builds even when the workqueue layer is used
warnings.filterwarnings("ignore", message="The TBB threading layer")

__version__ = "0.1.0"
