"""Deterministic-execution switch.

All randomness in the package flows through explicit generator objects, so
library calls are reproducible by construction.  The CLI additionally pins
torch to deterministic kernels and a single thread unless the user opts out
by setting ``PRIORSEG_DETERMINISTIC=0``.
"""
from __future__ import annotations

import os

import torch

ENV_VAR = "PRIORSEG_DETERMINISTIC"


def deterministic_requested() -> bool:
    """Deterministic mode is the default; only an explicit "0" disables it."""
    return os.environ.get(ENV_VAR, "1") != "0"


def enable_determinism() -> None:
    # Single-threaded execution avoids reduction-order drift between runs.
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
