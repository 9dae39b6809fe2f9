"""Shared type definitions and utilities for driftk."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

# Reusable decorator for immutable, slot-based dataclasses.
frozen_slots = dataclass(frozen=True, slots=True)

# Dense float arrays. A Batch stacks one sample per row.
Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
Batch = npt.NDArray[np.float64]
