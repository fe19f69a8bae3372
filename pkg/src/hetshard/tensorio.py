"""Tensor files: the safetensors layout.

Bytes 0..7 hold the header length N as a little-endian u64, followed by an
N-byte JSON header mapping each name to ``{"dtype", "shape", "data_offsets"}``
and then the raw little-endian, row-major payloads.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
from safetensors.numpy import load_file, save_file


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> None:
    arrays = {k: np.ascontiguousarray(v) for k, v in tensors.items()}
    save_file(arrays, str(path), metadata=dict(metadata) if metadata else None)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return dict(load_file(str(path)))
