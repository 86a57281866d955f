"""Index arithmetic for m x m sliding windows under the two border policies.

``zero``  -- the window is always centred; taps outside the image read zeros
             (indices point into an input padded by ``m // 2``).
``clamp`` -- neighborhood-attention windows: centred where possible, shifted
             inward at borders so every tap reads a real value. If the window
             is larger than the image, taps past the far edge repeat the last
             row/column.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

PADDING_POLICIES = ("zero", "clamp")


def check_window(m: int) -> None:
    if m < 1 or m % 2 == 0:
        raise ConfigError(f"window size must be a positive odd integer, got {m}")


def window_starts(n: int, m: int) -> np.ndarray:
    return np.clip(np.arange(n) - m // 2, 0, max(n - m, 0))


def window_index(n: int, m: int, policy: str) -> tuple:
    """Return ``(idx, pad)``; ``idx[p, t]`` is the source index of tap ``t`` for query ``p``.

    For the zero policy indices address an axis padded by ``pad`` on both sides.
    """
    check_window(m)
    if policy == "clamp":
        idx = window_starts(n, m)[:, None] + np.arange(m)[None, :]
        return np.minimum(idx, n - 1), 0
    if policy == "zero":
        return np.arange(n)[:, None] + np.arange(m)[None, :], m // 2
    raise ConfigError(f"unknown padding policy {policy!r}; expected one of {PADDING_POLICIES}")


def relative_index(n: int, m: int) -> np.ndarray:
    """Offset of every clamped tap relative to its query, shifted into ``[0, 2m-2]``."""
    idx, _ = window_index(n, m, "clamp")
    return idx - np.arange(n)[:, None] + (m - 1)
