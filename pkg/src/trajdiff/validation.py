"""Small input-validation helpers shared by the estimator, the CLI and the
core modules. Each raises ConfigError (or VocabularyError for id-range
checks) with a message naming the offending parameter.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, VocabularyError


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < 1:
        raise ConfigError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_unit_interval(value, name: str, *, inclusive: bool = True) -> float:
    value = float(value)
    if inclusive:
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    else:
        if not 0.0 < value < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_non_negative(value, name: str) -> float:
    value = float(value)
    if value < 0.0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
    return value


def check_choice(value, name: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ConfigError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_item_ids(ids, n_items: int, name: str, *, allow_padding: bool) -> None:
    """Validate that every id lies in the fitted vocabulary [1, n_items]
    (or [0, n_items] when padding is allowed)."""
    arr = np.asarray(ids)
    if arr.size == 0:
        return
    low = 0 if allow_padding else 1
    lo, hi = int(arr.min()), int(arr.max())
    if lo < low or hi > n_items:
        raise VocabularyError(
            f"{name} contains item id outside [{low}, {n_items}]: "
            f"observed range [{lo}, {hi}]"
        )


def check_sequences(X) -> list[list[int]]:
    """Coerce an iterable of item-id sequences into lists of positive ints.

    Accepts lists, tuples or 1-D integer arrays per user. Rejects padding
    ids (0) and non-integer entries.
    """
    if X is None:
        raise ConfigError("X must be an iterable of item-id sequences, got None")
    if not isinstance(X, Iterable) or isinstance(X, (str, bytes)):
        raise ConfigError(f"X must be an iterable of item-id sequences, got {type(X).__name__}")
    sequences = []
    for row, seq in enumerate(X):
        if isinstance(seq, np.ndarray):
            seq = seq.tolist()
        if not isinstance(seq, Iterable) or isinstance(seq, (str, bytes)):
            raise ConfigError(f"X[{row}] is not a sequence of item ids")
        out = []
        for value in seq:
            if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
                value = int(value)
            else:
                raise ConfigError(f"X[{row}] contains non-integer item id {value!r}")
            if value < 1:
                raise ConfigError(f"X[{row}] contains item id {value}; ids must be >= 1")
            out.append(value)
        sequences.append(out)
    return sequences
