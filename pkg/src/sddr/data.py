"""Column-table handling: validation, factor levels, dummy coding.

A "table" is a plain ``dict[str, np.ndarray]`` with equal-length columns.
Numeric columns are float64; everything else is treated as a categorical
factor and kept as an object/str array.  pandas DataFrames are accepted and
converted.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def as_table(data) -> dict[str, np.ndarray]:
    """Normalize ``data`` (mapping or DataFrame) to a dict of 1-d arrays."""
    if hasattr(data, "columns") and hasattr(data, "to_dict"):
        data = {str(c): np.asarray(data[c]) for c in data.columns}
    if not isinstance(data, dict):
        raise DataError(f"expected a dict of columns or a DataFrame, got {type(data).__name__}")
    table: dict[str, np.ndarray] = {}
    length = None
    for name, col in data.items():
        arr = np.asarray(col)
        if arr.ndim != 1:
            raise DataError(f"column {name!r} is not 1-dimensional")
        if length is None:
            length = arr.shape[0]
        elif arr.shape[0] != length:
            raise DataError(f"column {name!r} has length {arr.shape[0]}, expected {length}")
        if np.issubdtype(arr.dtype, np.number) or arr.dtype == bool:
            table[str(name)] = arr.astype(np.float64)
        else:
            table[str(name)] = arr.astype(str)
    if length is None:
        raise DataError("empty data table")
    return table


def n_rows(table: dict[str, np.ndarray]) -> int:
    return next(iter(table.values())).shape[0]


def is_numeric(col: np.ndarray) -> bool:
    return np.issubdtype(col.dtype, np.floating)


def require_column(table: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in table:
        raise DataError(f"column {name!r} not found in data")
    return table[name]


def numeric_column(table: dict[str, np.ndarray], name: str) -> np.ndarray:
    col = require_column(table, name)
    if not is_numeric(col):
        raise DataError(f"column {name!r} must be numeric")
    return col


def factor_levels(col: np.ndarray) -> list[str]:
    """Sorted unique values; level order is the coding order."""
    return sorted(np.unique(col).tolist())


def dummy_code(
    col: np.ndarray, levels: list[str], drop_first: bool
) -> tuple[np.ndarray, list[str]]:
    """Expand a factor column to 0/1 dummy columns for the given levels.

    Values outside ``levels`` raise, listing the known levels.  With
    ``drop_first`` the first level is the reference and gets no column.
    """
    known = set(levels)
    seen = np.unique(col)
    unseen = [v for v in seen.tolist() if v not in known]
    if unseen:
        raise DataError(
            f"unseen factor level(s) {unseen!r}; training levels were {levels!r}"
        )
    used = levels[1:] if drop_first else levels
    cols = np.column_stack([(col == lvl).astype(np.float64) for lvl in used]) if used else np.zeros((col.shape[0], 0))
    return cols, list(used)
