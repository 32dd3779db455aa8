"""
services/datasets.py
Read and write the time series CSV format.

    t,y,<exposure names...>,<covariate names...>

``t`` holds consecutive integers; an empty ``y`` field is a missing outcome; every other
column must be fully observed and numeric. Columns the model does not name as exposures are
loaded as covariates.
"""

from __future__ import annotations

import logging
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from design import TimeSeriesDataset
from dlm_core import ContractError
from services.outputs import write_csv
from simulation import COEFFICIENT_ALIASES, ScenarioTruth

logger = logging.getLogger(__name__)


class SchemaError(ContractError):
    """CSV content violates the dataset schema; ``line`` is the 1-based file line."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.column = column


def _numeric(raw: pd.Series, column: str, allow_empty: bool) -> np.ndarray:
    values = np.empty(len(raw))
    for i, cell in enumerate(raw.tolist()):
        text = cell.strip()
        if text == "":
            if not allow_empty:
                raise SchemaError("missing value (only y may be empty)", line=i + 2, column=column)
            values[i] = np.nan
            continue
        try:
            values[i] = float(text)
        except ValueError:
            raise SchemaError(f"not a number: {text!r}", line=i + 2, column=column) from None
        if not np.isfinite(values[i]):
            raise SchemaError(f"non-finite value {text!r}", line=i + 2, column=column)
    return values


def read_dataset(path: str, exposures: Sequence[str] = ()) -> TimeSeriesDataset:
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError(f"data file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path} is empty", line=1) from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path} is not a readable UTF-8 CSV: {exc}") from None
    columns = [str(c) for c in raw.columns]
    if columns[:2] != ["t", "y"]:
        raise SchemaError(f"header must start with 't,y', got {','.join(columns[:2])}", line=1)
    if len(set(columns)) != len(columns):
        raise SchemaError("duplicate column names in header", line=1)
    if raw.empty:
        raise SchemaError("no data rows", line=2)
    unknown = [a for a in exposures if a not in columns[2:]]
    if unknown:
        raise SchemaError(f"exposure column(s) {unknown} not in header", line=1)

    t = _numeric(raw["t"], "t", allow_empty=False)
    if np.any(t != np.round(t)):
        bad = int(np.flatnonzero(t != np.round(t))[0])
        raise SchemaError("t must be an integer", line=bad + 2, column="t")
    t = t.astype(int)
    gaps = np.flatnonzero(np.diff(t) != 1)
    if gaps.size:
        i = int(gaps[0]) + 1
        raise SchemaError(
            f"t must increase by 1 (got {t[i - 1]} then {t[i]}); insert rows with an empty y instead",
            line=i + 2,
            column="t",
        )
    y = _numeric(raw["y"], "y", allow_empty=True)
    series: Dict[str, np.ndarray] = {c: _numeric(raw[c], c, allow_empty=False) for c in columns[2:]}
    ds = TimeSeriesDataset(
        y=y,
        exposures={a: series[a] for a in columns[2:] if a in exposures},
        covariates={c: series[c] for c in columns[2:] if c not in exposures},
        t_index=t,
    )
    logger.info("read %s: T=%d, %d missing outcome(s)", path, ds.T, ds.n_missing)
    return ds


def dataset_frame(ds: TimeSeriesDataset, y: Optional[np.ndarray] = None) -> pd.DataFrame:
    data = {"t": ds.t_index, "y": ds.y if y is None else y}
    data.update(ds.exposures)
    data.update(ds.covariates)
    return pd.DataFrame(data)


def write_dataset(ds: TimeSeriesDataset, path: str, meta=None, y: Optional[np.ndarray] = None):
    write_csv(dataset_frame(ds, y), path, meta)


def write_truth(truth: ScenarioTruth, path: str, meta=None):
    write_csv(truth.frame(), path, meta)


def read_truth(path: str, t_index: Sequence[int]) -> Dict[str, np.ndarray]:
    """Coefficient truth from a ``truth.csv``, keyed by design coefficient name and aligned to
    ``t_index``. Columns other than the known truth names are ignored."""
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError(f"truth file not found: {path}") from None
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path} is not a readable truth CSV: {exc}") from None
    if "t" not in frame.columns:
        raise SchemaError("truth header must contain 't'", line=1)
    frame = frame.set_index("t")
    missing = sorted(set(int(t) for t in t_index) - set(int(t) for t in frame.index))
    if missing:
        raise SchemaError(f"truth does not cover time(s) {missing[:5]} of the dataset", column="t")
    rows = frame.loc[list(t_index)]
    return {
        coef: rows[name].to_numpy(dtype=float)
        for name, coef in COEFFICIENT_ALIASES.items()
        if name in rows.columns
    }
