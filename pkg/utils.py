import logging
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

EPOCH = pd.Timestamp("1970-01-01", tz="UTC")


def save_dataframe(
    df: pd.DataFrame,
    name: str,
    output_format: str,
    output_path: Path,
) -> Path:
    """
    Saves a DataFrame to a CSV or Parquet file at output_path directory.

    :param df: DataFrame to save
    :param name: File name without extension, e.g. "intersections"
    :param output_format: The output format to use. Either "csv" or "parquet".
    :param output_path: The directory to save the file to
    :return: Path of the written file
    """
    if output_format == "csv":
        file_name = f"{name}.csv"
        df.to_csv(output_path / file_name, index=False, float_format="%.6f")
    elif output_format == "parquet":
        file_name = f"{name}.parquet"
        df.to_parquet(output_path / file_name, index=False)
    else:
        raise ValueError(
            f"Invalid output format [{output_format}]. "
            f"Must be one of: csv, parquet."
        )

    logger.info(f"Saved {name} table ({len(df)} rows) to [{output_path / file_name}]")
    return output_path / file_name


def to_epoch_seconds(values: pd.Series) -> pd.Series:
    """
    Normalizes a column of timestamps to integer seconds since epoch.

    Integer epoch values and ISO-8601 strings may be mixed within a column.
    Naive ISO-8601 values are read as UTC. Unparseable entries become NA so the
    caller can report the offending row.

    Examples:
        - "1591000000"           -> 1591000000
        - "2020-06-01T08:00:00Z" -> 1590998400
        - "2020-06-01 08:00:00"  -> 1590998400
        - "yesterday"            -> <NA>
    """
    values = values.astype(str).str.strip()
    numeric = pd.to_numeric(values, errors="coerce")

    # Fractional epochs are not accepted: the loggers emit whole seconds
    whole = numeric.notna() & (numeric == np.floor(numeric))
    result = pd.Series(pd.NA, index=values.index, dtype="Int64")
    result[whole] = numeric[whole].astype("int64")

    pending = numeric.isna() & (values != "")
    if pending.any():
        parsed = pd.to_datetime(
            values[pending], utc=True, errors="coerce", format="ISO8601"
        )
        ok = parsed.notna()
        seconds = (parsed[ok] - EPOCH) // pd.Timedelta(seconds=1)
        result[seconds.index] = seconds.astype("int64")

    return result


def longest_run(mask: np.ndarray) -> int:
    """
    Length of the longest run of consecutive True values.

    Examples:
        - [F, T, T, F, T] -> 2
        - []              -> 0
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0

    # Pad with False so every run has a start and an end edge
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return int((ends - starts).max())
