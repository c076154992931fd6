"""
Utility functions for force2kin.
"""
import logging
import re
from contextlib import contextmanager
from pathlib import Path

import pandas as pd

from .errors import DataError, DimensionError, Force2KinError, GeometryError, UnsupportedLengthError

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
FLOAT_FORMAT = "%.17g"


def setup_logging(verbose: bool = False) -> None:
    """Configure root logging once for command-line use."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def sanitize_event_id(name: str) -> str:
    """
    Make an event id safe to use as a file name.

    Args:
        name: Raw event id (recording name, trial label, ...)

    Returns:
        The id with every character outside [a-zA-Z0-9._-] replaced by "_".
        Returns "event" if nothing is left.

    Examples:
        >>> sanitize_event_id("trial 07/run#2")
        'trial_07_run_2'
        >>> sanitize_event_id("")
        'event'
    """
    cleaned = re.sub(r'[^a-zA-Z0-9._-]', '_', name.strip())
    if not cleaned.strip('._'):
        return "event"
    return cleaned


def event_filename(event_id: str) -> str:
    """
    File name of an event's CSV.

    Examples:
        >>> event_filename("synth_0001")
        'synth_0001.csv'
        >>> event_filename("trial.csv")
        'trial.csv'
    """
    stem = event_id[:-4] if event_id.endswith('.csv') else event_id
    return sanitize_event_id(stem) + '.csv'


def write_table(frame: pd.DataFrame, path) -> Path:
    """Write a CSV that reads back to the same float64 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


@contextmanager
def pipeline_stage(name: str):
    """
    Tag errors escaping the block with the stage `name`.

    Shape and geometry errors from the numeric core surface as DataError so
    the CLI reports them with the data exit code.
    """
    try:
        yield
    except Force2KinError as e:
        if not e.stage:
            e.stage = name
        raise
    except (DimensionError, UnsupportedLengthError, GeometryError) as e:
        raise DataError(str(e), stage=name) from e
