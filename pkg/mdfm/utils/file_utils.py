import json
import os
from typing import Iterable, Optional, Type, TypeVar

import pandas as pd
from pydantic import BaseModel

from ..models.errors import ConfigError

# 17 significant digits round-trip every double exactly
FLOAT_FORMAT = "%.17g"

MACRO_COLUMNS = ["time", "series", "value"]
MICRO_COLUMNS = ["subject_id", "group_id", "time", "value"]
SUPPORTED_EXTENSIONS = {".csv", ".json"}

Record = TypeVar("Record", bound=BaseModel)


def get_file_extension(filename: str) -> str:
    """Get the file extension from filename"""
    if not filename:
        return ""
    return os.path.splitext(filename)[1].lower()


def validate_file_type(filename: str) -> bool:
    """Validate if the file type is supported"""
    if not filename:
        return False
    return get_file_extension(filename) in SUPPORTED_EXTENSIONS


def validate_input_paths(paths: Iterable[str]) -> None:
    """Raise FileNotFoundError for the first input that does not exist"""
    for path in paths:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Input file not found: {path}")


def ensure_output_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"Output directory is not writable: {path}")
    return path


def _read_frame(source, columns, what: str, dtypes: dict) -> pd.DataFrame:
    frame = pd.read_csv(source, dtype=dtypes)
    missing = [name for name in columns if name not in frame.columns]
    if missing:
        raise ConfigError(f"{what} CSV is missing columns {missing}", "io", "read_csv")
    return frame


def read_macro_csv(source) -> pd.DataFrame:
    """Long-form macro panel: time,series,value"""
    frame = _read_frame(source, MACRO_COLUMNS, "Macro", {"series": str})
    return frame.dropna(subset=["value"]).reset_index(drop=True)


def read_micro_csv(source: Optional[str]) -> pd.DataFrame:
    """Long-form micro panel: subject_id,group_id,time[,characteristic],value; empty when no file is given"""
    if source is None:
        return pd.DataFrame(columns=MICRO_COLUMNS)
    frame = _read_frame(source, MICRO_COLUMNS, "Micro", {"subject_id": str, "group_id": str})
    return frame.dropna(subset=["value"]).reset_index(drop=True)


def read_calendar_csv(source) -> pd.DataFrame:
    return _read_frame(source, ["release_date", "series", "ref_period", "value"], "Calendar", {"series": str, "group_id": str})


def frame_to_csv(frame: pd.DataFrame, path: Optional[str] = None) -> Optional[str]:
    """CSV with 17-digit floats and empty cells for NaN; returns the text when no path is given"""
    return frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")


def write_record(record: BaseModel, path: str) -> None:
    # floats keep their shortest exact repr
    payload = json.dumps(record.model_dump(), indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(payload + "\n")


def read_record(path: str, model: Type[Record]) -> Record:
    with open(path, "r", encoding="utf-8") as handle:
        return model.model_validate(json.load(handle))
