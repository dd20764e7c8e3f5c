# src/binfactor/utils/json_utils.py
"""JSON5 loading with schema validation, and JSON export of reports."""

import json
import logging
from pathlib import Path
from typing import Any, cast

import jsonschema
import pyjson5
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def load_json_with_schema(file_path: str, schema: dict[str, Any]) -> dict[str, Any] | None:
    """
    Loads a JSON5 file and validates it against a schema.

    Returns:
        The validated data, or None if reading, parsing or validation fails.
    """
    try:
        with open(file_path, encoding="utf-8") as f:
            content = f.read()
        data = cast(dict[str, Any], pyjson5.loads(content))
        jsonschema.validate(data, schema)
        return data
    except (OSError, jsonschema.ValidationError, pyjson5.Json5Exception) as e:
        logger.error(f"Failed to load or validate JSON file {file_path}: {e}")
        return None


def write_model_json(path: str | Path, model: BaseModel) -> None:
    """Serialize a pydantic model as indented JSON."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(model.model_dump(mode="json"), f, indent=2, ensure_ascii=False)
    logger.info(f"Wrote {type(model).__name__} to {target}")
