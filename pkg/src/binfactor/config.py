# src/binfactor/config.py
import logging
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

from .utils.exceptions import ConfigFileError

logger = logging.getLogger(__name__)


class EnvironmentConfig:
    """Loads configuration from a .env, YAML or JSON/JSON5 file."""

    def __init__(self, config_file: str | None = None):
        """
        Initialize environment configuration.

        Args:
            config_file: Path to configuration file (.env, .yaml, .yml, .json or .json5)

        Raises:
            FileNotFoundError: If ``config_file`` is given but does not exist.
            ConfigFileError: If the file cannot be parsed or does not hold a mapping.
        """
        self.config_file = config_file
        self.config_data: dict[str, Any] = {}
        self.pipeline_config: dict[str, Any] = {}

        self._load_config_file()

    def _load_config_file(self) -> None:
        if not self.config_file:
            if Path(".env").exists():
                load_dotenv(".env")
                logger.info("Loaded default .env file")
            return

        config_path = Path(self.config_file)
        if not config_path.is_file():
            raise FileNotFoundError(2, "Configuration file not found", self.config_file)

        context = {"file": self.config_file}
        suffix = config_path.suffix.lower()
        if suffix == ".env":
            load_dotenv(self.config_file, override=True)
            logger.info(f"Loaded environment variables from: {self.config_file}")
            return

        if suffix in [".json", ".json5"]:
            from .schemas.config_schema import CONFIG_SCHEMA
            from .utils.json_utils import load_json_with_schema

            config_data = load_json_with_schema(str(config_path), CONFIG_SCHEMA)
            if config_data is None:
                raise ConfigFileError("configuration file does not parse or fails the config schema", context)
        elif suffix in [".yaml", ".yml"]:
            try:
                with open(config_path, encoding="utf-8") as f:
                    config_data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigFileError(f"cannot parse configuration file: {e}", context) from e
        else:
            raise ConfigFileError(
                "unsupported configuration file format", {**context, "supported": ".env, .yaml, .yml, .json, .json5"}
            )

        if not isinstance(config_data, dict):
            raise ConfigFileError("configuration file must hold a mapping", context)
        pipeline = config_data.get("pipeline", {})
        if not isinstance(pipeline, dict):
            raise ConfigFileError("the pipeline section must be a mapping", context)

        self.config_data = config_data
        self.pipeline_config = pipeline
        logger.info(f"Loaded configuration with {len(self.config_data)} entries from: {self.config_file}")


def load_pipeline_overrides(config_file: str | None) -> dict[str, Any]:
    """The ``pipeline`` section of a config file, or an empty mapping when no file is given."""
    if not config_file:
        return {}
    return EnvironmentConfig(config_file).pipeline_config.copy()
