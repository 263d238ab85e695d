import configparser
from pathlib import Path
from typing import Any, Dict, Union

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigParseError, ConfigValidationError
from schemas import ExperimentConfig


class Settings(BaseSettings):
    """Process-level settings; they change speed and verbosity, never results."""

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    # Logging
    LOG_LEVEL: str = "INFO"

    # Concurrency (client updates within a round)
    MAX_WORKERS: int = 1

    # Outputs
    RESULTS_DIR: str = "results"

    # Graphs above this node count use the sparse adjacency path
    DENSE_NODE_LIMIT: int = 5000


settings = Settings()


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_sections(text: str, source: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(
        strict=True,
        interpolation=None,
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
        default_section="__defaults__",
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigParseError("expected a [section] header before any key", line=exc.lineno) from exc
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigParseError(exc.message.split(": ", 1)[-1], line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigParseError("expected `key = value`", line=line) from exc
    return {name: dict(parser.items(name, raw=True)) for name in parser.sections()}


def config_from_text(text: str, source: str = "<config>") -> ExperimentConfig:
    sections = _read_sections(text, source)
    if "mode" not in sections.get("experiment", {}):
        raise ConfigValidationError("mode missing", field="experiment.mode")
    try:
        return ExperimentConfig.model_validate(sections)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or None
        message = error["msg"]
        if error["type"] == "missing" and field:
            message = f"{field.rsplit('.', 1)[-1]} missing"
        raise ConfigValidationError(message, field=field) from exc


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Strict parse of an experiment config file.

    Unknown sections or keys are errors; every omitted key takes the default
    that `dump_config` prints.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"config file not found: {path}")
    return config_from_text(path.read_text(encoding="utf-8"), source=str(path))


def _dump_section(name: str, section: BaseModel) -> str:
    lines = [f"[{name}]"]
    for field_name, info in type(section).model_fields.items():
        key = info.alias or field_name
        lines.append(f"{key} = {_format_value(getattr(section, field_name))}")
    return "\n".join(lines)


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved config in the parser's own format (parses back to `cfg`)."""
    blocks = [_dump_section(name, getattr(cfg, name)) for name in ExperimentConfig.model_fields]
    return "\n\n".join(blocks) + "\n"


def with_overrides(cfg: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Apply CLI flag overrides (`seed`, `mode`, `output_dir`) and re-validate."""
    data = cfg.model_dump(by_alias=True)
    for key, value in overrides.items():
        if value is not None:
            data["experiment"][key] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        raise ConfigValidationError(error["msg"], field=".".join(str(p) for p in error["loc"]) or None) from exc
