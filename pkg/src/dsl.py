"""
Edcurate DSL - Pipeline configuration parser, validator and stage dependency resolver
"""

import dataclasses
import re
import yaml
import logging
from typing import Any, Dict, List, Optional, Set

from .corpus import parse_label
from .types import (
    ConfigError,
    DataError,
    MonthKey,
    PipelineConfig,
    StageDefinition,
    CONFIG_SECTIONS,
)
from .utils import ConfigLoader

logger = logging.getLogger(__name__)

STAGE_NAMES = (
    "ingest",
    "dedupe",
    "audit",
    "balance",
    "split",
    "train",
    "eval",
    "classify",
    "trend",
)

TOP_LEVEL_PROPERTIES = ("name", "seed", "workdir", "workers", "stages", *CONFIG_SECTIONS)


def default_stages() -> Dict[str, StageDefinition]:
    """Linear chain through every stage"""
    return {
        stage: StageDefinition(needs=[STAGE_NAMES[i - 1]] if i else [])
        for i, stage in enumerate(STAGE_NAMES)
    }


class ConfigParser:
    """Parses YAML pipeline configurations into PipelineConfig objects"""

    @staticmethod
    def load_from_file(file_path: str) -> Dict[str, Any]:
        """Load raw config data from YAML file with user-friendly error messages"""
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                yaml_data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            error_msg = f"YAML parsing error in {file_path}:\n  {str(e)}\n  Please check your YAML syntax."
            raise ConfigError(error_msg) from None
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {file_path}") from None
        except PermissionError:
            raise ConfigError(f"Permission denied reading file: {file_path}") from None

        if yaml_data is None:
            raise ConfigError(f"Empty or invalid YAML file: {file_path}")
        if not isinstance(yaml_data, dict):
            raise ConfigError(
                f"Invalid config format in {file_path}: expected a YAML object but got "
                f"{type(yaml_data).__name__}"
            )
        return yaml_data

    @staticmethod
    def parse(data: Dict[str, Any]) -> PipelineConfig:
        """Parse config data into a PipelineConfig with better error messages"""
        if not isinstance(data, dict):
            raise ConfigError(
                f"Invalid config format: expected a YAML object but got {type(data).__name__}.\n"
                f"  Configs start with properties like 'seed:' and 'inputs:'"
            )

        data = {key.replace("-", "_"): value for key, value in data.items()}
        for key in data:
            if key not in TOP_LEVEL_PROPERTIES:
                raise ConfigError(
                    f"Unknown config property: '{key}'\n"
                    f"  Valid top-level properties are: {', '.join(TOP_LEVEL_PROPERTIES)}\n"
                    f"  Did you mean to put '{key}' inside a section?"
                )

        for section, cls in CONFIG_SECTIONS.items():
            value = data.get(section)
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(
                    f"Config section '{section}' must be a mapping, got {type(value).__name__}"
                )
            known = {f.name for f in dataclasses.fields(cls)}
            for key in value:
                if key.replace("-", "_") not in known:
                    raise ConfigError(
                        f"Unknown config property: '{section}.{key}'\n"
                        f"  Valid properties are: {', '.join(sorted(known))}"
                    )

        stages = data.get("stages")
        if stages is not None and not isinstance(stages, dict):
            raise ConfigError("Config property 'stages' must map stage names to definitions")
        for stage_id, stage in (stages or {}).items():
            if stage is not None and not isinstance(stage, dict):
                raise ConfigError(
                    f"Stage '{stage_id}' must be a mapping like {{needs: [...]}}, "
                    f"got {type(stage).__name__}"
                )

        try:
            return PipelineConfig(**data)
        except TypeError as e:
            match = re.search(r"unexpected keyword argument '(\w+)'", str(e))
            if match:
                raise ConfigError(f"Unknown stage property: '{match.group(1)}'") from None
            raise ConfigError(f"Config structure error: {str(e)}") from None

    @staticmethod
    def resolve(
        config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
    ) -> PipelineConfig:
        """Merge defaults < YAML file < EDCURATE_ environment < explicit overrides"""
        data = ConfigParser.load_from_file(config_path) if config_path else {}
        data = ConfigLoader.from_dict(ConfigLoader.from_env(), data)
        data = ConfigLoader.from_dict(overrides or {}, data)
        cfg = ConfigParser.parse(data)
        errors = ConfigParser.validate(cfg)
        if errors:
            raise ConfigError("Invalid configuration:\n  " + "\n  ".join(errors))
        return cfg

    @staticmethod
    def validate(cfg: PipelineConfig) -> List[str]:
        """Validate config values and return error messages naming each field"""
        errors = []

        def is_int(value: Any) -> bool:
            return isinstance(value, int) and not isinstance(value, bool)

        def is_number(value: Any) -> bool:
            return isinstance(value, (int, float)) and not isinstance(value, bool)

        if not is_int(cfg.seed) or not 0 <= cfg.seed < 2**64:
            errors.append(f"seed must be an integer in [0, 2^64), got {cfg.seed!r}")
        if not is_int(cfg.workers) or cfg.workers < 1:
            errors.append(f"workers must be a positive integer, got {cfg.workers!r}")
        if not isinstance(cfg.workdir, str) or not cfg.workdir:
            errors.append("workdir must be a non-empty path")

        for name, value in cfg.inputs.__dict__.items():
            if value is not None and not isinstance(value, str):
                errors.append(f"inputs.{name} must be a path string, got {value!r}")

        threshold = cfg.dedup.near_threshold
        if not is_number(threshold) or not 0.0 <= threshold <= 1.0:
            errors.append(f"dedup.near_threshold must be in [0, 1], got {threshold!r}")

        audit = cfg.audit
        if not is_int(audit.tables) or audit.tables < 1:
            errors.append(f"audit.tables must be a positive integer, got {audit.tables!r}")
        if not is_int(audit.bits) or not 1 <= audit.bits <= 63:
            errors.append(f"audit.bits must be an integer in [1, 63], got {audit.bits!r}")
        if not is_int(audit.k) or audit.k < 1:
            errors.append(f"audit.k must be a positive integer, got {audit.k!r}")
        elif not is_int(audit.flag_min_disagree) or not 1 <= audit.flag_min_disagree <= audit.k:
            errors.append(
                f"audit.flag_min_disagree must be an integer in [1, {audit.k}], "
                f"got {audit.flag_min_disagree!r}"
            )

        fractions = cfg.split.fractions
        if (
            not isinstance(fractions, (list, tuple))
            or len(fractions) != 3
            or not all(is_number(f) for f in fractions)
        ):
            errors.append(f"split.fractions must be three numbers, got {fractions!r}")
        elif any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            errors.append(f"split.fractions must be positive and sum to 1.0, got {list(fractions)}")

        train = cfg.train
        if not is_number(train.learning_rate) or not train.learning_rate > 0:
            errors.append(f"train.learning_rate must be positive, got {train.learning_rate!r}")
        for name in ("max_epochs", "batch_size", "patience"):
            value = getattr(train, name)
            if not is_int(value) or value < 1:
                errors.append(f"train.{name} must be a positive integer, got {value!r}")

        months = {}
        for name in ("window_start", "window_end", "linear_from"):
            try:
                months[name] = MonthKey.parse(getattr(cfg.trend, name))
            except ConfigError:
                errors.append(f"trend.{name} must be a YYYY-MM month, got {getattr(cfg.trend, name)!r}")
        if "window_start" in months and "window_end" in months:
            if months["window_start"] > months["window_end"]:
                errors.append("trend.window_start must not be after trend.window_end")
        if not is_int(cfg.trend.degree) or not 1 <= cfg.trend.degree <= 3:
            errors.append(f"trend.degree must be 1, 2 or 3, got {cfg.trend.degree!r}")

        if not isinstance(cfg.labeling.by_source, dict):
            errors.append("labeling.by_source must map source tags to labels")
        else:
            for source, label in cfg.labeling.by_source.items():
                try:
                    parse_label(label)
                except DataError:
                    errors.append(f"labeling.by_source.{source} has unknown label {label!r}")

        errors.extend(ConfigParser.validate_stages(cfg.stages))
        return errors

    @staticmethod
    def validate_stages(stages: Dict[str, StageDefinition]) -> List[str]:
        """Check stage names, dependencies and cycles"""
        errors = []
        stage_ids = set(stages.keys())

        for stage_id, stage in stages.items():
            if stage_id not in STAGE_NAMES:
                errors.append(
                    f"Unknown stage '{stage_id}', expected one of: {', '.join(STAGE_NAMES)}"
                )
            for dep in stage.needs:
                if dep not in stage_ids:
                    errors.append(f"Stage '{stage_id}' depends on non-existent stage '{dep}'")

        visited: Set[str] = set()
        rec_stack: Set[str] = set()

        def has_cycle(stage_id: str) -> bool:
            if stage_id in rec_stack:
                return True
            if stage_id in visited:
                return False

            visited.add(stage_id)
            rec_stack.add(stage_id)

            stage = stages.get(stage_id)
            if stage:
                for dep in stage.needs:
                    if has_cycle(dep):
                        return True

            rec_stack.remove(stage_id)
            return False

        for stage_id in sorted(stage_ids):
            if stage_id not in visited and has_cycle(stage_id):
                errors.append(f"Circular dependency detected involving stage '{stage_id}'")
                break

        return errors


class DependencyResolver:
    """Resolves stage execution order based on dependencies"""

    @staticmethod
    def get_ready_stages(stages: Dict[str, StageDefinition], completed: Set[str]) -> List[str]:
        """Stages whose dependencies are all complete, in canonical stage order"""
        ready = []
        for stage_id in sorted(set(stages) - completed, key=_stage_rank):
            stage = stages[stage_id]
            if all(dep in completed for dep in stage.needs):
                ready.append(stage_id)
            else:
                missing_deps = [dep for dep in stage.needs if dep not in completed]
                logger.debug(f"Stage '{stage_id}' waiting for dependencies: {missing_deps}")
        return ready

    @staticmethod
    def get_stage_diagnostics(
        stages: Dict[str, StageDefinition], completed: Set[str]
    ) -> Dict[str, Dict[str, Any]]:
        """Detailed diagnostics for why stages aren't ready"""
        diagnostics = {}
        for stage_id in set(stages) - completed:
            missing_deps = [dep for dep in stages[stage_id].needs if dep not in completed]
            diagnostics[stage_id] = {
                "status": "waiting_for_dependencies" if missing_deps else "ready",
                "missing_dependencies": missing_deps,
            }
        return diagnostics

    @staticmethod
    def execution_order(stages: Dict[str, StageDefinition]) -> List[str]:
        """Topological order; raises ConfigError if the graph cannot complete"""
        errors = ConfigParser.validate_stages(stages)
        if errors:
            raise ConfigError("Invalid stage graph:\n  " + "\n  ".join(errors))

        order: List[str] = []
        completed: Set[str] = set()
        while len(completed) < len(stages):
            ready = DependencyResolver.get_ready_stages(stages, completed)
            if not ready:
                blocked = DependencyResolver.get_stage_diagnostics(stages, completed)
                raise ConfigError(f"Stages blocked on dependencies: {sorted(blocked)}")
            # one at a time keeps the order canonical
            order.append(ready[0])
            completed.add(ready[0])
        return order


def _stage_rank(stage_id: str) -> int:
    return STAGE_NAMES.index(stage_id) if stage_id in STAGE_NAMES else len(STAGE_NAMES)


def config_to_yaml(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def validate_config(cfg: PipelineConfig) -> List[str]:
    """Value and stage graph errors, one message per offending field"""
    return ConfigParser.validate(cfg)
