"""
Edcurate Utilities - Artifact writing, configuration loading, seeding and hashing helpers
"""

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar
import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, *stream)"""
    entropy = [int(seed)] + [int(s) for s in stream]
    if any(value < 0 for value in entropy):
        raise ValueError(f"Seeds must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def feature_hash(key: str, seed: int, buckets: int) -> tuple:
    """Map key to (bucket index, sign) with a seeded blake2b digest"""
    digest = hashlib.blake2b(
        key.encode("utf-8"), digest_size=8, key=int(seed).to_bytes(8, "little")
    ).digest()
    value = int.from_bytes(digest, "little")
    return (value >> 1) % buckets, 1.0 if value & 1 else -1.0


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Order-preserving map; threads only when workers > 1"""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def dumps_json(data: Any) -> str:
    """Canonical JSON text used for every artifact"""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


class ArtifactWriter:
    """Stages artifact files next to their targets and commits them together.

    Used as a context manager: files are renamed into place only if the block
    exits cleanly, otherwise every staged temp file is removed.
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self._staged: Dict[str, str] = {}

    def __enter__(self) -> "ArtifactWriter":
        os.makedirs(self.out_dir, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.discard()
        return False

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _stage(self, name: str) -> str:
        if name in self._staged:
            raise ValueError(f"Artifact '{name}' written twice in one stage")
        fd, temp_path = tempfile.mkstemp(
            prefix=f".{name}.", suffix=".tmp", dir=self.out_dir
        )
        os.close(fd)
        self._staged[name] = temp_path
        return temp_path

    def write_text(self, name: str, content: str) -> str:
        temp_path = self._stage(name)
        with open(temp_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        return self.path(name)

    def write_json(self, name: str, data: Any) -> str:
        return self.write_text(name, dumps_json(data))

    def write_csv(self, name: str, frame: pd.DataFrame, float_format: str = "%.10g") -> str:
        temp_path = self._stage(name)
        frame.to_csv(temp_path, index=False, float_format=float_format, lineterminator="\n")
        return self.path(name)

    def commit(self) -> List[str]:
        committed = []
        for name, temp_path in self._staged.items():
            target = self.path(name)
            os.replace(temp_path, target)
            committed.append(target)
            logger.debug(f"Wrote artifact {target}")
        self._staged.clear()
        return committed

    def discard(self) -> None:
        for temp_path in self._staged.values():
            try:
                os.unlink(temp_path)
            except FileNotFoundError:
                pass
        if self._staged:
            logger.warning(f"Discarded {len(self._staged)} partial artifact(s)")
        self._staged.clear()

    @property
    def names(self) -> List[str]:
        return sorted(self._staged)

    def digests(self) -> Dict[str, str]:
        """sha256 of every staged file, by artifact name"""
        return {name: sha256_file(self._staged[name]) for name in self.names}


class FileUtils:
    """File system utilities"""

    @staticmethod
    def read_text(path: str) -> str:
        """Read text from file"""
        with open(path, "r", encoding="utf-8") as f:
            return f.read()

    @staticmethod
    def read_json(path: str) -> Any:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)


class ConfigLoader:
    """Configuration loading utilities"""

    # flat environment keys -> (section, field); None section means top level
    ENV_KEYS = {
        "seed": (None, "seed"),
        "workdir": (None, "workdir"),
        "workers": (None, "workers"),
        "near_threshold": ("dedup", "near_threshold"),
        "tables": ("audit", "tables"),
        "bits": ("audit", "bits"),
        "k": ("audit", "k"),
        "flag_min_disagree": ("audit", "flag_min_disagree"),
        "learning_rate": ("train", "learning_rate"),
        "max_epochs": ("train", "max_epochs"),
        "batch_size": ("train", "batch_size"),
        "patience": ("train", "patience"),
        "linear_from": ("trend", "linear_from"),
    }

    @staticmethod
    def from_dict(
        config_dict: Dict[str, Any], defaults: Optional[Dict[str, Any]] = None
    ) -> Dict[str, Any]:
        """Merge config with defaults, one level deep for sections"""
        result = {
            key: (dict(value) if isinstance(value, dict) else value)
            for key, value in (defaults or {}).items()
        }
        for key, value in (config_dict or {}).items():
            if isinstance(value, dict) and isinstance(result.get(key), dict):
                result[key].update(value)
            else:
                result[key] = value
        return result

    @staticmethod
    def from_env(prefix: str = "EDCURATE_") -> Dict[str, Any]:
        """Load configuration overrides from environment variables"""
        config: Dict[str, Any] = {}
        for key, value in os.environ.items():
            if not key.startswith(prefix):
                continue
            config_key = key[len(prefix) :].lower()
            target = ConfigLoader.ENV_KEYS.get(config_key)
            if target is None:
                logger.warning(f"Ignoring unknown environment setting {key}")
                continue

            # Try to convert to appropriate type
            if value.lower() in ["true", "false"]:
                converted: Any = value.lower() == "true"
            elif value.isdigit():
                converted = int(value)
            else:
                try:
                    converted = float(value)
                except ValueError:
                    converted = value

            section, name = target
            if section is None:
                config[name] = converted
            else:
                config.setdefault(section, {})[name] = converted
        return config
