"""Run settings: plain-text key=value files with dot-path access."""

import copy
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from .. import __version__
from ..utils.files import atomic_write_text
from .errors import FormatError

THREADS_ENV = "RELWARD_THREADS"


class RunSettings:
    """Manages experiment settings with a defaults < file < overrides precedence."""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        """Initialize settings with default values.

        Args:
            config_file: Optional key=value file merged over the defaults.
        """
        self._defaults = self._get_default_settings()
        self._settings = copy.deepcopy(self._defaults)
        if config_file is not None:
            self.load(config_file)

    def _get_default_settings(self) -> Dict[str, Any]:
        """Get default settings."""
        return {
            "model": {
                "f": 80,
                "k": 129,
                "frame_len": 400,
                "hop": 160,
                "frames": 101,
                "keep": 21,
                "fmin": 60.0,
                "fmax": 7800.0,
                "sample_rate": 16000,
                "acoustic_hidden": 128,
                "mod_hidden": 32,
                "mod_maps": 40,
                "mod_kf": 5,
                "mod_kt": 5,
                "head_maps": 16,
                "head_kernel": 3,
                "head_fc1": 256,
                "head_fc2": 128,
                "classes": 8,
                "instance_norm_c": 1e-4,
                "batch_norm_c": 1e-4,
                "bn_momentum": 0.1,
                "norm_after_prune": False,
            },
            "train": {
                "variant": "A-R,M-R",
                "batch": 16,
                "epochs": 30,
                "lr": 1e-3,
                "freeze_filters": False,
            },
            "data": {
                "train": "",
                "eval": "",
                "snr": "inf,10",
                "noise": "white",
            },
            "grad": {
                "tol": 1e-4,
                "batch": 2,
                "max_entries": 24,
            },
            "run": {
                "seed": 0,
                "threads": 0,  # 0 means one worker per CPU
                "checkpoint": "",
            },
        }

    def load(self, config_file: Union[str, Path]) -> None:
        """Merge a key=value file over the current settings."""
        path = Path(config_file)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise FormatError(f"cannot read config file {path}: {e}") from e
        self._deep_update(self._settings, self._nest(self.parse_lines(text.splitlines(), source=str(path))))

    def parse_lines(self, lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, Any]]:
        """Parse ``section.key=value`` lines into typed (key, value) pairs."""
        pairs = []
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs.append((key, self._coerce(key, value, f"{source}:{lineno}")))
        return pairs

    def _coerce(self, key_path: str, value: Any, where: str = "<override>") -> Any:
        """Convert ``value`` to the type of the default stored at ``key_path``."""
        if key_path == "run.version":
            return str(value)
        default = self._lookup(self._defaults, key_path)
        if default is None or isinstance(default, dict):
            raise FormatError(f"{where}: unknown setting {key_path!r}")
        if not isinstance(value, str):
            return type(default)(value)
        try:
            if isinstance(default, bool):
                lowered = value.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            return type(default)(value)
        except ValueError as e:
            raise FormatError(f"{where}: bad value for {key_path}: {value!r}") from e

    def _nest(self, pairs: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
        nested: Dict[str, Any] = {}
        for key, value in pairs:
            ref = nested
            parts = key.split(".")
            for part in parts[:-1]:
                ref = ref.setdefault(part, {})
            ref[parts[-1]] = value
        return nested

    def _deep_update(self, base_dict: Dict[str, Any], update_dict: Dict[str, Any]) -> None:
        """Recursively update base_dict with values from update_dict."""
        for key, value in update_dict.items():
            if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
                self._deep_update(base_dict[key], value)
            else:
                base_dict[key] = value

    @staticmethod
    def _lookup(tree: Dict[str, Any], key_path: str) -> Any:
        value: Any = tree
        try:
            for key in key_path.split("."):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return None

    def get(self, key_path: str, default: Any = None) -> Any:
        """Get a setting value using dot notation (e.g., 'train.batch')."""
        value = self._lookup(self._settings, key_path)
        return default if value is None else value

    def set(self, key_path: str, value: Any) -> None:
        """Set a setting value using dot notation, coercing to the default's type."""
        value = self._coerce(key_path, value)
        keys = key_path.split(".")
        settings_ref = self._settings
        for key in keys[:-1]:
            settings_ref = settings_ref.setdefault(key, {})
        settings_ref[keys[-1]] = value

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Apply CLI flag values; ``None`` means the flag was not given."""
        for key_path, value in overrides.items():
            if value is not None:
                self.set(key_path, value)

    def section(self, name: str) -> Dict[str, Any]:
        """Get a copy of one settings section."""
        return copy.deepcopy(self._settings.get(name, {}))

    def get_threads(self) -> int:
        """Worker count: RELWARD_THREADS caps the configured value."""
        configured = int(self.get("run.threads", 0)) or (os.cpu_count() or 1)
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            try:
                return max(1, min(configured, int(env)))
            except ValueError as e:
                raise FormatError(f"{THREADS_ENV} must be an integer, got {env!r}") from e
        return max(1, configured)

    def flatten(self) -> Dict[str, Any]:
        """Get all settings as a flat ``section.key`` dictionary."""
        flat: Dict[str, Any] = {}

        def walk(prefix: str, node: Dict[str, Any]) -> None:
            for key, value in node.items():
                path = f"{prefix}.{key}" if prefix else key
                if isinstance(value, dict):
                    walk(path, value)
                else:
                    flat[path] = value

        walk("", self._settings)
        return flat

    def to_text(self) -> str:
        """Render the reproducibility record: sorted key=value lines plus the artifact version."""
        flat = self.flatten()
        flat["run.version"] = __version__
        lines = []
        for key in sorted(flat):
            value = flat[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        """Write the reproducibility record atomically."""
        return atomic_write_text(path, self.to_text())

    def reset_to_defaults(self) -> None:
        """Reset all settings to default values."""
        self._settings = copy.deepcopy(self._defaults)
