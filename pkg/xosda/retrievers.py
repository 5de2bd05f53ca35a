import json
import os
from pathlib import Path
from typing import Any, Protocol, Iterable, Dict, Collection

from .errors import ConfigError
from .fields import SettingsField
from .settings import BaseSettings

# Tell pdoc3 to document the normally private method __call__.
__pdoc__ = {
    "SettingsRetrieverProtocol.__call__": True,
}


class SettingsRetrieverProtocol(Protocol):
    """
    Interface for retrieving settings values from somewhere.

    A retriever can be any callable; set one per-field via `SettingsField.retriever`,
    per-instance via `BaseSettings.settings__instance_retrievers` or per-class via
    `class MySettings(BaseSettings, default_retrievers=...)`.

    Retrievers are tried in that order; the first non-None value wins. Returning
    `xsentinels.Default` skips the remaining retrievers and uses the field's default.
    """

    def __call__(self, *, field: SettingsField, settings: BaseSettings) -> Any:
        """
        Args:
            field: Field we need to retrieve.
            settings: Related BaseSettings object that has the field we are retrieving.

        Returns: Retrieved value, or None if no value can be found.
        """
        raise NotImplementedError(
            "Abstract Method - Must implement `__call__` function with correct arguments."
        )


def _check_known_keys(keys: Iterable[str], settings_class, *, allowed_extra: Collection[str], origin):
    known = set(settings_class.settings__fields()) | set(allowed_extra)
    for key in keys:
        if key not in known:
            raise ConfigError(f"Unknown setting ({key}) in {origin}.")


class EnvVarRetriever(SettingsRetrieverProtocol):
    """ Looks for `<prefix><NAME>` in `os.environ`, ie: `XOSDA_BATCH_SIZE`. """

    def __init__(self, prefix: str = "XOSDA_"):
        self.prefix = prefix

    def __call__(self, *, field: SettingsField, settings: BaseSettings) -> Any:
        return os.environ.get(f"{self.prefix}{field.name.upper()}")


class JsonFileRetriever(SettingsRetrieverProtocol):
    """
    Retrieves values from the top-level keys of a JSON object.

    Nested objects named in `sections` are left alone for other settings classes
    (see `JsonFileRetriever.section`).
    """

    def __init__(self, path, *, settings_class=None, sections: Collection[str] = ()):
        self.path = Path(path)
        self.values = self._load(self.path)
        if settings_class is not None:
            _check_known_keys(
                self.values, settings_class, allowed_extra=sections, origin=f"config ({self.path})"
            )
        for name in sections:
            if not isinstance(self.values.get(name, {}), dict):
                raise ConfigError(f"Section ({name}) in config ({self.path}) must be a JSON object.")

    @staticmethod
    def _load(path: Path) -> Dict[str, Any]:
        try:
            values = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"Unable to read config ({path}): {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in config ({path}): {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"Config ({path}) must contain a JSON object.")
        return values

    def section(self, name: str, *, settings_class=None) -> "DictRetriever":
        values = self.values.get(name, {})
        if settings_class is not None:
            _check_known_keys(
                values, settings_class, allowed_extra=(), origin=f"section ({name}) of ({self.path})"
            )
        return DictRetriever(values)

    def __call__(self, *, field: SettingsField, settings: BaseSettings) -> Any:
        return self.values.get(field.name)


class DictRetriever(SettingsRetrieverProtocol):
    def __init__(self, values: Dict[str, Any]):
        self.values = dict(values)

    def __call__(self, *, field: SettingsField, settings: BaseSettings) -> Any:
        return self.values.get(field.name)


class OverridesRetriever(DictRetriever):
    """ Values from command-line `--set key=value` pairs; converted by the field later. """

    def __init__(self, pairs: Iterable[str], *, settings_class=None):
        values = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"Override ({pair}) must look like `key=value`.")
            values[key] = value.strip()
        if settings_class is not None:
            _check_known_keys(values, settings_class, allowed_extra=(), origin="--set overrides")
        super().__init__(values)
