from pathlib import Path
from typing import Callable, Dict, Any, Tuple

from xbool import bool_value


def to_bool(value):
    return bool_value(value)


def to_int_tuple(value) -> Tuple[int, ...]:
    # Strings come from `--set hidden_widths=64,64` or env-vars,
    # lists come from JSON config files.
    if isinstance(value, str):
        value = [v for v in value.replace(' ', '').split(',') if v]
    if isinstance(value, (int, float)):
        value = [value]
    result = []
    for v in value:
        as_float = float(v)
        if not as_float.is_integer():
            raise ValueError(f"Expected an integer, got ({v}).")
        result.append(int(as_float))
    return tuple(result)


def to_int(value):
    # JSON and `--set` can both hand us `64.0` or "64"; refuse to silently truncate.
    if isinstance(value, bool):
        raise ValueError(f"Expected an integer, got a boolean ({value}).")
    as_float = float(value)
    if not as_float.is_integer():
        raise ValueError(f"Expected an integer, got ({value}).")
    return int(as_float)


def to_float(value):
    if isinstance(value, bool):
        raise ValueError(f"Expected a number, got a boolean ({value}).")
    return float(value)


def to_path(value):
    return Path(value).expanduser()


DEFAULT_CONVERTERS: Dict[Any, Callable[[Any], Any]] = {
    bool: to_bool,
    int: to_int,
    float: to_float,
    Path: to_path,
    Tuple[int, ...]: to_int_tuple,
}
"""
Map of a basic type to it's default converter function;
used by settings to convert retrieved values into the type-hint of the field.
"""
