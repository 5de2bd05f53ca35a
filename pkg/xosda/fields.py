import dataclasses
import typing
from copy import copy
from typing import Callable, Type, Any, Dict, TYPE_CHECKING

from xsentinels import unwrap_union, Default

from .default_converters import DEFAULT_CONVERTERS
from .errors import SettingsConversionError, SettingsValueError

try:
    import annotationlib
except ImportError:
    annotationlib = None

if TYPE_CHECKING:
    from .settings import BaseSettings
    from .retrievers import SettingsRetrieverProtocol


@dataclasses.dataclass
class SettingsField:
    name: str = None
    """ Defaults to the attribute name; retrievers use this name to look the value up
        (ie: `XOSDA_<NAME>` for env-vars, the key in a JSON config file, `--set name=...`).
    """

    source_class: 'Type[BaseSettings]' = None
    """
    For debug purposes only. Set when the class level SettingsField is created.

    It's positioned just after `name` so it's printed earlier in a log-line.
    """

    source_name: str = None
    """ For debug purposes only; attribute name on the settings class where it originated. """

    required: bool = None
    """
    By default settings are required, if a None would be returned we instead raise an exception.

    Left as None in the dataclass so we can detect if it was set explicitly; when fields are
    finalized an `Optional[...]` type-hint means `required = False`, otherwise `True`.
    """

    converter: Callable = None
    """ Used to convert retrieved values into `type_hint`. Only called when the retrieved
        value is not already an instance of `type_hint`.
    """

    type_hint: Type = None
    """ Taken from the class annotation, or from `type(default_value)` when there is none. """

    retriever: 'SettingsRetrieverProtocol' = None
    """
    Retriever tried first for this field, before instance and class-default retrievers.
    Can be any callable that follows `xosda.retrievers.SettingsRetrieverProtocol`.
    """

    default_value: Any = None
    """ Last-resort value used when nothing is set and no retriever produced a value.
        A callable default is called to produce the value.
    """

    check: Callable[[Any], bool] = None
    """ Predicate run on the converted value; a falsy result raises `SettingsValueError`. """

    check_doc: str = None
    """ Human readable form of `check`, used in error messages (ie: "> 0"). """

    def merge(self, override: "SettingsField"):
        if not override:
            return

        if override.required is not None:
            self.required = override.required
        if override.name:
            self.name = override.name
        if override.converter:
            self.converter = override.converter
        if override.type_hint:
            self.type_hint = override.type_hint
        if override.retriever:
            self.retriever = override.retriever
        if override.check:
            self.check = override.check
            self.check_doc = override.check_doc

        if override.default_value is not None:
            # Copy default value in case it's a mutable object, like a dict.
            self.default_value = copy(override.default_value)
        return self

    def convert_value(self, value):
        """
        To find a converter, we check these in order, first one found is what we use:

        1. `self.converter`.
        2. `xosda.default_converters.DEFAULT_CONVERTERS`.
        3. The type-hint its self (ie: `int(value)`, or `MyEnum(value)`).

        Conversion is skipped for `None` and for values already of the type-hint.
        """
        original_value = value
        converter = self.converter or DEFAULT_CONVERTERS.get(self.type_hint) or self.type_hint

        if value is Default:
            value = None

        if converter and value is not None:
            hint = self._get_base_typehint()
            if not hint or not isinstance(value, hint):
                try:
                    value = converter(value)
                except Exception as e:
                    raise SettingsConversionError(
                        f'While attempting to convert value ({original_value!r}) '
                        f'for setting ({self.name}); we got an error ({e}).'
                    ) from e

        if value is None and original_value not in (None, Default) and self.required:
            raise SettingsConversionError(
                f'After converting value ({original_value!r}) we got back a `None` value '
                f'for a required setting ({self.name}).'
            )
        return value

    def check_value(self, value):
        if value is None or not self.check:
            return value
        if not self.check(value):
            raise SettingsValueError(
                f"Invalid value ({value!r}) for setting ({self.name}); "
                f"must be {self.check_doc or 'valid'}."
            )
        return value

    def _get_base_typehint(self):
        hint = self.type_hint
        if not hint:
            return None
        return typing.get_origin(hint) or hint


def positive(*, allow_zero=False) -> Dict[str, Any]:
    """ Keyword arguments for a `SettingsField` that must hold a positive number. """
    if allow_zero:
        return dict(check=lambda v: v >= 0, check_doc=">= 0")
    return dict(check=lambda v: v > 0, check_doc="> 0")


def unit_interval() -> Dict[str, Any]:
    return dict(check=lambda v: 0 <= v <= 1, check_doc="within [0, 1]")


def _allowed_field(k: str, v):
    # For private attributes, don't make fields.
    if k.startswith("_"):
        return False

    # Properties stay plain properties; they derive values from other fields.
    if isinstance(v, (property, staticmethod, classmethod)):
        return False

    # For normal methods/callables, don't generate a field.
    return not callable(v) or isinstance(v, SettingsField)


def _class_annotations(attrs) -> Dict[str, Any]:
    if annotationlib:
        # Python 3.14+: annotations are produced lazily by an annotate function.
        annotate_func = annotationlib.get_annotate_from_class_namespace(attrs)
        if annotate_func:
            return annotationlib.call_annotate_function(
                annotate_func, format=annotationlib.Format.VALUE
            )
        return {}
    return attrs.get("__annotations__", {}) or {}


def generate_setting_fields(
        attrs, parent_fields: Dict[str, SettingsField] = None
) -> Dict[str, SettingsField]:
    """
    Takes a dict of class attributes and returns a dict of SettingsField.

    Ignores private attributes (starting with '_'), properties and callables.
    Uses the class annotations to provide type hints.

    Every returned field has `name`, `required`, `type_hint` and `source_name` set.
    Fields re-declared on a subclass are merged on top of the parent's field.
    """
    parent_fields = parent_fields or {}
    annotations = _class_annotations(attrs)

    values = {k: v for k, v in attrs.items() if _allowed_field(k, v)}
    names = list(values.keys())
    names.extend(k for k in annotations if not k.startswith("_") and k not in attrs)

    setting_fields: Dict[str, SettingsField] = {}
    for key in names:
        field = SettingsField(name=key, source_name=key)
        if parent := parent_fields.get(key):
            field.merge(parent)

        if key in annotations:
            # A re-annotated field decides `required` from its own (possibly Optional) hint.
            field.type_hint = annotations[key]
            field.required = None

        value = values.get(key)
        if isinstance(value, SettingsField):
            field.merge(value)
        elif value is not None:
            field.default_value = value
            if key not in annotations:
                field.type_hint = type(value)

        _finalize_field(field)
        setting_fields[key] = field

    return setting_fields


def _finalize_field(field: SettingsField):
    if field.retriever is not None:
        assert callable(field.retriever), (
            f"Invalid retriever for field {field}, needs to be callable, see "
            f"SettingsRetrieverProtocol."
        )

    if field.type_hint is None and field.default_value is not None:
        field.type_hint = type(field.default_value)

    if field.type_hint in (None, Any, type(None)):
        raise AssertionError(
            f"Must have type-hint for field ({field}). "
            f"Add an annotation (`some_field: int`) or a non-None default value."
        )

    unwrapped_results = unwrap_union(field.type_hint)
    field.type_hint = unwrapped_results.unwrapped_type

    if field.required is None:
        field.required = not unwrapped_results.is_optional
