"""
Typed, lazily resolved settings.

A `BaseSettings` subclass declares its settings like a dataclass:

>>> class TrainSettings(BaseSettings):
...     lr: float = SettingsField(default_value=1e-2, **positive())
...     epochs: int = 30

Each public attribute becomes a `xosda.fields.SettingsField`. Values are resolved when
asked for, in this order:

1. A value set directly on the instance (`settings.lr = 0.1`, or `TrainSettings(lr=0.1)`).
2. A value set on a parent instance in the `xinject` dependency chain
   (ie: the instance that was current before a `with TrainSettings(...):` block).
3. The field's own retriever, then instance retrievers, then class default retrievers.
4. The field's default value.

The value is then converted to the field's type-hint and validated with the field's `check`.
"""
import enum
from typing import Dict, Any, Union, Iterable, List, Optional, TYPE_CHECKING

from xinject import Dependency, XContext
from xloop import xloop
from xsentinels import Default

from .fields import generate_setting_fields, SettingsField
from .errors import SettingsValueError

if TYPE_CHECKING:
    from .retrievers import SettingsRetrieverProtocol


RetrieverOrList = 'Union[SettingsRetrieverProtocol, Iterable[SettingsRetrieverProtocol]]'


class _SettingsMeta(type):
    """Represents the class-type of the `BaseSettings` class and subclasses.

    Creates the `SettingsField` objects for a new BaseSettings subclass when the class
    is created, merging in fields inherited from BaseSettings superclasses.
    """

    _setting_fields: Dict[str, SettingsField]
    _default_retrievers: 'List[SettingsRetrieverProtocol]'

    _setting_subclasses_in_mro: 'List[type]'
    """
    Includes self/cls plus all superclasses who are BaseSettings subclasses in __mro__
    (but not BaseSettings it's self); in the same order that they appear in __mro__.
    """

    def __new__(
        mcls,
        name,
        bases,
        attrs: Dict[str, Any],
        *,
        default_retrievers: RetrieverOrList = None,
        skip_field_generation: bool = False,
        **kwargs,
    ):
        """
        Args:
            default_retrievers: Used to retrieve values for a `SettingsField` if the field has
                no retriever of its own; passed in like so:
                `class MySettings(BaseSettings, default_retrievers=...)`
            skip_field_generation: Only used by `BaseSettings` its self.
        """
        attrs['_setting_subclasses_in_mro'] = []
        attrs['_default_retrievers'] = list(xloop(default_retrievers))

        if skip_field_generation:
            attrs['_setting_fields'] = {}
            return super().__new__(mcls, name, bases, attrs, **kwargs)  # noqa

        # We need the base-types in mro order before we create the class.
        types_in_mro = type(name, bases, {}, skip_field_generation=True).__mro__[1:]
        setting_subclasses_in_mro = [
            c for c in types_in_mro
            if isinstance(c, _SettingsMeta) and c is not BaseSettings
        ]
        attrs['_setting_subclasses_in_mro'] = setting_subclasses_in_mro

        parent_fields = {}
        for c in reversed(setting_subclasses_in_mro):
            parent_fields.update(c._setting_fields)

        setting_fields = generate_setting_fields(attrs, parent_fields)
        attrs["_setting_fields"] = setting_fields

        # Fields are looked up lazily via their SettingsField, not as class attributes.
        for k in setting_fields.keys():
            attrs.pop(k, None)

        cls = super().__new__(mcls, name, bases, attrs, **kwargs)
        cls._setting_subclasses_in_mro.insert(0, cls)

        for field in setting_fields.values():
            field.source_class = cls

        return cls

    @property
    def settings__default_retrievers(self) -> 'List[SettingsRetrieverProtocol]':
        """
        Default retrievers for this class and its subclasses; a list you can modify directly,
        ie: `RunSettings.settings__default_retrievers.append(my_retriever)`.
        """
        return self._default_retrievers

    def settings__field(self, key: str) -> Optional[SettingsField]:
        for c in self._setting_subclasses_in_mro:
            if field := c._setting_fields.get(key):
                return field
        return None

    def settings__fields(self) -> Dict[str, SettingsField]:
        """ Every field of this class, inherited ones included, in declaration order. """
        fields = {}
        for c in reversed(self._setting_subclasses_in_mro):
            fields.update(c._setting_fields)
        return fields

    def __setattr__(self, key: str, value: Any):
        """
        Setting a public attribute on the class changes that field's default value;
        creating new fields after the class exists is not supported.
        """
        if key.startswith("_"):
            return super().__setattr__(key, value)

        field = self.settings__field(key)
        if not field:
            raise AttributeError(
                f"Setting new fields on BaseSettings subclass unsupported, attempted to "
                f"set key ({key}) with value ({value})."
            )
        field.default_value = value


class BaseSettings(
    Dependency,
    metaclass=_SettingsMeta,
    default_retrievers=[],
    # BaseSettings has no fields; never use this option in a subclass.
    skip_field_generation=True
):
    """
    Base Settings class; see module docs for how values are resolved.

    Subclasses are `xinject` dependencies, so the current instance is available via
    `MySettings.grab()`, and `with MySettings(some_field=...):` temporarily activates a child
    instance whose unset fields fall back to the previously current instance.
    """

    _instance_retrievers: 'List[SettingsRetrieverProtocol]'

    def __init__(self, retrievers: RetrieverOrList = None, **kwargs):
        """
        Args:
            retrievers: populates `BaseSettings.settings__instance_retrievers`.
            **kwargs: initial values, set directly on the instance.
        """
        self._instance_retrievers = list(xloop(retrievers))
        for k, v in kwargs.items():
            if not type(self).settings__field(k):
                raise SettingsValueError(f"Unknown setting ({k}) for ({type(self).__name__}).")
            setattr(self, k, v)

    @property
    def settings__instance_retrievers(self) -> 'List[SettingsRetrieverProtocol]':
        """
        Retrievers consulted for this instance only, after a field's own retriever and before
        the class default-retrievers. Child instances in the dependency chain consult the
        parent's instance retrievers too.
        """
        return self._instance_retrievers

    def settings__snapshot(self) -> Dict[str, Any]:
        """ Every resolved field as plain JSON-friendly values (enums by value, tuples as lists). """
        snapshot = {}
        for key in type(self).settings__fields():
            value = getattr(self, key)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            elif value is not None and not isinstance(value, (bool, int, float, str)):
                value = str(value)
            snapshot[key] = value
        return snapshot

    def settings__validate(self):
        """ Resolve every field now, raising `SettingsValueError` for the first bad one. """
        for key in type(self).settings__fields():
            getattr(self, key)
        return self

    def __getattribute__(self, key):
        # Anything that starts with `_` or `settings__` is a normal python attribute.
        if key.startswith("_") or key.startswith("settings__"):
            return object.__getattribute__(self, key)

        cls = type(self)
        field = cls.settings__field(key)
        if not field:
            return object.__getattribute__(self, key)

        value = self.__dict__.get(key)
        if value is None:
            # See if any parent-setting-instances (not super/base classes) have a value.
            for parent_settings in XContext.grab().dependency_chain(cls):
                if parent_settings is self:
                    continue
                value = parent_settings.__dict__.get(key)
                if value is not None:
                    break

        return _resolve_field_value(settings=self, field=field, value=value)


def _resolve_field_value(settings: BaseSettings, field: SettingsField, value: Any):
    cls = type(settings)

    if value is None or value is Default:
        def self_and_parent_retrievers():
            yield from settings._instance_retrievers

            for parent_settings in XContext.grab().dependency_chain(cls):
                # skip self if we are in chain, already did it.
                if parent_settings is settings:
                    continue
                yield from parent_settings._instance_retrievers

            for parent_class in cls._setting_subclasses_in_mro:
                yield from parent_class._default_retrievers

        for retriever in xloop(field.retriever, self_and_parent_retrievers()):
            value = retriever(field=field, settings=settings)

            if value is Default:
                # Use whatever the default value is, don't look in other retrievers.
                value = None
                break

            if value is not None:
                break

    if value is None:
        value = field.default_value
        if callable(value) and not isinstance(value, (type, enum.Enum)):
            value = value()

    if value is None:
        if field.required:
            raise SettingsValueError(f"Missing value for setting ({field.name}) on ({cls.__name__}).")
        return None

    return field.check_value(field.convert_value(value))
