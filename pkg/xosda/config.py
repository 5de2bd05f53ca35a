"""
Every tunable of the pipeline, as `xosda.settings.BaseSettings` subclasses.

Defaults are decisions, not facts from the method description, except where noted:
the method gives no optimizer, schedule, bank size, history depth or temperatures.

>>> settings = RunSettings(retrievers=[JsonFileRetriever('run.json'), EnvVarRetriever()])
>>> with settings:
...     RunSettings.grab().batch_size
"""
import enum
from typing import Optional, Tuple

from .fields import SettingsField, positive, unit_interval
from .settings import BaseSettings


class WeightFn(enum.Enum):
    """ Monotonically decreasing map from an uncertainty to a selection probability. """
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


class Combiner(enum.Enum):
    AND = "and"
    OR = "or"


class ExclusionMode(enum.Enum):
    INTERSECTION = "intersection"
    """ Pair excluded when the two label histories share any label. """
    SAME_EPOCH = "same_epoch"
    """ Pair excluded when the two samples had the same label in the same epoch. """


class MatchingMode(enum.Enum):
    OPTIMAL = "optimal"
    GREEDY = "greedy"


class ContrastiveLoss(enum.Enum):
    NL_INFONCE = "nl_infonce"
    INFONCE = "infonce"


class DiscoveryMatching(enum.Enum):
    CONTINGENCY = "contingency"
    PROTOTYPE = "prototype"


class RunSettings(BaseSettings):
    seed: int = SettingsField(default_value=0, **positive(allow_zero=True))

    # Target-private classes; `None` means as many as there are shared classes.
    n_private: Optional[int] = SettingsField(**positive(allow_zero=True))

    # Network
    hidden_widths: Tuple[int, ...] = SettingsField(
        default_value=(64, 64), check=lambda v: all(w > 0 for w in v), check_doc="all > 0"
    )
    feature_dim: int = SettingsField(default_value=32, **positive())

    # Source pretraining
    source_epochs: int = SettingsField(default_value=200, **positive(allow_zero=True))
    source_lr: float = SettingsField(default_value=5e-2, **positive())

    # Clustering initialisation
    cluster_init: bool = True
    matching: MatchingMode = MatchingMode.OPTIMAL
    kmeans_max_iter: int = SettingsField(default_value=300, **positive())
    kmeans_tol: float = SettingsField(default_value=1e-6, **positive(allow_zero=True))
    tau2: float = SettingsField(default_value=0.25, **positive())
    # Rescale private prototypes to the mean source-prototype norm instead of using raw centroids.
    scale_private_prototypes: bool = False

    # Memory bank, neighbours and temporal queue
    bank_size: int = SettingsField(default_value=2048, **positive())
    n_neighbours: int = SettingsField(default_value=4, **positive())
    history_depth: int = SettingsField(default_value=5, **positive())
    exclusion: ExclusionMode = ExclusionMode.INTERSECTION
    key_queue_size: int = SettingsField(default_value=512, **positive())
    momentum: float = SettingsField(default_value=0.999, **unit_interval())

    # Sample selection
    weight_nc: WeightFn = WeightFn.EXPONENTIAL
    weight_cs: WeightFn = WeightFn.LINEAR
    combiner: Combiner = Combiner.AND
    use_nc_uncertainty: bool = True
    use_cs_uncertainty: bool = True

    # Losses
    contrastive_loss: ContrastiveLoss = ContrastiveLoss.NL_INFONCE
    contrastive_temperature: float = SettingsField(default_value=0.07, **positive())
    include_positive_in_denominator: bool = False
    gamma_cls: float = SettingsField(default_value=1.0, **positive(allow_zero=True))
    gamma_ctr: float = SettingsField(default_value=1.0, **positive(allow_zero=True))
    gamma_div: float = SettingsField(default_value=1.0, **positive(allow_zero=True))

    # Feature-space augmentations, relative to the input scale
    weak_noise: float = SettingsField(default_value=0.02, **positive(allow_zero=True))
    strong_noise: float = SettingsField(default_value=0.1, **positive(allow_zero=True))
    mask_prob: float = SettingsField(default_value=0.1, **unit_interval())

    # Optimisation
    lr: float = SettingsField(default_value=1e-2, **positive(allow_zero=True))
    weight_decay: float = SettingsField(default_value=1e-4, **positive(allow_zero=True))
    batch_size: int = SettingsField(default_value=64, **positive())
    adapt_epochs: int = SettingsField(default_value=30, **positive(allow_zero=True))

    # Evaluation and sweeps
    discovery_matching: DiscoveryMatching = DiscoveryMatching.CONTINGENCY
    sweep_seeds: int = SettingsField(default_value=3, **positive())

    def resolved_n_private(self, n_shared: int) -> int:
        n_private = self.n_private
        return n_shared if n_private is None else n_private


class SynthSettings(BaseSettings):
    """ Shape of the synthetic domain-shift benchmark; defaults are Office31-shaped (10 + 11). """

    n_shared: int = SettingsField(default_value=10, check=lambda v: v >= 2, check_doc=">= 2")
    n_private: int = SettingsField(default_value=11, **positive(allow_zero=True))
    input_dim: int = SettingsField(default_value=32, check=lambda v: v >= 2, check_doc=">= 2")
    samples_per_class: int = SettingsField(default_value=40, **positive())
    center_scale: float = SettingsField(default_value=4.0, **positive())
    within_std: float = SettingsField(default_value=0.5, **positive(allow_zero=True))
    rotation_deg: float = 30.0
    # Fraction of `center_scale`.
    translation: float = SettingsField(default_value=0.5, **positive(allow_zero=True))
    jitter_low: float = SettingsField(default_value=0.9, **positive())
    jitter_high: float = SettingsField(default_value=1.1, **positive())
    seed: int = SettingsField(default_value=0, **positive(allow_zero=True))
