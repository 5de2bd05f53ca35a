"""
Source-free open-set domain adaptation over feature vectors.

See `xosda.pipeline.run_adaptation` for the end-to-end entry point and `xosda.cli` for the
command line.
"""
from .settings import BaseSettings
from .fields import SettingsField
from .config import RunSettings, SynthSettings
from .errors import XosdaError
from .data import DatasetSplit, generate_synthetic, load_features, write_features
from .model import Model, build_model, load_checkpoint, save_checkpoint
from .pipeline import RunReport, run_adaptation, train_source_model
