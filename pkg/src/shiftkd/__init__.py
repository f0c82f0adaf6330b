"""Domain-shift-aware dataset curation, mixing and feature-hint distillation."""
from .core import (ConfigError, DataError, DatasetManifest, Domain, ImageRecord, ManifestError, NumericError,
                   SeededRng, Split, build_manifest, filter_records, load_manifest, save_manifest)

__version__ = "0.1.0"
