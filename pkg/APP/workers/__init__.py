"""Training, inversion and editing pipelines for HyperInvert."""

from .editing import EditDirection, apply_edit, discover_directions_pca
from .inversion import InversionResult, compare_baselines, invert
from .trainer import load_run, run_experiment, train_hypernetwork

__all__ = [
    'EditDirection', 'apply_edit', 'discover_directions_pca',
    'InversionResult', 'compare_baselines', 'invert',
    'load_run', 'run_experiment', 'train_hypernetwork',
]
