from .ablation import AblationResult, run_ablation, suite_variants
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .evaluation import count_parameters, evaluate_supervised, evaluate_zero_shot
from .synthetic import DatasetSplits, build_splits, generate_synthetic_dataset
from .trainer import StepTracker, build_model, train

__all__ = [
    'AblationResult',
    'DatasetSplits',
    'ExperimentConfig',
    'StepTracker',
    'build_model',
    'build_splits',
    'count_parameters',
    'evaluate_supervised',
    'evaluate_zero_shot',
    'generate_synthetic_dataset',
    'load_checkpoint',
    'load_config',
    'run_ablation',
    'save_checkpoint',
    'suite_variants',
    'train',
]
