from .config import ModelConfig, TeacherConfig, TrainConfig, load_config, save_config
from .evaluate import EvalResult, evaluate, evaluate_predictions
from .synth import SyntheticDomainSpec, SyntheticTeacher, generate_synthetic_dataset
from .train import TrainResult, train, train_linear_probe
