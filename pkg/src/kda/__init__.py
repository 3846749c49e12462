"""Knowledge-aware distribution adaptation for audio-visual zero-shot learning."""

from .datahub import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import EvalResult, evaluate, harmonic_mean, predict
from .losses import align_loss, compute_margins, kaml_loss, kda_objective, w2_approx, w2_exact
from .model import ModelConfig, forward, init_model, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
