"""Adversarial multi-task CTC speech recognition on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor
from .ctc import LabelSequence, beam_decode, ctc_loss, greedy_decode, train_ngram
from .models import Model, ModelConfig, ModelKind, load_checkpoint, save_checkpoint, transfer_shared
from .synth import SynthConfig, compute_cmi, generate_corpus
from .trainer import TrainConfig, run_experiment_suite, train
from .evaluator import run_probe, score_model

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "LabelSequence", "beam_decode", "ctc_loss", "greedy_decode", "train_ngram",
    "Model", "ModelConfig", "ModelKind", "load_checkpoint", "save_checkpoint", "transfer_shared",
    "SynthConfig", "compute_cmi", "generate_corpus", "TrainConfig", "run_experiment_suite", "train",
    "run_probe", "score_model", "__version__",
]
