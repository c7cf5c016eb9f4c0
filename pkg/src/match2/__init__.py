"""Duplicate-question matching that compares how two questions match an answer."""

from .autograd import Tensor, backward, no_grad, precision
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainingConfig, load_config
from .encoder import EncoderConfig, StackedEncoder
from .errors import Match2Error
from .model import Match2, Match2Config, ablation_model
from .text import DatasetRecord, Vocabulary, build_vocab, load_answer_pool, load_dataset
from .trainer import Trainer, predict

__version__ = "0.1.0"
