"""Dual positive/negative prompt optimization for multi-label recognition over frozen encoders."""

from .asl import LossConfig, asl_loss
from .data import ClassCatalog, Dataset, ZslSplit, make_catalog, mask_labels, make_zsl_split, \
    restrict_labels_to_seen, synth_dataset
from .encoders import ToyEncoders
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import EvalMode, MetricsReport, evaluate
from .prompts import PromptBank, PromptConfig, init_prompts, load_checkpoint, save_checkpoint
from .scoring import ClassifierConfig
from .train import TrainConfig, TrainHistory, batch_loss, cosine_lr, loss_gradients, train

__version__ = "0.1.0"
