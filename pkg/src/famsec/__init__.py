"""Forgery-aware adapters with semantic-guided contrastive training for AI-generated image detection."""

__version__ = "0.1.0"

from .config import BankConfig, DataConfig, RunConfig, load_config
from .data import Batcher, ImageSet, SyntheticSpec, load_images, load_manifest, make_desk_corpus, make_synthetic
from .errors import (
    ConfigurationError,
    ContractViolation,
    FamsecError,
    IngestionError,
    LoadError,
    NumericDomainError,
    TrainingDivergence,
)
from .harness import EvalReport, evaluate, restore_run, run_experiment, run_sweep, sample_size_curve, tsne_plot
from .inference import ReferenceBank, Verdict, build_bank, classify, classify_batch, load_bank, save_bank
from .lora import FamConfig, inject, load_adapters, merged_copy, save_adapters
from .sec import TrainConfig, pair_labels, sec_loss, similarity_matrix, train
from .vit import TOY_SPEC, VIT_L14_SPEC, EncoderPair, EncoderSpec, build_encoder, embed
