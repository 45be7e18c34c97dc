"""refseg: referring-expression segmentation with stage-interleaved
vision/language encoders, built from scratch on numpy.

The library provides the full model (bidirectional per-stage cross-attention
fusion, per-stage text-to-pixel contrastive alignment, convolutional mask
decoder), a deterministic synthetic scene generator for desk-scale training,
segmentation metrics, and a reproducible training/ablation harness with
binary checkpoints and a CLI (`refseg --help`).

All math runs in float64 on a small reverse-mode autodiff core
(`refseg.autodiff`), which is what makes the finite-difference gradient
checks in the test suite meaningful.
"""

from .config import ModelConfig, validate_config
from .params import init_params, build_manifest, Params
from .pipeline import forward_pipeline, compute_losses, LossReport
from .train import TrainConfig, train, evaluate_model, poly_lr
from .metrics import evaluate, iou, pr_curve, EvalReport
from .synthdata import (Scene, generate_dataset, split_dataset, tokenize,
                        build_vocab, save_dataset, load_dataset)
from .checkpoint import save_checkpoint, load_checkpoint
from .ablation import run_ablation_suite, acceptance_grid

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "validate_config", "init_params", "build_manifest", "Params",
    "forward_pipeline", "compute_losses", "LossReport",
    "TrainConfig", "train", "evaluate_model", "poly_lr",
    "evaluate", "iou", "pr_curve", "EvalReport",
    "Scene", "generate_dataset", "split_dataset", "tokenize", "build_vocab",
    "save_dataset", "load_dataset",
    "save_checkpoint", "load_checkpoint",
    "run_ablation_suite", "acceptance_grid",
    "__version__",
]
