"""Prototype-guided self-training for shifted-distribution classification.

A desk-scale laboratory: pseudo-label denoising against class prototypes,
teacher-student consistency between augmented views, and staged knowledge
distillation, all on synthetic source/target benchmarks with explicit,
finite-difference-checked gradients.
"""

from .config import StageConfig, expand_sweep, load_config, parse_config_text, stage_config
from .consistency import AugmentConfig, augment, consistency_step, soft_assignment
from .data import DomainSpec, HiddenLabels, generate, inject_boundary_noise, preset
from .denoise import (IGNORE, PseudoLabelStore, hard_label, modulation_weights,
                      rectified_labels, rectified_soft, rectify)
from .errors import DimensionError, SchemaError, StateError
from .losses import (LossWeights, ce_loss, kd_loss, kl_consistency, regularizer,
                     sce_loss, total_stage1_loss)
from .metrics import EvalReport, confusion_and_iou, confusion_matrix, evaluate, reveal
from .nn import EmaEncoder, Network, load_checkpoint, save_checkpoint, softmax
from .pipeline import (RunManifest, generate_boilerplate, run_distill_stage,
                       run_experiment, run_stage1, warmup)
from .prototypes import (PrototypeBank, batch_centroids, distances,
                         ema_update_prototypes, init_prototypes)
from .report import emit_plots

__version__ = "0.1.0"
