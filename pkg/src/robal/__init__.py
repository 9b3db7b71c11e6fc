"""Robustness evaluation and balanced adversarial training for long-tailed data, in numpy."""

__version__ = "0.1.0"

from robal.attacks import AttackBudget, PerturbResult, ensemble_eval, fgsm, mim, pgd, run_attack
from robal.data import (ImbalanceProfile, LabeledDataset, class_aware_batches, load_binary,
                        make_longtail_counts, make_small_balanced, save_binary, synth_gaussians)
from robal.evaluate import (EvalReport, KappaSweep, direction_averaging_check, evaluate,
                            feature_norm_stats, kappa_sweep, weight_norm_profile)
from robal.heads import (ClassStats, CosineHead, LinearHead, MarginSpec, PostHocRule,
                         posthoc_logits, robal_loss, robal_margin_matrix, robal_total_loss)
from robal.models import Classifier, Network
from robal.trainer import (ATConfig, Checkpoint, LossSpec, finetune_one_epoch, load_checkpoint,
                           save_checkpoint, train)
