"""freqsgd: frequency-adaptive sparse SGD for embedding models.

Sparse two-token losses, exact small-instance variance/unbiasedness
diagnostics, per-token step-size schedules (frequency-aware and its
counter-estimated variant), adaptive baselines, and a reproducible
experiment harness with delimited outputs and rendered figures.
"""

__version__ = "0.1.0"

from .harness import (ExperimentConfig, auc, logloss, planted_joint,
                      run_experiment, tail_speedup_experiment)
from .models import (EmbeddingTable, Example, FmParams, SparseGradient, fm_grad,
                     fm_predict, grad_pair, init_embedding_table, loss_dot,
                     pair_gradient, population_gradient, population_objective,
                     smoothness_bound, softplus)
from .optimizers import (KINDS, OptimizerState, ScheduleSpec, apply_sparse_step, cf_rate,
                         fa_rate, make_optimizer_state, run_pairwise, run_pairwise_many,
                         select_output_iterate, sgd_rate, theoretical_alpha)
from .theory import (SpeedupReport, VarianceReport, block_smoothness, check_unbiasedness,
                     improvement_ratio, moment_frequency_correlation, tail_speedup_bound,
                     tail_top_size, variance_report)
from .tokenspace import (AliasSampler, JointDistribution, TokenCounter, TokenDistribution,
                         counter_update, make_exp_tail, make_poly_tail, make_product_joint,
                         make_uniform, sample_pair, sample_pairs, top_set)

__all__ = [
    "AliasSampler", "EmbeddingTable", "Example", "ExperimentConfig", "FmParams",
    "JointDistribution", "KINDS", "OptimizerState", "ScheduleSpec", "SparseGradient",
    "SpeedupReport", "TokenCounter", "TokenDistribution", "VarianceReport",
    "apply_sparse_step", "auc", "block_smoothness", "cf_rate", "check_unbiasedness",
    "counter_update", "fa_rate", "fm_grad", "fm_predict", "grad_pair",
    "improvement_ratio", "init_embedding_table", "logloss", "softplus",
    "loss_dot", "make_exp_tail", "make_optimizer_state", "make_poly_tail",
    "make_product_joint", "make_uniform", "moment_frequency_correlation",
    "pair_gradient", "planted_joint", "population_gradient", "population_objective",
    "run_experiment", "run_pairwise", "run_pairwise_many", "sample_pair",
    "sample_pairs", "select_output_iterate", "sgd_rate", "smoothness_bound",
    "tail_speedup_bound", "tail_speedup_experiment", "tail_top_size",
    "theoretical_alpha", "top_set", "variance_report", "__version__",
]
