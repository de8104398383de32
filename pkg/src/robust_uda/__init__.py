"""Distributionally robust self-training for single-source domain adaptation on fixed embeddings."""
from .conditionals import ConditionalEnsemble, LogisticModel, fit_ensemble, fit_logistic, soft_pseudo_label
from .dataset import (
    LabeledSet,
    PseudoSourcePlan,
    SynthSpec,
    UnlabeledSet,
    make_pseudo_sources,
    spurious_benchmark,
    synth_generate,
)
from .numeric import cross_entropy, project_ball, project_simplex, project_simplex_ball, softmax
from .selection import GridSpec, SweepResult, grid_search, lodo_cv, select_k, sweep_heatmap
from .trainer import AmbiguityConfig, LinearClassifier, TrainConfig, evaluate, self_train, surrogate_value, train

__version__ = "0.1.0"
