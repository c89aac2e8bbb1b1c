"""
Few-shot image classification with a meta-learned initialization for l2l-pcm.
"""

from l2l_pcm.maml.cnn import (
    CnnParams,
    CrossbarCnn,
    build_features,
    delta_update,
    init_cnn,
)
from l2l_pcm.maml.data import (
    Episode,
    GlyphDataset,
    load_omniglot,
    prepare_splits,
    sample_task,
    synthetic_glyphs,
)
from l2l_pcm.maml.learner import (
    AccuracyTable,
    MetaTrainResult,
    build_episode_tape,
    evaluate,
    inner_adapt,
    load_maml_checkpoint,
    meta_train,
    outer_step,
    save_maml_checkpoint,
)

__all__ = [
    "CnnParams",
    "CrossbarCnn",
    "build_features",
    "delta_update",
    "init_cnn",
    "Episode",
    "GlyphDataset",
    "load_omniglot",
    "prepare_splits",
    "sample_task",
    "synthetic_glyphs",
    "AccuracyTable",
    "MetaTrainResult",
    "build_episode_tape",
    "evaluate",
    "inner_adapt",
    "load_maml_checkpoint",
    "meta_train",
    "outer_step",
    "save_maml_checkpoint",
]
