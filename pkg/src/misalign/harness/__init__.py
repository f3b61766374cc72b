"""Synthetic dataset, toy pretraining protocols, downstream heads and
metrics: the substrate the transfer experiments run on."""

from .dataset import DatasetSpec, Sample, gen_dataset, gen_sample
from .pretrain import (
    PretrainResult,
    classification_pretrain,
    contrastive_pretrain,
    init_label_table,
)
from .heads import DownstreamModel, make_zero_shot, train_linear_head, train_seg_head, zero_shot_classify
from .metrics import AdversarialBatch, MetricsRecord, evaluate, miou

__all__ = [
    "DatasetSpec",
    "Sample",
    "gen_dataset",
    "gen_sample",
    "PretrainResult",
    "init_label_table",
    "contrastive_pretrain",
    "classification_pretrain",
    "DownstreamModel",
    "train_linear_head",
    "train_seg_head",
    "make_zero_shot",
    "zero_shot_classify",
    "AdversarialBatch",
    "MetricsRecord",
    "evaluate",
    "miou",
]
