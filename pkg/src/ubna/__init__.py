"""Unsupervised adaptation of batch-normalization statistics to new domains."""
from .adapt import (
    AdaptationSchedule,
    AdaptationTrace,
    FewShot,
    Offline,
    Online,
    Segment,
    adabn_recompute,
    momentum_at,
    online_clock_check,
    predict_with_batch_stats,
    schedule_for,
    sequential_adapt,
    ubna_adapt,
)
from .batchnorm import Adapt, BatchStats, BNLayerState, Eval, Train, bn_forward, bn_normalize, bn_set_stats
from .datagen import ArraySource, DomainDataset, DomainShift, apply_shift
from .metrics import ConfusionMatrix, confusion, evaluate_model, miou, pixel_accuracy
from .model import Architecture, Model, single_bn_model
from .modelio import load, save
from .pretrain import PretrainConfig, backward_pass, cross_entropy_loss, pretrain

__version__ = "0.1.0"
