from .features import FeatureMap, PatchPyramidExtractor
from .fit import FitConfig, FitResult, FitView, LossWeights, fit, write_trace_csv
from .losses import (kl_consistency_loss, mse_loss, nnfm_3d_loss, nnfm_loss,
                     psnr, semantic_ce_loss)
from .neighbors import knn
from .optim import AdamState, adam_step, default_lr_table, migrate_state

__all__ = [
    "AdamState", "FeatureMap", "FitConfig", "FitResult", "FitView",
    "LossWeights", "PatchPyramidExtractor", "adam_step", "default_lr_table",
    "fit", "kl_consistency_loss", "knn", "migrate_state", "mse_loss",
    "nnfm_3d_loss", "nnfm_loss", "psnr", "semantic_ce_loss", "write_trace_csv",
]
