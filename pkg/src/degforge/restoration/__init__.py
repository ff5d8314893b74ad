from degforge.restoration.model import Restorer, RestorerConfig, decoder_conv_weight_count, parameter_count, restore
from degforge.restoration.training import (
    CurveRow,
    DuplicatePathError,
    TrainConfig,
    epoch_means,
    load_restorer,
    lr_at,
    mix_datasets,
    save_restorer,
    train_restorer,
    training_regimes,
    write_curve,
)

__all__ = [
    "CurveRow",
    "DuplicatePathError",
    "Restorer",
    "RestorerConfig",
    "TrainConfig",
    "decoder_conv_weight_count",
    "epoch_means",
    "load_restorer",
    "lr_at",
    "mix_datasets",
    "parameter_count",
    "restore",
    "save_restorer",
    "train_restorer",
    "training_regimes",
    "write_curve",
]
