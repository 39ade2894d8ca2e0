from .autodiff import (GradientError, ParamSet, backward_grad, check_finite, fd_check,
                       finite_diff_check, forward_eval, init_params, param_count, params_of)
from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .nets import ArchSpec, build_net
from .optim import OptimState, adam_init, adam_step
from .train import TrainingDiverged, TrainSettings, train_loop

__all__ = [
    "ArchSpec", "CheckpointError", "GradientError", "OptimState", "ParamSet", "adam_init",
    "adam_step", "backward_grad", "build_net", "check_finite", "fd_check", "file_hash",
    "finite_diff_check", "forward_eval", "init_params", "load_checkpoint", "param_count",
    "params_of", "save_checkpoint", "TrainSettings", "TrainingDiverged", "train_loop",
]
