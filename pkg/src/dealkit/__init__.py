"""Depth-edge alignment losses for weakly supervised segmentation, on a small numpy autodiff engine."""
from .autograd import Tensor, backward, finite_diff_check, grad_of, trace
from .dataio import Scene, SynthConfig, generate_dataset, generate_scene
from .evaluation import EvalReport, aggregate_seeds, threshold_sweep
from .imageops import bicubic_resize, minmax_normalize, sobel_magnitude
from .losses import LabeledCam, LossConfig, combine_losses, deal_loss, fsl_loss, isl_loss, mlsm_loss
from .trainer import ToyModel, TrainConfig, forward_cam, run_experiment, train_step

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_check", "grad_of", "trace",
    "Scene", "SynthConfig", "generate_dataset", "generate_scene",
    "EvalReport", "aggregate_seeds", "threshold_sweep",
    "bicubic_resize", "minmax_normalize", "sobel_magnitude",
    "LabeledCam", "LossConfig", "combine_losses", "deal_loss", "fsl_loss", "isl_loss", "mlsm_loss",
    "ToyModel", "TrainConfig", "forward_cam", "run_experiment", "train_step",
]
