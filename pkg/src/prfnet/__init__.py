"""Pairwise full-reference image quality assessment with a numpy autodiff core."""

from .backbone import Backbone, BackboneConfig, FeaturePyramid, extract_pyramid, extract_triplet
from .baselines import baseline_accuracy, baseline_decide, ms_ssim, psnr, ssim
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import (
    DistortionSpec,
    ImageTriplet,
    TripletDataset,
    apply_distortion,
    generate_synthetic_dataset,
    load_image,
    random_crop,
    save_image,
)
from .gradcheck import grad_check, run_gradcheck
from .model import ModelConfig, PRFNet, score_triplet
from .tensor import NonFiniteError, Parameter, Tape, TapeError, Tensor, backward, precision
from .trainer import (
    TrainConfig,
    TrainRecord,
    bce_loss,
    evaluate_accuracy,
    lr_schedule,
    mse_loss,
    sgd_step,
    train_stage,
)

__version__ = "0.1.0"
