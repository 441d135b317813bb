"""Prompt-free volumetric segmentation built on a 2D-pretrained,
promptable encoder: parameter-efficient 3D adaptation, automatic prompt
generation, multi-layer mask decoding, and a full synthesize /
preprocess / train / infer / evaluate toolchain at desk scale."""

from .archive import CheckpointArchive
from .config import RunConfig, load_run_config
from .decoder import DecoderConfig, MaskDecoder3D, predict_labels
from .encoder import (
    EncoderConfig,
    ImageEncoder3D,
    apply_encoder_freeze,
    import_2d_checkpoint,
)
from .inference import SlidingWindowConfig, evaluate, sliding_window_infer
from .metrics import MetricsReport, dice_score, nsd_score
from .model import (
    Segmenter3D,
    build_model,
    count_params,
    load_model_checkpoint,
    param_partition,
    params_report,
    save_model_checkpoint,
)
from .phantoms import PhantomSpec, generate_phantom, generate_surrogate_2d_checkpoint
from .preprocessing import PRESETS, PreprocessConfig, clip_and_normalize, resample
from .prompts import APGConfig, AutoPromptGenerator
from .sampling import AugmentConfig, PatchSpec, augment, sample_patches
from .training import (
    FitResult,
    LossConfig,
    OptimConfig,
    apply_freeze_policy,
    fit,
    lr_at,
    seg_loss,
    select_best,
)
from .volumes import LabelMap, Volume, load_volume, save_volume

__version__ = "0.1.0"
