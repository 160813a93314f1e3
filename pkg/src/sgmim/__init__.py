"""Structure-guided masked image modeling: a desk-scale, trainable implementation."""
from .analysis import DepthMetrics, SpectrumProfile, delta1, delta_log_amplitude, log_amplitude_profile, probe_depth, rmse
from .config import JobSettings, ProbeConfig, TrainConfig
from .errors import ConfigurationError, DomainError, GeometryError, IntegrityError
from .model import SGMIM, ModelConfig
from .numerics import NumericError, grad_check
from .objective import LossWeights
from .patch_mask import PatchGrid, sample_mask_pair
from .synthdata import SceneConfig, generate_scene
from .trainer import export_encoder, load_checkpoint, pretrain, save_checkpoint

__version__ = "0.1.0"
