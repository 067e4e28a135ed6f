"""Few-shot fine-grained classification with adaptive receptive fields and
spatial-frequency feature fusion, built on a small numpy autograd core."""

from .arf import ArfConfig, ArfLayer, arf_apply, build_deformed_grid, discretize_scale, predict_scales
from .encoder import Encoder, EncoderConfig, build_encoder, encode
from .episodes import (Dataset, Episode, EpisodeStream, SyntheticSpec, generate_splits,
                       generate_synthetic_dataset, load_dataset, sample_episode, save_dataset)
from .errors import (ArfError, ConfigurationError, ContractViolation, DimensionError, EpisodeError,
                     FormatError, GradCheckError, TrainingError)
from .estimator import ArfSfrClassifier
from .fusion import FusionHead, fuse
from .gradcheck import finite_diff_check
from .model import FewShotModel, ModelConfig
from .similarity import MetricParams, classify, episode_distances, reconstruct
from .spectral import SpectralMask, apply_spectral_mask, dct2, idct2
from .tensor import Tensor, no_grad
from .trainer import (Checkpoint, Ensemble, EvalConfig, TrainConfig, ensemble_classify, evaluate,
                      lr_at, train)

__version__ = "0.1.0"
