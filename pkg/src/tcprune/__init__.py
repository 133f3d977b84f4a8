"""Transfer channel pruning for unsupervised domain adaptation, in numpy."""
__version__ = "0.1.0"

from .autograd import ParameterStore, backward_pass, finite_diff_check, forward_pass
from .criterion import ScoreTable, rank_channels, transfer_scores
from .data import DomainPair, ShiftParams, generate_synthetic_domains
from .driver import METHODS, PruneConfig, run, train_base
from .errors import (ConfigError, DataError, FormatError, NumericError, StructuralError, TCPruneError,
                     TrainingError, UsageError)
from .graph import ChannelId, LayerSpec, ModelGraph
from .losses import MMDConfig, beta_schedule, mmd_loss
from .surgery import apply_surgery, plan_surgery, validate_structure
from .zoo import build_small_resnet, build_small_vgg, init_params, masked_forward
