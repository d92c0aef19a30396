"""Receptive-field position effects in convolutional networks.

Gradient-injection activation maximisation, receptive-field geometry and
consistency metrics on a small numpy convolutional network.
"""
from .analyzer import (SpecificityReport, cross_position_divergence, equivariance_check,
                       specificity_report, within_position_dispersion)
from .dreamer import (DreamConfig, DreamOutcome, batch_outcomes, dream_step, visualize_node,
                      visualize_tiled)
from .estimators import ActivationMaximizer, ConvNetClassifier
from .exceptions import (FormatError, NonFiniteError, NotApplicableError, ParameterError,
                         RfDreamError, ShapeError, StalledError)
from .netgraph import (Injection, LayerSpec, ModelGraph, NodeRef, backward_injected, build,
                       forward, load_model, loss_and_grads, save_model, sgd_step)
from .rfgeom import RfParams, RfRect, compose_rf, coverage_stats, empirical_rf_oracle, rf_rect
from .tensor import Rect, SplitMix64, randn_tensor, rms_distance, rng_next, spatial_shift

__version__ = "0.1.0"
