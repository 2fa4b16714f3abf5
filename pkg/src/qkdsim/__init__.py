"""Key-rate engine for decoy-state BB84, MDI-QKD and TF-QKD.

Computes secure key rates under loss, dark counts, misalignment, finite
data, channel asymmetry and atmospheric turbulence; optimizes the
user-controllable intensities and probabilities; and trains a neural-network
surrogate that predicts near-optimal parameters in milliseconds.
"""

from .bb84 import (
    Bb84Params,
    critical_eta_decoy,
    critical_eta_single_photon,
    finite_size_bb84_rate,
    gllp_rate,
)
from .core import (
    ChannelSpec,
    ConfidenceBound,
    ExperimentParams,
    KeyRateResult,
    binary_entropy,
    gamma_from_epsilon,
    poisson_pn,
    stderr_bounds,
)
from .mdi import MdiParams, mdi_key_rate
from .tfqkd import TfParams, plob_bound, tf_key_rate
from .turbulence import Pdtc, SelectionDomain, rate_wise_rate, simplified_rate

__version__ = "0.1.0"

__all__ = [
    "Bb84Params",
    "ChannelSpec",
    "ConfidenceBound",
    "ExperimentParams",
    "KeyRateResult",
    "MdiParams",
    "Pdtc",
    "SelectionDomain",
    "TfParams",
    "binary_entropy",
    "critical_eta_decoy",
    "critical_eta_single_photon",
    "finite_size_bb84_rate",
    "gamma_from_epsilon",
    "gllp_rate",
    "mdi_key_rate",
    "plob_bound",
    "poisson_pn",
    "rate_wise_rate",
    "simplified_rate",
    "stderr_bounds",
    "tf_key_rate",
    "__version__",
]
