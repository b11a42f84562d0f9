"""memse: analytic MSE and power prediction for DNN inference on noisy,
quantized memristor crossbars, with a Monte-Carlo oracle and a conductance-
range optimizer."""

from .crossbar import ConductancePair, CrossbarConfig, map_and_quantize, sample_conductances, split_weights
from .errors import FormatError, InfeasibleError, MemseError, NumericError
from .moments import (
    LayerMoments,
    MomentState,
    MseSummary,
    PredictResult,
    activation_moments,
    linear_moments,
    mse,
    mse_poly_coeffs,
    pool_moments,
    predict_network,
    prepare_network,
)
from .montecarlo import AccuracyResult, McEstimate, TrialPlan, accuracy, estimate, noisy_forward
from .netmodel import (
    ActivationSpec,
    AvgPoolSpec,
    ConvSpec,
    LinearSpec,
    LoweredNetwork,
    NetworkSpec,
    lower,
    parse_inputs,
    parse_network,
    reference_forward,
    write_inputs,
    write_network,
)
from .optimizer import GaParams, OptProblem, OptResult, objective, optimize
from .power import PowerBreakdown, layer_power, network_power, power_poly

__version__ = "0.1.0"
