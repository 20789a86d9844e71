"""Signature-based stochastic volatility calibration toolkit.

Implied-volatility surfaces are calibrated two ways: a signature model in
which volatility is a linear functional of the truncated signature of a
time-augmented primary noise process, and a second-order closed-form
Heston expansion.  Synthetic Heston and rough Bergomi markets, Monte
Carlo pricing, and the comparison experiments tie the two together.
"""

from .calibration import (
    CalibrationConfig,
    CalibrationResult,
    LossEvaluator,
    calibrate,
    smile_calibrate,
    weights_inverse_vega,
)
from .heston_expansion import (
    ExpansionCalibrationError,
    ExpansionFit,
    SurfaceSlice,
    calibrate_asv,
    iv_atm_term,
    iv_long_atm,
    iv_short_maturity,
)
from .pricing import (
    InversionError,
    OptionQuote,
    bs_price,
    bs_vega,
    implied_vol,
    mc_call_price,
)
from .process_sim import (
    BrownianBatch,
    HestonParams,
    RoughBergomiParams,
    correlate,
    euler_cir,
    market_terminal_prices,
    rough_bergomi_vol,
    simulate_brownian,
    volterra_fbm,
)
from .sig_model import (
    FactorizationError,
    FeatureCache,
    PathFeatures,
    build_feature_cache,
    factor_neg_q,
    q_matrix,
    sig_stochastic_integral,
    sig_vol_path,
    terminal_price,
)
from .signature_engine import (
    SampledPath,
    SignatureStream,
    factorial_decay_profile,
    segment_exp,
    signature,
    signature_stream,
    time_augment,
)
from .tensor_algebra import (
    Labeling,
    TruncatedTensor,
    concat_product,
    group_like_defect,
    pair,
    shuffle_words,
)

__version__ = "0.1.0"
