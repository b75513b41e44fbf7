"""factorflow: joint generative modeling of equity return panels.

A factor-level conditional importance-weighted autoencoder models the
distribution of PCA-reduced factor returns; a per-stock conditional residual
normalizing flow models each stock's next-day return given those factors and
its own history.  Sampling, risk metrics (NLL, calibration, stylized facts),
GARCH / classical-factor baselines, and Sharpe-optimal portfolio construction
sit on top.
"""

__version__ = "0.1.0"

from .exceptions import DataError, FactorFlowError, NumericalError, ParameterError

__all__ = [
    "DataError",
    "FactorFlowError",
    "NumericalError",
    "ParameterError",
    "__version__",
]
