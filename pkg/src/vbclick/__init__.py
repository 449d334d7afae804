"""Click models with a per-document vision bias, fitted by EM.

The browsing models (PBM, UBM) get an extra per-document probability that a
result is noticed through its visual appeal alone. Parameters are fitted with
standard EM or with a regression variant where an MLP predicts the vision bias
from document features, which lets rarely seen documents share strength.
"""

from .clicklog import Dataset, FeatureTable, Impression, Session, load_features, load_sessions
from .em import EmConfig, EmTrace, e_step, m_step, run_em
from .models import ModelKind, ParamStore, load_params, save_params
from .regem import Mlp, MlpTrainConfig, run_regression_em

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EmConfig", "EmTrace", "FeatureTable", "Impression", "Mlp", "MlpTrainConfig",
    "ModelKind", "ParamStore", "Session", "e_step", "load_features", "load_params",
    "load_sessions", "m_step", "run_em", "run_regression_em", "save_params",
]
