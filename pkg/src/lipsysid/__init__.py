"""Neural system identification with Lipschitz-bounded networks and certified error bounds."""
from ._accel import NUMBA_ENABLED
from .dataset import Dataset, load_dataset, save_dataset
from .networks import (
    AffineNormalizer,
    LipschitzNet,
    MlpBaseline,
    fit_normalizer,
    init_lipschitz_net,
    init_mlp,
    load_model,
    save_model,
)
from .training import TrainConfig, TrainReport, train, train_fcn, train_lrn
from .verification import (
    VerifyReport,
    build_lattices,
    empirical_lipschitz,
    estimation_error_bound,
    rollout_compare,
    trajectory_deviation_bound,
)

__version__ = "0.1.0"
