from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .models import (
    SIGMA_DATA,
    AnalyticGaussian,
    LearnedScoreModel,
    ScoreModel,
    TrainBatch,
    ambient_loss,
    edm_coefficients,
    forward,
    loss_and_grad,
    loss_weight,
    score,
)
from .net import (
    LocalScoreNet,
    NetConfig,
    NetParams,
    build_net,
    flatten_params,
    init_params,
    param_count,
    unflatten_params,
)

__all__ = [
    "SIGMA_DATA", "AnalyticGaussian", "LearnedScoreModel", "LocalScoreNet", "NetConfig",
    "NetParams", "ScoreModel", "TrainBatch", "ambient_loss", "build_net", "edm_coefficients",
    "flatten_params", "forward", "init_params", "load_checkpoint", "load_model", "loss_and_grad",
    "loss_weight", "param_count", "save_checkpoint", "save_model", "score", "unflatten_params",
]
