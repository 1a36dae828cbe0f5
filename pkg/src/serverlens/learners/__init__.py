"""Five regression learner families behind one fit/predict contract."""

from .base import LEARNER_ORDER, FitError, TrainedModel, predict
from .linear import LinearModel, coordinate_descent, expand_polynomial, fit_elastic_net
from .trees import ForestModel, GbtModel, fit_gbt, fit_random_forest
from .gp import GpModel, fit_gp, kernel_value
from .net import NetModel, fit_ffn, net_loss_and_grad, relu

__all__ = [
    "LEARNER_ORDER",
    "FitError",
    "TrainedModel",
    "predict",
    "LinearModel",
    "coordinate_descent",
    "expand_polynomial",
    "fit_elastic_net",
    "GbtModel",
    "ForestModel",
    "fit_gbt",
    "fit_random_forest",
    "GpModel",
    "fit_gp",
    "kernel_value",
    "NetModel",
    "fit_ffn",
    "net_loss_and_grad",
    "relu",
]
