from .data import Dataset, DatasetError, find_mnist, load_dataset, load_mnist, parse_idx, read_idx, write_idx
from .io import ModelFormatError, load_model, model_from_bytes, model_to_bytes, save_model
from .layers import Activation, Pool2d, VariationalConv2d, VariationalDense, VariationalLinear, softmax, softplus
from .network import (
    BayesianNetwork,
    SampledModel,
    ShapeError,
    Stage,
    draw_noise,
    elbo_loss,
    ensemble_probs,
    forward_plain,
    kl_divergence,
    mean_model,
    predict_ensemble,
    sample_model,
)
from .train import TrainConfig, TrainingDivergedError, TrainResult, accuracy, activation_stats, train
