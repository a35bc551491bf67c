"""Bayes-by-Backprop training loop and evaluation helpers."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .network import BayesianNetwork, draw_noise, elbo_loss, mean_model, predict_ensemble, sample_model

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, detail):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    """Training hyperparameters. ``mode='normal'`` freezes sigma at zero (plain network)."""

    S: int = 4
    mode: str = "bayes"
    architecture: list = field(default_factory=lambda: [784, 256, 10])
    activation: str = "relu"
    optimizer: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 128
    kl_weight: float | None = None  # None means 1 / num_batches
    prior_sigma: float = 0.1
    rho_init: float = -5.0
    seed: int = 0
    stats_samples: int = 10000

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if self.mode not in ("bayes", "normal"):
            raise ValueError(f"mode must be 'bayes' or 'normal', got {self.mode!r}")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)

    def build_network(self) -> BayesianNetwork:
        arch = self.architecture
        if isinstance(arch, dict):
            net = BayesianNetwork.from_config(arch, seed=self.seed)
            for layer in net.linear_layers:
                layer.prior_sigma = self.prior_sigma
                layer.rho_W[...] = self.rho_init
                layer.rho_b[...] = self.rho_init
        else:
            net = BayesianNetwork.mlp(arch, self.activation, self.prior_sigma, self.rho_init, self.seed)
        net.mode = self.mode
        return net


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class MomentumSGD:
    def __init__(self, params, lr=0.01, momentum=0.9):
        self.params, self.lr, self.mu = params, lr, momentum
        self.vel = [np.zeros_like(p) for p in params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.vel):
            v *= self.mu
            v += g
            p -= self.lr * v


@dataclass
class TrainResult:
    network: BayesianNetwork
    config: TrainConfig
    history: list
    stats: dict
    train_accuracy: float | None = None
    test_accuracy: float | None = None

    @property
    def gap(self) -> float:
        return self.train_accuracy - self.test_accuracy


def _flat_params(network):
    out = []
    for layer in network.linear_layers:
        out.extend(layer.params().values())
    return out


def _flat_grads(grads):
    out = []
    for g in grads:
        out.extend(g[name] for name in ("mu_W", "rho_W", "mu_b", "rho_b"))
    return out


def accuracy(network: BayesianNetwork, data: Dataset, S: int = 4, mode: str = "bayes",
             seed: int = 0, batch: int = 10000) -> float:
    """Ensemble accuracy (``mode='bayes'``) or mean-weight accuracy (``'normal'``)."""
    rng = np.random.default_rng(seed)
    if mode == "bayes":
        models = [sample_model(network, rng, k) for k in range(S)]
    else:
        models = [mean_model(network)]
    correct = 0
    for start in range(0, len(data), batch):
        x = data.images[start:start + batch]
        p = sum(_softmax_batch(network, m, x) for m in models)
        correct += int(np.sum(np.argmax(p, axis=1) == data.labels[start:start + batch]))
    return correct / len(data)


def _softmax_batch(network, model, x):
    from .layers import softmax
    return softmax(network.logits(model.weights, x), axis=1)


def activation_stats(network: BayesianNetwork, data: Dataset, S: int = 4, mode: str = "bayes",
                     samples: int = 10000, seed: int = 0) -> dict:
    """Per-stage maxima of |input activation| and |pre-activation| over ``samples`` inputs."""
    rng = np.random.default_rng(seed)
    models = ([sample_model(network, rng, k) for k in range(S)] if mode == "bayes"
              else [mean_model(network)])
    n_stages = len(network.linear_layers)
    max_in, max_z = [0.0] * n_stages, [0.0] * n_stages
    x_all = data.images[:samples]
    for start in range(0, len(x_all), 2000):
        x = x_all[start:start + 2000]
        for m in models:
            for i, (h, z) in enumerate(network.forward_trace(m.weights, x)):
                max_in[i] = max(max_in[i], float(np.abs(h).max()))
                max_z[i] = max(max_z[i], float(np.abs(z).max()))
    return {"max_abs_input": max_in, "max_abs_z": max_z, "samples": int(len(x_all)), "S": len(models)}


def train(config: TrainConfig, dataset: Dataset, test: Dataset | None = None,
          network: BayesianNetwork | None = None) -> TrainResult:
    network = config.build_network() if network is None else network
    rng = np.random.default_rng(config.seed + 1)
    params = _flat_params(network)
    if config.optimizer == "adam":
        opt = Adam(params, config.lr)
    else:
        opt = MomentumSGD(params, config.lr, config.momentum)
    deterministic = config.mode == "normal"
    n = len(dataset)
    n_batches = (n + config.batch_size - 1) // config.batch_size
    kl_weight = 1.0 / n_batches if config.kl_weight is None else config.kl_weight
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            noise = None if deterministic else draw_noise(network, rng)
            try:
                loss, grads, _ = elbo_loss(network, dataset.images[idx], dataset.labels[idx],
                                           noise, kl_weight, deterministic)
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            opt.step(_flat_grads(grads))
            total += loss
        entry = {"epoch": epoch, "loss": total / n_batches, "seconds": time.perf_counter() - t0}
        if test is not None:
            entry["test_accuracy"] = accuracy(network, test, config.S, config.mode, config.seed)
        history.append(entry)
        log.info("epoch %d loss %.4f %s", epoch, entry["loss"],
                 f"test acc {entry['test_accuracy']:.4f}" if test is not None else "")
    stats = activation_stats(network, dataset, config.S, config.mode, config.stats_samples, config.seed)
    result = TrainResult(network, config, history, stats)
    result.train_accuracy = accuracy(network, dataset, config.S, config.mode, config.seed)
    if test is not None:
        result.test_accuracy = history[-1]["test_accuracy"] if history else accuracy(
            network, test, config.S, config.mode, config.seed)
    return result
