from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from .layers import Activation, Pool2d, VariationalLinear, layer_from_config, softmax, softplus


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    """One linear layer plus the non-linear ops the client applies after it."""

    index: int
    linear: VariationalLinear
    post_ops: tuple
    in_shape: tuple
    out_shape: tuple  # shape of the linear output, before post ops
    next_shape: tuple  # shape after post ops

    @property
    def d_in(self) -> int:
        return math.prod(self.in_shape)

    @property
    def n_out(self) -> int:
        return math.prod(self.out_shape)


class BayesianNetwork:
    """A stack of variational linear layers separated by client-side non-linear ops.

    The final linear layer produces logits; softmax is implied.
    """

    def __init__(self, input_shape, layers, num_classes=None, mode="bayes"):
        if mode not in ("bayes", "normal"):
            raise ValueError(f"mode must be 'bayes' or 'normal', got {mode!r}")
        # 'normal' networks have sigma frozen at zero: sampling returns the means
        self.mode = mode
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        if not self.layers or not self.layers[0].linear:
            raise ShapeError("network must start with a linear layer")
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be a vector, got shape {shape}")
        self.num_classes = shape[0] if num_classes is None else int(num_classes)
        if self.num_classes != shape[0]:
            raise ShapeError(f"output width {shape[0]} != num_classes {self.num_classes}")

    @classmethod
    def mlp(cls, sizes, activation="relu", prior_sigma=0.1, rho_init=-5.0, seed=0):
        from .layers import VariationalDense
        rng = np.random.default_rng(seed)
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i:
                layers.append(Activation(activation))
            layers.append(VariationalDense(a, b, prior_sigma, rho_init, rng))
        return cls((sizes[0],), layers)

    @classmethod
    def from_config(cls, cfg: dict, seed=0):
        rng = np.random.default_rng(seed)
        return cls(cfg["input_shape"], [layer_from_config(c, rng) for c in cfg["layers"]],
                   cfg.get("num_classes"), cfg.get("mode", "bayes"))

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes, "mode": self.mode,
                "layers": [layer.config() for layer in self.layers]}

    @property
    def linear_layers(self) -> list:
        return [layer for layer in self.layers if layer.linear]

    def stages(self) -> list[Stage]:
        out = []
        idx = [i for i, layer in enumerate(self.layers) if layer.linear]
        for n, i in enumerate(idx):
            end = idx[n + 1] if n + 1 < len(idx) else len(self.layers)
            out.append(Stage(n, self.layers[i], tuple(self.layers[i + 1:end]),
                             self.shapes[i], self.shapes[i + 1], self.shapes[end]))
        return out

    def validate(self):
        for layer in self.linear_layers:
            layer.validate()

    def num_parameters(self) -> int:
        return sum(layer.mu_W.size + layer.mu_b.size for layer in self.linear_layers)

    # -- evaluation with explicit weights -----------------------------------

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        width = math.prod(self.input_shape)
        if x.ndim == len(self.input_shape) + 1 and x.shape[1:] == self.input_shape:
            return x, False
        if x.size == width:
            return x.reshape((1,) + self.input_shape), True
        if x.ndim >= 2 and math.prod(x.shape[1:]) == width:
            return x.reshape((x.shape[0],) + self.input_shape), False
        raise ShapeError(f"input shape {x.shape} does not match network input {self.input_shape}")

    def logits(self, weights, x):
        """Logits for a batch given one ``(W, b)`` pair per linear layer."""
        h, single = self._batch(x)
        it = iter(weights)
        for layer in self.layers:
            if layer.linear:
                W, b = next(it)
                h, _ = layer.apply(h, W, b)
            else:
                h, _ = layer.forward(h)
        return (h[0] if single else h)

    def forward_trace(self, weights, x):
        """Per-stage ``(input, pre-activation)`` arrays, used for range statistics."""
        h, _ = self._batch(x)
        it = iter(weights)
        trace = []
        for layer in self.layers:
            if layer.linear:
                W, b = next(it)
                z, _ = layer.apply(h, W, b)
                trace.append((h, z))
                h = z
            else:
                h, _ = layer.forward(h)
        return trace

    def mean_weights(self):
        return [(layer.mu_W, layer.mu_b) for layer in self.linear_layers]


@dataclass(frozen=True, eq=False)
class SampledModel:
    """One weight draw theta_k from the posterior."""

    network: BayesianNetwork
    weights: tuple = field(repr=False)
    index: int = 0

    def lowered(self):
        """``(W, b)`` per stage as dense matrices on flattened inputs."""
        return [stage.linear.lower(W, b, stage.in_shape)
                for stage, (W, b) in zip(self.network.stages(), self.weights)]


def sample_model(network: BayesianNetwork, rng, index: int = 0) -> SampledModel:
    if network.mode == "normal":
        return mean_model(network, index)
    weights = []
    for layer in network.linear_layers:
        W, b = layer.sample(rng)
        W.setflags(write=False)
        b.setflags(write=False)
        weights.append((W, b))
    return SampledModel(network, tuple(weights), index)


def mean_model(network: BayesianNetwork, index: int = 0) -> SampledModel:
    return SampledModel(network, tuple((l.mu_W.copy(), l.mu_b.copy()) for l in network.linear_layers), index)


def forward_plain(model: SampledModel, x) -> np.ndarray:
    """Softmax class probabilities of one sampled model (the plaintext reference)."""
    return softmax(model.network.logits(model.weights, x))


def ensemble_probs(models, x) -> np.ndarray:
    probs = [forward_plain(m, x) for m in models]
    return sum(probs[1:], probs[0]) / len(probs)


def predict_ensemble(network: BayesianNetwork, x, S: int, rng):
    """Average of ``S`` sampled softmax outputs and the argmax label (lowest index on ties).

    Works for a single input or a batch; models are drawn in order ``k = 0..S-1``.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    models = [sample_model(network, rng, k) for k in range(S)]
    p = ensemble_probs(models, x)
    return p, np.argmax(p, axis=-1)


# -- training objective ------------------------------------------------------

def draw_noise(network: BayesianNetwork, rng):
    return [(rng.standard_normal(l.mu_W.shape), rng.standard_normal(l.mu_b.shape))
            for l in network.linear_layers]


def elbo_loss(network: BayesianNetwork, x, y, noise=None, kl_weight=1.0, deterministic=False):
    """``sum NLL(y | x, w) + kl_weight * KL(q || prior)`` and its gradients.

    Weights are reparameterized as ``w = mu + softplus(rho) * eps`` with ``eps``
    taken from ``noise`` (one ``(eps_W, eps_b)`` per linear layer). With
    ``deterministic=True`` the means are used directly and the KL term is dropped.
    Returns ``(loss, grads, logits)`` where ``grads`` is a list of dicts keyed like
    :meth:`VariationalLinear.params`.
    """
    linear = network.linear_layers
    if deterministic:
        weights = [(l.mu_W, l.mu_b) for l in linear]
    else:
        if noise is None:
            raise ValueError("noise is required for the stochastic objective")
        weights = [(l.mu_W + softplus(l.rho_W) * eW, l.mu_b + softplus(l.rho_b) * eb)
                   for l, (eW, eb) in zip(linear, noise)]

    h, _ = network._batch(x)
    y = np.asarray(y)
    caches = []
    it = iter(weights)
    for layer in network.layers:
        if layer.linear:
            W, _b = next(it)
            h, cache = layer.apply(h, W, _b)
            caches.append((layer, cache, W))
        else:
            h, cache = layer.forward(h)
            caches.append((layer, cache, None))
    logits = h
    logp = log_softmax(logits, axis=1)
    nll = -float(np.sum(logp[np.arange(len(y)), y]))
    if not np.isfinite(nll):
        raise FloatingPointError("non-finite negative log-likelihood")

    dh = softmax(logits, axis=1)
    dh[np.arange(len(y)), y] -= 1.0
    wgrads = []
    for layer, cache, W in reversed(caches):
        if layer.linear:
            dh, dW, db = layer.apply_backward(cache, dh, W)
            wgrads.append((dW, db))
        else:
            dh = layer.backward(cache, dh)
    wgrads.reverse()

    grads = []
    kl = 0.0
    for i, (layer, (dW, db)) in enumerate(zip(linear, wgrads)):
        if deterministic:
            grads.append({"mu_W": dW, "rho_W": np.zeros_like(dW), "mu_b": db, "rho_b": np.zeros_like(db)})
            continue
        eW, eb = noise[i]
        g = {"mu_W": dW, "mu_b": db,
             "rho_W": dW * eW * expit(layer.rho_W), "rho_b": db * eb * expit(layer.rho_b)}
        if kl_weight:
            kg = layer.kl_grads()
            for k in g:
                g[k] = g[k] + kl_weight * kg[k]
            kl += layer.kl()
        grads.append(g)
    loss = nll + (kl_weight * kl if not deterministic else 0.0)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads, logits


def kl_divergence(network: BayesianNetwork) -> float:
    return sum(layer.kl() for layer in network.linear_layers)


__all__ = [
    "Activation", "BayesianNetwork", "Pool2d", "SampledModel", "ShapeError", "Stage",
    "draw_noise", "elbo_loss", "ensemble_probs", "forward_plain", "kl_divergence",
    "mean_model", "predict_ensemble", "sample_model",
]
