"""Multilayer perceptron standing in for the deep feature extractor.

Weights are stored ``(out, in)`` so a layer computes ``a @ W.T + b`` on a
row-major batch, matching the orientation of the classifier heads.
"""
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .exceptions import DimensionError, InvalidInputError, NonFiniteError, TraceMismatchError

ACTIVATIONS = ("relu", "tanh", "identity")

_version_counter = count(1)


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("bias length must equal the layer's output size")


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _activation_grad(name, pre, out, grad):
    if name == "relu":
        return grad * (pre > 0)
    if name == "tanh":
        return grad * (1.0 - out * out)
    return grad


@dataclass
class ForwardTrace:
    inputs: list
    pre_activations: list
    outputs: list
    masks: list
    version: int


@dataclass
class FeatureNet:
    """Stack of dense layers; an empty stack is the identity map.

    ``input_dim`` is only needed for the identity net, where there is no
    weight to read it from.
    """

    layers: list = field(default_factory=list)
    dropout_rate: float = 0.0
    input_dim: int = None
    version: int = field(default_factory=lambda: next(_version_counter), compare=False)

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")
        if self.layers:
            if self.input_dim is None:
                self.input_dim = self.layers[0].weight.shape[1]
            prev = self.input_dim
            for k, layer in enumerate(self.layers):
                if layer.weight.shape[1] != prev:
                    raise DimensionError(f"layer {k} expects {layer.weight.shape[1]} inputs, gets {prev}")
                prev = layer.weight.shape[0]
        elif self.input_dim is None:
            raise InvalidInputError("identity FeatureNet needs input_dim")

    @property
    def feature_dim(self):
        return self.layers[-1].weight.shape[0] if self.layers else self.input_dim

    @property
    def num_parameters(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def copy(self):
        return FeatureNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
                          self.dropout_rate, self.input_dim)

    def forward(self, inputs, mode="eval", rng=None, masks=None):
        """Return ``(features, trace)``.

        In ``train`` mode hidden activations are dropped with probability
        ``dropout_rate`` (inverted scaling). Pass ``masks`` from an earlier trace
        to reuse them, which keeps the map deterministic for gradient checks.
        """
        x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise DimensionError(f"expected input dimension {self.input_dim}, got {x.shape[1]}")
        if mode not in ("train", "eval"):
            raise InvalidInputError(f"mode must be 'train' or 'eval', not {mode!r}")
        use_dropout = mode == "train" and (self.dropout_rate > 0 or masks is not None)
        trace = ForwardTrace([], [], [], [], self.version)
        a = x
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            trace.inputs.append(a)
            pre = a @ layer.weight.T + layer.bias
            out = _activate(layer.activation, pre)
            trace.pre_activations.append(pre)
            trace.outputs.append(out)
            mask = None
            if use_dropout and k < last:
                if masks is not None:
                    mask = masks[k]
                else:
                    if rng is None:
                        raise InvalidInputError("train-mode dropout needs an rng")
                    keep = 1.0 - self.dropout_rate
                    mask = (rng.random(out.shape) < keep) / keep
                if mask is not None:
                    out = out * mask
            trace.masks.append(mask)
            a = out
        return a, trace

    def backward(self, trace, grad_features):
        """Back-propagate ``dL/dfeatures``; returns ``(layer_grads, grad_inputs)``.

        ``layer_grads`` is a list of ``(grad_weight, grad_bias)`` per layer.
        """
        if trace.version != self.version or len(trace.inputs) != len(self.layers):
            raise TraceMismatchError("trace was produced by different parameters")
        g = np.atleast_2d(np.asarray(grad_features, dtype=np.float64))
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if g.shape != trace.outputs[k].shape:
                raise DimensionError("gradient shape does not match the trace")
            if trace.masks[k] is not None:
                g = g * trace.masks[k]
            g = _activation_grad(layer.activation, trace.pre_activations[k], trace.outputs[k], g)
            grads[k] = (g.T @ trace.inputs[k], g.sum(axis=0))
            g = g @ layer.weight
        return grads, g

    def sgd_step(self, grads, learning_rate):
        if len(grads) != len(self.layers):
            raise DimensionError("one (grad_weight, grad_bias) pair per layer is required")
        for k, ((gw, gb), layer) in enumerate(zip(grads, self.layers)):
            if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
                raise DimensionError(f"gradient shape mismatch in layer {k}")
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NonFiniteError(f"non-finite gradient in feature-net layer {k}")
        for (gw, gb), layer in zip(grads, self.layers):
            layer.weight -= learning_rate * gw
            layer.bias -= learning_rate * gb
        self.version = next(_version_counter)


def init_feature_net(input_dim, hidden=(), feature_dim=None, activation="relu",
                     output_activation="identity", dropout_rate=0.0, rng=None):
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Hidden layers use ``activation``; the extra ``feature_dim`` layer, if
    requested, uses ``output_activation``. ``hidden=()`` with
    ``feature_dim=None`` gives the identity net.
    """
    sizes = [input_dim, *hidden]
    if feature_dim is not None:
        sizes.append(feature_dim)
    if len(sizes) == 1:
        return FeatureNet([], dropout_rate, input_dim)
    if rng is None:
        raise InvalidInputError("initialising weights needs an rng")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = output_activation if feature_dim is not None and k == len(sizes) - 2 else activation
        layers.append(DenseLayer(w, b, act))
    return FeatureNet(layers, dropout_rate, input_dim)
