"""Feed-forward network engine with hand-written forward and backward passes.

Matrices are 2-D ``float64`` numpy arrays, one sample per row. Networks are
plain data (:class:`NetworkState`); the functions below never mutate the state
they are given. Parameter updates go through :meth:`NetworkState.with_parameters`
and :func:`update_batchnorm_stats`.

Random streams are ``numpy.random.Generator`` objects backed by PCG64
(``numpy.random.default_rng(seed)``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument, ShapeError

FORMAT_NAME = "mozart-network"
FORMAT_VERSION = 1

LAYER_KINDS = ("Dense", "ReLU", "Sigmoid", "Dropout", "BatchNorm")

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
BCE_CLAMP = 1e-7

# keeps sigmoid outputs strictly inside (0, 1) once exp() saturates
_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - np.finfo(np.float64).epsneg


class Mode(str, Enum):
    TRAIN = "train"
    INFERENCE = "inference"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: Optional[int] = None
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        if self.kind == "Dense":
            if not isinstance(self.units, (int, np.integer)) or isinstance(self.units, bool) or self.units < 1:
                raise InvalidArgument(f"Dense units must be a positive integer, got {self.units!r}")
        elif self.units is not None:
            raise InvalidArgument(f"{self.kind} takes no units")
        if self.kind == "Dropout":
            if self.rate is None or not (0.0 <= self.rate < 1.0):
                raise InvalidArgument(f"Dropout rate must be in [0, 1), got {self.rate!r}")
        elif self.rate is not None:
            raise InvalidArgument(f"{self.kind} takes no rate")

    @classmethod
    def dense(cls, units):
        return cls("Dense", units=units)

    @classmethod
    def dropout(cls, rate):
        return cls("Dropout", rate=rate)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.units is not None:
            d["units"] = int(self.units)
        if self.rate is not None:
            d["rate"] = float(self.rate).hex()
        return d

    @classmethod
    def from_dict(cls, d):
        rate = d.get("rate")
        if rate is not None:
            rate = float.fromhex(rate) if isinstance(rate, str) else float(rate)
        return cls(d["kind"], units=d.get("units"), rate=rate)


RELU = LayerSpec("ReLU")
SIGMOID = LayerSpec("Sigmoid")
BATCHNORM = LayerSpec("BatchNorm")

META_SPEC = (
    LayerSpec.dense(64), RELU, LayerSpec.dropout(0.1),
    LayerSpec.dense(32), RELU, LayerSpec.dropout(0.1),
    LayerSpec.dense(1), SIGMOID,
)

HEAD_SPEC = (LayerSpec.dense(1024), BATCHNORM, LayerSpec.dropout(0.4), LayerSpec.dense(1), SIGMOID)


@dataclass
class NetworkState:
    """Architecture plus every learnable parameter and batch-norm statistic.

    ``weights``/``biases`` hold one entry per Dense layer and the ``bn_*``
    lists one entry per BatchNorm layer, both in spec order.
    """

    spec: tuple
    input_dim: int
    weights: list
    biases: list
    bn_gamma: list = field(default_factory=list)
    bn_beta: list = field(default_factory=list)
    bn_running_mean: list = field(default_factory=list)
    bn_running_var: list = field(default_factory=list)
    bn_momentum: float = BN_MOMENTUM
    bn_epsilon: float = BN_EPSILON
    rng_seed: int = 0

    def slots(self):
        """Per layer, the index into the Dense or BatchNorm lists (None otherwise)."""
        out, n_dense, n_bn = [], 0, 0
        for layer in self.spec:
            if layer.kind == "Dense":
                out.append(n_dense)
                n_dense += 1
            elif layer.kind == "BatchNorm":
                out.append(n_bn)
                n_bn += 1
            else:
                out.append(None)
        return out

    def parameters(self):
        """Learnable arrays in spec order: Dense (W, b), BatchNorm (gamma, beta)."""
        params = []
        for layer, slot in zip(self.spec, self.slots()):
            if layer.kind == "Dense":
                params += [self.weights[slot], self.biases[slot]]
            elif layer.kind == "BatchNorm":
                params += [self.bn_gamma[slot], self.bn_beta[slot]]
        return params

    def parameter_names(self):
        names = []
        for i, layer in enumerate(self.spec):
            if layer.kind == "Dense":
                names += [f"{i}.Dense.W", f"{i}.Dense.b"]
            elif layer.kind == "BatchNorm":
                names += [f"{i}.BatchNorm.gamma", f"{i}.BatchNorm.beta"]
        return names

    def with_parameters(self, params):
        """New state sharing non-learnable fields, holding ``params`` by reference."""
        params = list(params)
        current = self.parameters()
        if len(params) != len(current):
            raise InvalidArgument(f"expected {len(current)} parameter arrays, got {len(params)}")
        for new, old in zip(params, current):
            if np.shape(new) != old.shape:
                raise ShapeError(f"parameter shape {np.shape(new)} != {old.shape}")
        it = iter(params)
        weights, biases, gamma, beta = [], [], [], []
        for layer in self.spec:
            if layer.kind == "Dense":
                weights.append(next(it))
                biases.append(next(it))
            elif layer.kind == "BatchNorm":
                gamma.append(next(it))
                beta.append(next(it))
        return NetworkState(
            spec=self.spec, input_dim=self.input_dim, weights=weights, biases=biases,
            bn_gamma=gamma, bn_beta=beta,
            bn_running_mean=list(self.bn_running_mean), bn_running_var=list(self.bn_running_var),
            bn_momentum=self.bn_momentum, bn_epsilon=self.bn_epsilon, rng_seed=self.rng_seed,
        )

    def copy(self):
        return NetworkState(
            spec=self.spec, input_dim=self.input_dim,
            weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases],
            bn_gamma=[a.copy() for a in self.bn_gamma], bn_beta=[a.copy() for a in self.bn_beta],
            bn_running_mean=[a.copy() for a in self.bn_running_mean],
            bn_running_var=[a.copy() for a in self.bn_running_var],
            bn_momentum=self.bn_momentum, bn_epsilon=self.bn_epsilon, rng_seed=self.rng_seed,
        )

    @property
    def n_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    @property
    def output_dim(self):
        dim = self.input_dim
        for layer in self.spec:
            if layer.kind == "Dense":
                dim = layer.units
        return dim


def _check_dim(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise InvalidArgument(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def build_network(spec: Sequence[LayerSpec], input_dim: int, seed: int) -> NetworkState:
    """Glorot-uniform Dense weights, zero biases, gamma=1 and beta=0 for BatchNorm."""
    input_dim = _check_dim(input_dim, "input_dim")
    spec = tuple(spec)
    if not spec:
        raise InvalidArgument("network spec is empty")
    rng = np.random.default_rng(seed)
    weights, biases, gamma, beta, rmean, rvar = [], [], [], [], [], []
    dim = input_dim
    for layer in spec:
        if layer.kind == "Dense":
            limit = np.sqrt(6.0 / (dim + layer.units))
            weights.append(rng.uniform(-limit, limit, size=(dim, layer.units)))
            biases.append(np.zeros(layer.units))
            dim = layer.units
        elif layer.kind == "BatchNorm":
            gamma.append(np.ones(dim))
            beta.append(np.zeros(dim))
            rmean.append(np.zeros(dim))
            rvar.append(np.ones(dim))
    return NetworkState(spec, input_dim, weights, biases, gamma, beta, rmean, rvar, rng_seed=seed)


def make_meta_network(input_dim: int, seed: int) -> NetworkState:
    """The 64-32-1 stacking network (ReLU, dropout 0.1, sigmoid output)."""
    return build_network(META_SPEC, input_dim, seed)


def make_head_network(feature_dim: int, seed: int) -> NetworkState:
    """Backbone classification head: Dense 1024, BatchNorm, dropout 0.4, Dense 1, sigmoid."""
    return build_network(HEAD_SPEC, feature_dim, seed)


@dataclass
class ForwardTrace:
    """Everything backward_pass needs. ``masks`` maps Dropout layer index to a 0/1 keep mask."""

    mode: Mode
    inputs: list
    outputs: list
    masks: dict
    bn_mean: dict
    bn_var: dict


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


def as_matrix(data, name="batch"):
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _dense(x, W, b):
    return x @ W + b


def _dropout(x, keep, rate):
    return x * (keep / (1.0 - rate))


def _batchnorm(x, gamma, beta, mean, var, eps):
    return (x - mean) * (gamma / np.sqrt(var + eps)) + beta


def _batchnorm_train(x, gamma, beta, eps):
    # batch axis is -2 so stacked (K, n, d) activations work unchanged
    mean = x.mean(axis=-2, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-2, keepdims=True)
    return centered * (gamma / np.sqrt(var + eps)) + beta, mean, var


def forward_pass(net: NetworkState, batch, mode=Mode.INFERENCE, rng=None, masks=None):
    """Run ``batch`` through ``net``.

    In TRAIN mode Dropout draws keep masks from ``rng`` unless ``masks`` (layer
    index -> 0/1 array) pins them, and BatchNorm normalizes with batch
    statistics. Returns ``(output, trace)``.
    """
    mode = Mode(mode)
    x = as_matrix(batch)
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, network expects {net.input_dim}")
    if x.shape[0] == 0:
        raise ShapeError("batch has no rows")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("batch contains non-finite values")

    trace = ForwardTrace(mode, [], [], {}, {}, {})
    for i, (layer, slot) in enumerate(zip(net.spec, net.slots())):
        trace.inputs.append(x)
        kind = layer.kind
        if kind == "Dense":
            y = _dense(x, net.weights[slot], net.biases[slot])
        elif kind == "ReLU":
            y = np.maximum(x, 0.0)
        elif kind == "Sigmoid":
            y = sigmoid(x)
        elif kind == "Dropout":
            if mode is Mode.TRAIN and layer.rate > 0.0:
                if masks is not None and i in masks:
                    keep = np.asarray(masks[i], dtype=np.float64)
                    if keep.shape != x.shape:
                        raise ShapeError(f"dropout mask for layer {i} has shape {keep.shape}, expected {x.shape}")
                elif rng is None:
                    raise InvalidArgument("TRAIN mode dropout needs an rng or frozen masks")
                else:
                    keep = (rng.random(x.shape) >= layer.rate).astype(np.float64)
                y = _dropout(x, keep, layer.rate)
            else:
                keep = np.ones_like(x)
                y = x
            trace.masks[i] = keep
        else:  # BatchNorm
            if mode is Mode.TRAIN:
                y, mean, var = _batchnorm_train(x, net.bn_gamma[slot], net.bn_beta[slot], net.bn_epsilon)
                trace.bn_mean[i] = mean[0]
                trace.bn_var[i] = var[0]
            else:
                y = _batchnorm(x, net.bn_gamma[slot], net.bn_beta[slot],
                               net.bn_running_mean[slot], net.bn_running_var[slot], net.bn_epsilon)
        trace.outputs.append(y)
        x = y
    return x, trace


def bce_loss(predictions, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the predictions.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is evaluated
    at the clamped value.
    """
    p = as_matrix(predictions, "predictions")
    y = as_matrix(labels, "labels")
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InvalidArgument("labels must be 0 or 1")
    if not np.all(np.isfinite(p)):
        raise InvalidArgument("predictions contain non-finite values")
    n = p.shape[0]
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -float(np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / n
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return loss, grad


def backward_pass(net: NetworkState, trace: ForwardTrace, loss_grad):
    """Gradients for ``net.parameters()``, in the same order, reusing the trace's masks."""
    if len(trace.inputs) != len(net.spec) or len(trace.outputs) != len(net.spec):
        raise InvalidArgument("trace does not belong to this network (layer count differs)")
    g = as_matrix(loss_grad, "loss_grad")
    if g.shape != trace.outputs[-1].shape:
        raise ShapeError(f"loss_grad shape {g.shape} != output shape {trace.outputs[-1].shape}")

    grads = {}
    slots = net.slots()
    for i in reversed(range(len(net.spec))):
        layer, slot = net.spec[i], slots[i]
        x, y = trace.inputs[i], trace.outputs[i]
        kind = layer.kind
        if kind == "Dense":
            W = net.weights[slot]
            if x.shape[1] != W.shape[0] or y.shape[1] != W.shape[1]:
                raise InvalidArgument(f"trace layer {i} does not match Dense weights {W.shape}")
            grads[i] = (x.T @ g, g.sum(axis=0))
            g = g @ W.T
        elif kind == "ReLU":
            g = g * (x > 0.0)
        elif kind == "Sigmoid":
            g = g * y * (1.0 - y)
        elif kind == "Dropout":
            if trace.mode is Mode.TRAIN and layer.rate > 0.0:
                g = g * trace.masks[i] / (1.0 - layer.rate)
        else:
            gamma = net.bn_gamma[slot]
            if trace.mode is Mode.TRAIN:
                mean, var = trace.bn_mean[i], trace.bn_var[i]
            else:
                mean, var = net.bn_running_mean[slot], net.bn_running_var[slot]
            inv_std = 1.0 / np.sqrt(var + net.bn_epsilon)
            xhat = (x - mean) * inv_std
            grads[i] = ((g * xhat).sum(axis=0), g.sum(axis=0))
            dxhat = g * gamma
            if trace.mode is Mode.TRAIN:
                n = x.shape[0]
                g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv_std

    out = []
    for i, layer in enumerate(net.spec):
        if i in grads:
            out += list(grads[i])
    return out


def update_batchnorm_stats(net: NetworkState, trace: ForwardTrace) -> NetworkState:
    """Fold a TRAIN-mode trace's batch statistics into the running averages."""
    if trace.mode is not Mode.TRAIN or not trace.bn_mean:
        return net
    new = net.with_parameters(net.parameters())
    m = net.bn_momentum
    for i, slot in enumerate(net.slots()):
        if net.spec[i].kind == "BatchNorm":
            new.bn_running_mean[slot] = m * net.bn_running_mean[slot] + (1.0 - m) * trace.bn_mean[i]
            new.bn_running_var[slot] = m * net.bn_running_var[slot] + (1.0 - m) * trace.bn_var[i]
    return new


def evaluate_loss(net, batch, labels, mode=Mode.INFERENCE, masks=None):
    out, _ = forward_pass(net, batch, mode, masks=masks)
    return bce_loss(out, labels)[0]


def _stacked_losses(net, start, x, overrides, labels, mode, masks):
    """BCE of K parameter variants at once.

    ``x`` is the (unperturbed) input to layer ``start``; ``overrides`` maps a
    parameter role of that layer to a (K, ...) stack. Returns K losses.
    """
    slots = net.slots()
    for i in range(start, len(net.spec)):
        layer, slot = net.spec[i], slots[i]
        ov = overrides if i == start else {}
        kind = layer.kind
        if kind == "Dense":
            W = ov.get("W", net.weights[slot])
            b = ov["b"][:, None, :] if "b" in ov else net.biases[slot]
            x = _dense(x, W, b)
        elif kind == "ReLU":
            x = np.maximum(x, 0.0)
        elif kind == "Sigmoid":
            x = sigmoid(x)
        elif kind == "Dropout":
            if mode is Mode.TRAIN and layer.rate > 0.0:
                x = _dropout(x, masks[i], layer.rate)
        else:
            gamma = ov["gamma"][:, None, :] if "gamma" in ov else net.bn_gamma[slot]
            beta = ov["beta"][:, None, :] if "beta" in ov else net.bn_beta[slot]
            if mode is Mode.TRAIN:
                x = _batchnorm_train(x, gamma, beta, net.bn_epsilon)[0]
            else:
                x = _batchnorm(x, gamma, beta, net.bn_running_mean[slot], net.bn_running_var[slot],
                               net.bn_epsilon)
    p = np.clip(x, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = labels.shape[0]
    return -np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p), axis=(-2, -1)) / n


def finite_diff_check(net: NetworkState, batch, labels, epsilon=1e-5, mode=Mode.INFERENCE,
                      masks=None, rng=None, chunk=256, details=False):
    """Largest relative gap between analytic and central-difference gradients.

    Per scalar parameter the error is ``|a - n| / max(|a|, |n|, 1e-12)`` with
    ``n = (L(p + eps) - L(p - eps)) / (2 eps)``. Dropout masks are frozen for
    the whole check: taken from ``masks`` if given, otherwise drawn once from
    ``rng``. With ``details=True`` also returns ``{parameter name: (max error,
    argmax flat index, analytic, numeric)}``.
    """
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    mode = Mode(mode)
    labels = as_matrix(labels, "labels")
    out, trace = forward_pass(net, batch, mode, rng=rng, masks=masks)
    _, grad_out = bce_loss(out, labels)
    analytic = backward_pass(net, trace, grad_out)

    roles = []
    for i, layer in enumerate(net.spec):
        if layer.kind == "Dense":
            roles += [(i, "W"), (i, "b")]
        elif layer.kind == "BatchNorm":
            roles += [(i, "gamma"), (i, "beta")]

    worst, report = 0.0, {}
    for (layer_idx, role), name, p, a in zip(roles, net.parameter_names(), net.parameters(), analytic):
        size = p.size
        numeric = np.empty(size)
        for lo in range(0, size, chunk):
            idx = np.arange(lo, min(lo + chunk, size))
            losses = []
            for step in (epsilon, -epsilon):
                stack = np.repeat(p.reshape(1, -1), idx.size, axis=0)
                stack[np.arange(idx.size), idx] = stack[np.arange(idx.size), idx] + step
                stack = stack.reshape((idx.size,) + p.shape)
                losses.append(_stacked_losses(net, layer_idx, trace.inputs[layer_idx], {role: stack},
                                              labels, mode, trace.masks))
            numeric[idx] = (losses[0] - losses[1]) / (2.0 * epsilon)
        af = a.reshape(-1)
        err = np.abs(af - numeric) / np.maximum(np.maximum(np.abs(af), np.abs(numeric)), 1e-12)
        k = int(np.argmax(err))
        report[name] = (float(err[k]), k, float(af[k]), float(numeric[k]))
        worst = max(worst, float(err[k]))
    return (worst, report) if details else worst


# -- serialization -----------------------------------------------------------

def _encode(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v).hex() for v in a.reshape(-1)]}


def _decode(d):
    shape = tuple(d["shape"])
    data = np.array([float.fromhex(v) for v in d["data"]], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise InvalidArgument(f"array data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def network_to_dict(net: NetworkState) -> dict:
    layers = []
    for i, (layer, slot) in enumerate(zip(net.spec, net.slots())):
        if layer.kind == "Dense":
            layers.append({"index": i, "kind": "Dense",
                           "weights": _encode(net.weights[slot]), "bias": _encode(net.biases[slot])})
        elif layer.kind == "BatchNorm":
            layers.append({"index": i, "kind": "BatchNorm",
                           "gamma": _encode(net.bn_gamma[slot]), "beta": _encode(net.bn_beta[slot]),
                           "running_mean": _encode(net.bn_running_mean[slot]),
                           "running_var": _encode(net.bn_running_var[slot])})
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "input_dim": net.input_dim,
        "rng_seed": net.rng_seed,
        "bn_momentum": float(net.bn_momentum).hex(),
        "bn_epsilon": float(net.bn_epsilon).hex(),
        "spec": [layer.to_dict() for layer in net.spec],
        "parameters": layers,
    }


def network_from_dict(doc: dict) -> NetworkState:
    if doc.get("format") != FORMAT_NAME:
        raise InvalidArgument(f"not a {FORMAT_NAME} document")
    if doc.get("format_version") != FORMAT_VERSION:
        raise InvalidArgument(f"unsupported format_version {doc.get('format_version')!r}")
    spec = tuple(LayerSpec.from_dict(d) for d in doc["spec"])
    net = build_network(spec, doc["input_dim"], 0)
    by_index = {entry["index"]: entry for entry in doc["parameters"]}
    for i, (layer, slot) in enumerate(zip(spec, net.slots())):
        if layer.kind == "Dense":
            net.weights[slot] = _decode(by_index[i]["weights"])
            net.biases[slot] = _decode(by_index[i]["bias"])
        elif layer.kind == "BatchNorm":
            e = by_index[i]
            net.bn_gamma[slot] = _decode(e["gamma"])
            net.bn_beta[slot] = _decode(e["beta"])
            net.bn_running_mean[slot] = _decode(e["running_mean"])
            net.bn_running_var[slot] = _decode(e["running_var"])
    net.rng_seed = doc["rng_seed"]
    net.bn_momentum = float.fromhex(doc["bn_momentum"])
    net.bn_epsilon = float.fromhex(doc["bn_epsilon"])
    for p, ref in zip(net.parameters(), build_network(spec, net.input_dim, 0).parameters()):
        if p.shape != ref.shape:
            raise ShapeError(f"stored parameter shape {p.shape} does not match spec ({ref.shape})")
    return net


def dumps_network(net: NetworkState) -> str:
    return json.dumps(network_to_dict(net), indent=1, sort_keys=True) + "\n"


def save_network(net: NetworkState, path) -> None:
    Path(path).write_text(dumps_network(net), encoding="utf-8", newline="\n")


def load_network(path) -> NetworkState:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
