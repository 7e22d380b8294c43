"""Small feedforward networks with hand-written reverse-mode gradients.

Networks are immutable values: :func:`adam_update` returns a new network
and every forward tape is bound to the exact parameter version it was
recorded with.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgument, TrainingDivergence

ACTIVATIONS = ("tanh", "relu")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_versions = itertools.count(1)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(float)


@dataclass(frozen=True)
class Network:
    layer_sizes: tuple
    activation: str
    weights: tuple
    biases: tuple
    seed: int = 0
    adam_m: tuple = None
    adam_v: tuple = None
    version: int = field(default_factory=lambda: next(_versions))

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise InvalidArgument("parameter count does not match layer_sizes")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise InvalidArgument(f"layer {k} parameter shapes do not match layer_sizes")

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        return list(zip(self.weights, self.biases))


def init_network(layer_sizes, activation="tanh", seed=0):
    """Xavier-uniform weights and zero biases drawn from ``seed``."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidArgument("layer_sizes needs an input and an output size")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(sizes, activation, tuple(weights), tuple(biases), seed)


@dataclass(frozen=True)
class Tape:
    version: int
    batched: bool
    inputs: tuple
    pre: tuple
    post: tuple


def net_forward(net, x):
    """Evaluate ``net`` on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    h = np.atleast_2d(x)
    if h.shape[1] != net.layer_sizes[0]:
        raise InvalidArgument(f"expected input of size {net.layer_sizes[0]}, got {x.shape}")
    inputs, pre, post = [], [], []
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        h = z if k == last else _act(net.activation, z)
        pre.append(z)
        post.append(h)
    tape = Tape(net.version, batched, tuple(inputs), tuple(pre), tuple(post))
    return (h if batched else h[0]), tape


def net_backward(net, tape, output_grad):
    """Gradients of ``sum(output_grad * output)`` (summed over a batch).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list of
    ``(dW, db)`` pairs.
    """
    if tape.version != net.version:
        raise InvalidArgument("tape was recorded with a different parameter version")
    g = np.atleast_2d(np.asarray(output_grad, dtype=float))
    if g.shape != tape.post[-1].shape:
        raise InvalidArgument(f"output_grad shape {g.shape} does not match output")
    grads = [None] * len(net.weights)
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _act_grad(net.activation, tape.pre[k], tape.post[k])
        grads[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
        g = g @ net.weights[k]
    return grads, (g if tape.batched else g[0])


def zero_grads(net):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params()]


def add_grads(a, b, scale=1.0):
    return [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a, b)]


def grad_norm(grads):
    return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in grads)))


def adam_update(net, param_grads, lr, step):
    """One Adam step (betas 0.9/0.999, eps 1e-8); ``step`` counts from 1."""
    if not lr > 0:
        raise InvalidArgument("lr must be > 0")
    if int(step) < 1:
        raise InvalidArgument("step counts from 1")
    for dw, db in param_grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingDivergence("non-finite gradient passed to adam_update")
    b1, b2 = ADAM_BETAS
    flat_g = [g for pair in param_grads for g in pair]
    flat_p = [p for pair in net.params() for p in pair]
    m_old = net.adam_m or tuple(np.zeros_like(p) for p in flat_p)
    v_old = net.adam_v or tuple(np.zeros_like(p) for p in flat_p)
    m = tuple(b1 * mo + (1 - b1) * g for mo, g in zip(m_old, flat_g))
    v = tuple(b2 * vo + (1 - b2) * g * g for vo, g in zip(v_old, flat_g))
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    new = tuple(p - lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
                for p, mi, vi in zip(flat_p, m, v))
    if not all(np.all(np.isfinite(p)) for p in new):
        raise TrainingDivergence("parameters became non-finite")
    return replace(net, weights=new[0::2], biases=new[1::2], adam_m=m, adam_v=v,
                   version=next(_versions))


def flat_params(net):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in net.params()])


def with_flat_params(net, vector):
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (net.n_params,):
        raise InvalidArgument(f"expected {net.n_params} parameters")
    weights, biases, at = [], [], 0
    for w, b in net.params():
        weights.append(vector[at:at + w.size].reshape(w.shape))
        at += w.size
        biases.append(vector[at:at + b.size].copy())
        at += b.size
    return replace(net, weights=tuple(weights), biases=tuple(biases), adam_m=None,
                   adam_v=None, version=next(_versions))


def flat_grads(grads):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in grads])


def gradient_check(net, x, output_grad, h=1e-5):
    """Norm-wise relative error between backprop and central differences,
    for the parameters and the input.  Returns ``(param_err, input_err)``.
    """
    output_grad = np.asarray(output_grad, dtype=float)
    x = np.asarray(x, dtype=float)
    out, tape = net_forward(net, x)
    grads, gx = net_backward(net, tape, output_grad)
    analytic = flat_grads(grads)

    def scalar(n, xi):
        return float(np.sum(output_grad * net_forward(n, xi)[0]))

    theta = flat_params(net)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        numeric[i] = (scalar(with_flat_params(net, tp), x)
                      - scalar(with_flat_params(net, tm), x)) / (2 * h)
    nx = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        nx[i] = (scalar(net, xp) - scalar(net, xm)) / (2 * h)

    def rel(a, b):
        denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
        return float(np.linalg.norm(a - b) / denom)

    return rel(analytic, numeric), rel(gx, nx)


def to_dict(net):
    return {"layer_sizes": list(net.layer_sizes), "activation": net.activation,
            "params": flat_params(net).tolist(), "seed": net.seed}


def from_dict(d):
    net = init_network(d["layer_sizes"], d["activation"], d.get("seed", 0))
    return with_flat_params(net, d["params"])


def save(net, path):
    with open(path, "w") as fh:
        json.dump(to_dict(net), fh)


def load(path):
    with open(path) as fh:
        return from_dict(json.load(fh))
