"""Recording tape and reverse-mode differentiation through unrolled time.

A :class:`Tape` stores every value produced during a forward pass in a flat
list of slots and every operation as a :class:`TapeNode`. Ops are looked up
by name in a registry that pairs a forward and a backward function, so a
tape can be replayed (forward again from its leaves) or differentiated.

Spike nodes (``"lif"``) substitute the configured surrogate for the
derivative of the step function. Gradient flows through the membrane leak
into the previous step; the hard reset is treated as a constant.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor
from .errors import NonFiniteError, ShapeError
from .neuron import (LifConfig, SurrogateSpec, fire, integrate, sigmoid_spike,
                     sigmoid_spike_grad, surrogate_grad)

GradientSet = dict  # parameter name -> gradient array, shape-matched


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    outputs: tuple
    params: tuple = ()
    attrs: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class _Op:
    forward: Callable
    backward: Callable


_OPS: dict = {}


def register(name):
    def wrap(cls):
        _OPS[name] = _Op(cls.forward, cls.backward)
        return cls
    return wrap


class Tape:
    """Value slots plus the ordered op log that produced them.

    With ``record=False`` nodes are not kept and callers may drop dead
    values with :meth:`retain`; such a tape supports neither replay nor
    backward.
    """

    def __init__(self, params, record=True):
        self.params = params
        self.record_nodes = record
        self.values = []
        self.nodes = []
        self.leaves = []
        self.output = None

    def leaf(self, value) -> int:
        self.values.append(value)
        slot = len(self.values) - 1
        self.leaves.append(slot)
        return slot

    def apply(self, op, inputs, params=(), t=0, **attrs):
        xs = [self.values[i] for i in inputs]
        ps = [self.params[name] for name in params]
        outs, saved = _OPS[op].forward(xs, ps, **attrs)
        slots = []
        for out in outs:
            self.values.append(out)
            slots.append(len(self.values) - 1)
        if self.record_nodes:
            self.nodes.append(TapeNode(op, tuple(inputs), tuple(slots), tuple(params),
                                       attrs, saved, t))
        return slots[0] if len(slots) == 1 else tuple(slots)

    def __getitem__(self, slot):
        return self.values[slot]

    def retain(self, live):
        live = set(live)
        for i in range(len(self.values)):
            if i not in live and i not in self.leaves:
                self.values[i] = None

    def count(self, op) -> int:
        return sum(node.op == op for node in self.nodes)

    def replay(self, params=None):
        """Re-run every recorded node from the leaf values; returns the slot list."""
        params = self.params if params is None else params
        values = list(self.values)
        for node in self.nodes:
            xs = [values[i] for i in node.inputs]
            ps = [params[name] for name in node.params]
            outs, _ = _OPS[node.op].forward(xs, ps, **node.attrs)
            for slot, out in zip(node.outputs, outs):
                values[slot] = out
        return values


def backward(tape: Tape, d_output, spec: SurrogateSpec = SurrogateSpec()) -> GradientSet:
    """Propagate ``d_output`` (gradient of the loss w.r.t. the tape output)
    back to every parameter referenced on the tape."""
    if not tape.record_nodes or tape.output is None:
        raise ShapeError("tape holds no recorded forward pass")
    out_val = tape.values[tape.output]
    d_output = np.asarray(d_output)
    if d_output.shape != out_val.shape:
        raise ShapeError(f"d_output shape {d_output.shape} != output shape {out_val.shape}")

    grads = {tape.output: d_output.astype(np.float64)}
    pgrads = {name: np.zeros(p.shape, dtype=np.float64) for name, p in tape.params.items()}
    for node in reversed(tape.nodes):
        gouts = [grads.pop(slot, None) for slot in node.outputs]
        if all(g is None for g in gouts):
            continue
        xs = [tape.values[i] for i in node.inputs]
        ps = [tape.params[name] for name in node.params]
        gxs, gps = _OPS[node.op].backward(gouts, xs, ps, node.saved, spec, **node.attrs)
        for slot, g in zip(node.inputs, gxs):
            if g is None:
                continue
            if slot in grads:
                grads[slot] = grads[slot] + g
            else:
                grads[slot] = g
        for name, g in zip(node.params, gps):
            pgrads[name] += g

    out = {}
    for name, g in pgrads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name} is not finite")
        out[name] = g.astype(tape.params[name].dtype)
    return out


def _zeros_if_none(g, like):
    return np.zeros(like.shape, dtype=np.float64) if g is None else g


@register("conv2d")
class Conv2d:
    @staticmethod
    def forward(xs, ps, stride=1, padding="same"):
        return (tensor.conv2d(xs[0], ps[0], stride, padding),), {}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec, stride=1, padding="same"):
        dx, dw = tensor.conv2d_backward(gouts[0], xs[0].astype(np.float64),
                                        ps[0].astype(np.float64), stride, padding)
        return [dx], [dw]


@register("mixed_depthwise")
class MixedDepthwise:
    """Equal channel groups, each correlated with its own kernel size."""

    @staticmethod
    def forward(xs, ps, padding="same"):
        x = xs[0]
        parts = np.split(x, len(ps), axis=1)
        out = [tensor.depthwise_conv2d(part, k, 1, padding) for part, k in zip(parts, ps)]
        return (np.concatenate(out, axis=1),), {}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec, padding="same"):
        x = xs[0].astype(np.float64)
        parts = np.split(x, len(ps), axis=1)
        gparts = np.split(gouts[0], len(ps), axis=1)
        dxs, dks = [], []
        for part, g, k in zip(parts, gparts, ps):
            dx, dk = tensor.depthwise_conv2d_backward(g, part, k.astype(np.float64), 1, padding)
            dxs.append(dx)
            dks.append(dk)
        return [np.concatenate(dxs, axis=1)], dks


@register("add")
class Add:
    @staticmethod
    def forward(xs, ps, weights=None):
        weights = weights or (1.0,) * len(xs)
        acc = np.zeros(xs[0].shape, dtype=np.float64)
        for x, w in zip(xs, weights):
            acc += w * np.asarray(x, np.float64)
        return (acc.astype(tensor.storage_dtype(xs[0])),), {}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec, weights=None):
        weights = weights or (1.0,) * len(xs)
        return [w * gouts[0] for w in weights], []


@register("lif")
class Lif:
    """Outputs ``(spikes, potential_after_reset)``; inputs ``(current[, previous potential])``.

    ``smooth`` (a slope) swaps the step function for a logistic spike in
    the forward pass and its exact derivative in the backward pass. In that
    mode the reset path is differentiated as well, so the whole step is
    smooth and checkable against finite differences.
    """

    @staticmethod
    def forward(xs, ps, cfg: LifConfig, smooth=None):
        current = xs[0]
        prev = xs[1] if len(xs) > 1 else np.full(current.shape, cfg.v_rest, current.dtype)
        v = integrate(prev, current, cfg)
        if smooth is None:
            spikes, v_after = fire(v, cfg)
        else:
            s = sigmoid_spike(v.astype(np.float64) - cfg.v_threshold, smooth)
            spikes = s.astype(v.dtype)
            v_after = (v - s * (v - cfg.v_rest)).astype(v.dtype)
        return (spikes, v_after), {"v": v}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec, cfg: LifConfig, smooth=None):
        v = saved["v"].astype(np.float64)
        g_spike = _zeros_if_none(gouts[0], v)
        g_after = gouts[1]
        x = v - cfg.v_threshold
        if smooth is None:
            dv = g_spike * surrogate_grad(x, spec).astype(np.float64)
            if g_after is not None:
                spiked = v >= cfg.v_threshold
                dv = dv + np.where(spiked, 0.0, g_after)
        else:
            s = sigmoid_spike(x, smooth)
            ds = sigmoid_spike_grad(x, smooth)
            dv = g_spike * ds
            if g_after is not None:
                dv = dv + g_after * ((1.0 - s) - (v - cfg.v_rest) * ds)
        grads = [dv]
        if len(xs) > 1:
            grads.append(cfg.decay * dv)
        return grads, []


@register("maxpool")
class MaxPool:
    @staticmethod
    def forward(xs, ps, k=2):
        out, idx = tensor.max_pool2d(xs[0], k)
        return (out,), {"argmax": idx}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec, k=2):
        return [tensor.max_pool2d_backward(gouts[0], saved["argmax"], xs[0].shape, k)], []


@register("integrate")
class Integrate:
    """Non-spiking readout: time-averaged fully connected membrane potential.

    Inputs are the per-step spike maps [N, C, H, W]; the single parameter is
    the readout matrix [num_classes, C*H*W].
    """

    @staticmethod
    def forward(xs, ps):
        n = xs[0].shape[0]
        total = np.zeros((n, ps[0].shape[1]), dtype=np.float64)
        for x in xs:
            total += x.reshape(n, -1)
        logits = total @ ps[0].astype(np.float64).T / len(xs)
        return (tensor.check_finite(logits.astype(tensor.storage_dtype(ps[0])), "logits"),), {}

    @staticmethod
    def backward(gouts, xs, ps, saved, spec):
        g = gouts[0]
        n = xs[0].shape[0]
        steps = len(xs)
        total = np.zeros((n, ps[0].shape[1]), dtype=np.float64)
        for x in xs:
            total += x.reshape(n, -1)
        dw = g.T @ total / steps
        dx = (g @ ps[0].astype(np.float64) / steps).reshape(xs[0].shape)
        return [dx] * steps, [dw]
