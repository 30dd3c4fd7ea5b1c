"""Spiking layers over time-major spike trains ``[T, C, H, W]``.

These are the per-sample reference forms of the network's building blocks:
spiking convolution, spiking mixed convolution (grouped depthwise kernels of
different sizes followed by a pointwise mix), the width-mixed residual block,
pooling and the non-spiking readout. The batched training graph in
:mod:`spikegrid.network` is assembled from the same primitives.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .neuron import LifConfig, LifState, lif_step
from .tensor import conv2d, depthwise_conv2d, max_pool2d


@dataclass(frozen=True)
class SmcSpec:
    group_kernel_sizes: tuple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.group_kernel_sizes)
        object.__setattr__(self, "group_kernel_sizes", sizes)
        if not sizes:
            raise ConfigError("SMC needs at least one kernel group")
        if any(k < 1 or k % 2 == 0 for k in sizes):
            raise ConfigError(f"SMC kernel sizes must be odd and positive, got {sizes}")
        if self.in_channels % len(sizes):
            raise ConfigError(
                f"{self.in_channels} channels cannot be split into {len(sizes)} equal groups")

    @property
    def group_size(self) -> int:
        return self.in_channels // len(self.group_kernel_sizes)

    def group_slices(self):
        g = self.group_size
        return [slice(i * g, (i + 1) * g) for i in range(len(self.group_kernel_sizes))]


@dataclass(frozen=True)
class SwmrSpec:
    branch_specs: tuple

    def __post_init__(self):
        object.__setattr__(self, "branch_specs", tuple(self.branch_specs))
        if not self.branch_specs:
            raise ConfigError("SWMR needs at least one branch")
        c = self.branch_specs[0].in_channels
        for b in self.branch_specs:
            if b.in_channels != c or b.out_channels != c:
                raise ConfigError("every SWMR branch must preserve the channel count")

    @property
    def width_factor(self) -> int:
        return len(self.branch_specs)

    @property
    def channels(self) -> int:
        return self.branch_specs[0].in_channels


def _check_train(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be a [T,C,H,W] train, got shape {x.shape}")
    return x


def _run_lif(currents, cfg, state=None):
    state = state or LifState.at_rest(currents.shape[1:], cfg, currents.dtype)
    out = np.empty_like(currents)
    for t, current in enumerate(currents):
        out[t], state = lif_step(state, current, cfg)
    return out


def sconv_forward(input, weights, cfg: LifConfig = LifConfig(), state: LifState = None):
    """Convolve every step with ``weights`` and pass the currents through LIF."""
    x = _check_train(input)
    currents = np.stack([conv2d(xt, weights) for xt in x])
    return _run_lif(currents, cfg, state)


def mixed_depthwise(x, spec: SmcSpec, depthwise_weights):
    """Depthwise correlation with one kernel size per channel group (one step)."""
    if len(depthwise_weights) != len(spec.group_kernel_sizes):
        raise ConfigError("need one depthwise kernel tensor per group")
    outs = []
    for sl, k, w in zip(spec.group_slices(), spec.group_kernel_sizes, depthwise_weights):
        if w.shape != (spec.group_size, k, k):
            raise ShapeError(f"group kernel shape {w.shape} != {(spec.group_size, k, k)}")
        outs.append(depthwise_conv2d(x[sl], w))
    return np.concatenate(outs, axis=0)


def smc_forward(input, spec: SmcSpec, depthwise_weights, pointwise_weights,
                cfg: LifConfig = LifConfig(), lif_states=(None, None)):
    """Grouped depthwise conv -> LIF -> 1x1 conv -> LIF, step by step."""
    x = _check_train(input)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, SMC expects {spec.in_channels}")
    if pointwise_weights.shape[:2] != (spec.out_channels, spec.in_channels):
        raise ShapeError(f"pointwise weights {pointwise_weights.shape} do not match spec")
    sdc = _run_lif(np.stack([mixed_depthwise(xt, spec, depthwise_weights) for xt in x]),
                   cfg, lif_states[0])
    spc = np.stack([conv2d(st, pointwise_weights) for st in sdc])
    return _run_lif(spc, cfg, lif_states[1])


def swmr_forward(input, spec: SwmrSpec, branch_params, cfg: LifConfig = LifConfig(),
                 shortcut_gain=None):
    """Width-mixed residual block.

    ``branch_params`` holds ``(depthwise_weights, pointwise_weights)`` per
    branch. The merging neurons integrate the sum of every branch's
    pointwise current plus the input spikes scaled by ``shortcut_gain``
    (default ``v_threshold - v_rest``, enough for an input spike to fire
    the output on its own).
    """
    x = _check_train(input)
    if len(branch_params) != spec.width_factor:
        raise ConfigError(f"expected {spec.width_factor} branch parameter sets")
    if x.shape[1] != spec.channels:
        raise ConfigError(f"input has {x.shape[1]} channels, SWMR expects {spec.channels}")
    gain = cfg.v_threshold - cfg.v_rest if shortcut_gain is None else shortcut_gain
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    # branch currents first, shortcut last: same summation order as the network graph
    merged = np.zeros(x.shape, dtype=np.float64)
    for bspec, (dw, pw) in zip(spec.branch_specs, branch_params):
        sdc = _run_lif(np.stack([mixed_depthwise(xt, bspec, dw) for xt in x]), cfg)
        merged += np.stack([conv2d(st, pw) for st in sdc])
    merged += gain * x.astype(np.float64)
    return _run_lif(merged.astype(dtype), cfg)


def pool_forward(input, k: int = 2):
    x = _check_train(input)
    return np.stack([max_pool2d(xt, k)[0] for xt in x])


def output_integrate(input, fc_weights):
    """Time-averaged readout: ``sum_t W @ flatten(x_t) / T``."""
    x = _check_train(input)
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    if fc_weights.shape[1] != flat.shape[1]:
        raise ShapeError(f"readout expects {fc_weights.shape[1]} features, got {flat.shape[1]}")
    v_mem = fc_weights.astype(np.float64) @ flat.sum(axis=0)
    return (v_mem / x.shape[0]).astype(np.float32)
