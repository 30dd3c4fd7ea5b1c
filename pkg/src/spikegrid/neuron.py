"""LIF membrane dynamics, spike generation and surrogate derivatives."""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import check_finite, storage_dtype


class ResetMode(str, enum.Enum):
    HARD_TO_REST = "hard_to_rest"


@dataclass(frozen=True)
class LifConfig:
    """Discrete LIF parameters.

    Each step the potential leaks toward ``v_rest`` by the factor ``decay``
    and integrates the input current; a neuron whose potential reaches
    ``v_threshold`` emits a spike and is reset to ``v_rest``.
    """

    v_threshold: float = 1.0
    v_rest: float = 0.0
    decay: float = 0.5
    reset_mode: ResetMode = ResetMode.HARD_TO_REST

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if not self.v_threshold > self.v_rest:
            raise ConfigError("v_threshold must exceed v_rest")
        object.__setattr__(self, "reset_mode", ResetMode(self.reset_mode))


@dataclass
class LifState:
    v: np.ndarray

    @classmethod
    def at_rest(cls, shape, cfg: LifConfig, dtype=np.float32):
        return cls(np.full(shape, cfg.v_rest, dtype=dtype))


class SurrogateKind(str, enum.Enum):
    AAD_ARCSIN = "aad_arcsin"
    AAD_ARCCOS = "aad_arccos"
    RECTANGULAR = "rectangular"


@dataclass(frozen=True)
class SurrogateSpec:
    """Which approximate spike derivative to use, and its window half-width.

    ``window`` bounds the support: the surrogate is zero wherever
    ``|v - v_th| >= window``.
    """

    kind: SurrogateKind = SurrogateKind.AAD_ARCSIN
    window: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SurrogateKind(self.kind))
        if not 0.0 < self.window <= 1.0:
            raise ConfigError(f"surrogate window must lie in (0, 1], got {self.window}")


def heaviside(x) -> np.ndarray:
    """Unit step with H(0) = 1."""
    x = np.asarray(x)
    return (x >= 0).astype(storage_dtype(x))


def surrogate_grad(x, spec: SurrogateSpec = SurrogateSpec()) -> np.ndarray:
    """Stand-in for dO/dV evaluated at ``x = v - v_th``.

    The AAD kinds return ``|1 - |arcsin(x)||`` (or the equivalent arccos
    form) inside the window; the argument is clamped to [-1, 1] first.
    """
    x = np.asarray(x)
    xd = x.astype(np.float64)
    inside = np.abs(xd) < spec.window
    xc = np.clip(xd, -1.0, 1.0)
    if spec.kind is SurrogateKind.AAD_ARCSIN:
        val = np.abs(1.0 - np.abs(np.arcsin(xc)))
    elif spec.kind is SurrogateKind.AAD_ARCCOS:
        val = np.abs(1.0 - np.abs(np.arccos(xc) - np.pi / 2))
    else:
        val = np.full_like(xd, 1.0 / (2.0 * spec.window))
    return np.where(inside, val, 0.0).astype(storage_dtype(x))


def sigmoid_spike(x, slope: float) -> np.ndarray:
    """Smooth spike used by the differentiable twin network (float64)."""
    return 0.5 * (1.0 + np.tanh(0.5 * slope * np.asarray(x, dtype=np.float64)))


def sigmoid_spike_grad(x, slope: float) -> np.ndarray:
    s = sigmoid_spike(x, slope)
    return slope * s * (1.0 - s)


def integrate(v_prev, current, cfg: LifConfig) -> np.ndarray:
    """Leak-and-integrate half of the update (no threshold, no reset)."""
    dtype = storage_dtype(np.asarray(current))
    v = np.array(v_prev, dtype=np.float64)
    if cfg.v_rest != 0.0:  # subtracting/adding 0.0 is exact, so skip the passes
        v -= cfg.v_rest
    v *= cfg.decay
    if cfg.v_rest != 0.0:
        v += cfg.v_rest
    v += current
    return check_finite(v.astype(dtype), "membrane potential")


def threshold_for(dtype, v_threshold: float):
    """Smallest value of ``dtype`` that is >= ``v_threshold``.

    Comparing a stored potential against it gives exactly the same answer as
    comparing the potential, widened to float64, against ``v_threshold``.
    """
    th = np.dtype(dtype).type(v_threshold)
    if float(th) < v_threshold:  # compare in float64; a Python float would be demoted
        th = np.nextafter(th, np.dtype(dtype).type(np.inf))
    return th


def fire(v, cfg: LifConfig):
    """Threshold and hard reset. Returns ``(spikes, v_after_reset)``.

    The comparison is exact: a float32 state and a float64 threshold never
    disagree by rounding.
    """
    fired = v >= threshold_for(v.dtype, cfg.v_threshold)
    spikes = fired.astype(v.dtype)
    v_after = np.where(fired, v.dtype.type(cfg.v_rest), v)
    return spikes, v_after


def lif_step(state: LifState, input_current, cfg: LifConfig = LifConfig()):
    """Advance one time step. Returns ``(spikes, new_state)``."""
    input_current = np.asarray(input_current)
    if state.v.shape != input_current.shape:
        raise ShapeError(
            f"state shape {state.v.shape} != input current shape {input_current.shape}")
    v = integrate(state.v, input_current, cfg)
    spikes, v_after = fire(v, cfg)
    return spikes, LifState(v_after)
