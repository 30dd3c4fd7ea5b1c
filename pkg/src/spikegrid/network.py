"""SNN-SWMR network description, parameter initialisation and forward pass.

Default layout for a 17x17x30 patch::

    stem    3x3 SConv        17x17x30  -> 17x17x64
    swmr1   2 SMC branches   17x17x64  -> 17x17x64   kernels (1,3) / (1,3)
    trans1  1x1 SConv        17x17x64  -> 17x17x128
    pool1   max 2            17x17x128 -> 8x8x128
    swmr2a  2 SMC branches   8x8x128   -> 8x8x128    kernels (1,3) / (3,5)
    swmr2b  2 SMC branches   8x8x128   -> 8x8x128    kernels (1,3) / (3,5)
    trans2  1x1 SConv        8x8x128   -> 8x8x256
    pool2   max 2            8x8x256   -> 4x4x256
    fc      time-averaged readout, 4096 -> num_classes
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tape
from .errors import ConfigError, ShapeError
from .layers import SmcSpec, SwmrSpec
from .neuron import LifConfig

KERNEL_MODES = {
    "mixed": (((1, 3),), ((1, 3), (3, 5))),
    "1,3": (((1, 3),), ((1, 3),)),
    "3,5": (((3, 5),), ((3, 5),)),
}


def branch_kernels(mode: str, width_factor: int):
    """Per-branch kernel groups for both SWMR stages; extra branches cycle the base list."""
    try:
        stage1, stage2 = KERNEL_MODES[mode]
    except KeyError:
        raise ConfigError(f"unknown kernel mode {mode!r}; choose from {sorted(KERNEL_MODES)}")
    if width_factor < 1:
        raise ConfigError("width_factor must be >= 1")
    return (tuple(stage1[i % len(stage1)] for i in range(width_factor)),
            tuple(stage2[i % len(stage2)] for i in range(width_factor)))


@dataclass(frozen=True)
class Layer:
    kind: str  # "sconv" | "swmr" | "pool" | "fc"
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    swmr: SwmrSpec = None


@dataclass(frozen=True)
class NetworkSpec:
    num_classes: int
    in_channels: int = 30
    patch_size: int = 17
    time_steps: int = 10
    channels: tuple = (64, 128, 256)
    stem_kernel: int = 3
    swmr1_branches: tuple = ((1, 3), (1, 3))
    swmr2_branches: tuple = ((1, 3), (3, 5))
    swmr2_blocks: int = 2
    pool_kernel: int = 2
    lif: LifConfig = field(default_factory=LifConfig)
    shortcut_gain: float = None
    init_gain: float = 2.0

    def __post_init__(self):
        to_tuple = lambda b: tuple(tuple(int(k) for k in g) for g in b)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "swmr1_branches", to_tuple(self.swmr1_branches))
        object.__setattr__(self, "swmr2_branches", to_tuple(self.swmr2_branches))
        if isinstance(self.lif, dict):
            object.__setattr__(self, "lif", LifConfig(**self.lif))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        if len(self.channels) != 3:
            raise ConfigError("channel plan must list three widths")
        if len(self.swmr1_branches) != len(self.swmr2_branches):
            raise ConfigError("both SWMR stages must have the same width factor")
        if not self.swmr1_branches:
            raise ConfigError("width_factor must be >= 1")
        if self.final_size < 1:
            raise ConfigError(f"patch_size {self.patch_size} too small for two pooling stages")
        self.layers()  # validates channel grouping

    @classmethod
    def build(cls, num_classes, width_factor=2, kernels="mixed", **kw):
        s1, s2 = branch_kernels(kernels, width_factor)
        return cls(num_classes=num_classes, swmr1_branches=s1, swmr2_branches=s2, **kw)

    @property
    def width_factor(self) -> int:
        return len(self.swmr1_branches)

    @property
    def gain(self) -> float:
        if self.shortcut_gain is None:
            return self.lif.v_threshold - self.lif.v_rest
        return self.shortcut_gain

    @property
    def final_size(self) -> int:
        return self.patch_size // self.pool_kernel // self.pool_kernel

    def layers(self):
        c1, c2, c3 = self.channels

        def swmr(name, c, branches):
            return Layer("swmr", name, c, c, swmr=SwmrSpec(
                tuple(SmcSpec(g, c, c) for g in branches)))

        out = [Layer("sconv", "stem", self.in_channels, c1, self.stem_kernel),
               swmr("swmr1", c1, self.swmr1_branches),
               Layer("sconv", "trans1", c1, c2, 1),
               Layer("pool", "pool1", c2, c2, self.pool_kernel)]
        for i in range(self.swmr2_blocks):
            out.append(swmr(f"swmr2{chr(ord('a') + i)}", c2, self.swmr2_branches))
        out += [Layer("sconv", "trans2", c2, c3, 1),
                Layer("pool", "pool2", c3, c3, self.pool_kernel),
                Layer("fc", "fc", c3 * self.final_size ** 2, self.num_classes)]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lif"] = {k: (v.value if hasattr(v, "value") else v) for k, v in d["lif"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict):
        return cls(**d)

    def schema_hash(self) -> bytes:
        """Digest of everything that determines parameter names and shapes."""
        d = self.to_dict()
        for key in ("time_steps", "lif", "shortcut_gain", "init_gain"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()

    def spiking_layer_count(self) -> int:
        """Distinct LIF populations per time step."""
        n = 0
        for layer in self.layers():
            if layer.kind == "sconv":
                n += 1
            elif layer.kind == "swmr":
                n += layer.swmr.width_factor + 1
        return n


def param_shapes(net: NetworkSpec) -> dict:
    shapes = {}
    for layer in net.layers():
        if layer.kind == "sconv":
            shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels,
                                              layer.kernel, layer.kernel)
        elif layer.kind == "swmr":
            for b, smc in enumerate(layer.swmr.branch_specs):
                for g, k in enumerate(smc.group_kernel_sizes):
                    shapes[f"{layer.name}.branch{b}.depthwise{g}"] = (smc.group_size, k, k)
                shapes[f"{layer.name}.branch{b}.pointwise"] = (smc.out_channels,
                                                               smc.in_channels, 1, 1)
        elif layer.kind == "fc":
            shapes["fc.weight"] = (layer.out_channels, layer.in_channels)
    return shapes


def init_params(net: NetworkSpec, rng: np.random.Generator) -> dict:
    """Fan-in scaled uniform init: U(-b, b) with b = init_gain * sqrt(3 / fan_in)."""
    params = {}
    for name, shape in param_shapes(net).items():
        fan_in = int(np.prod(shape[1:]))
        bound = net.init_gain * np.sqrt(3.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def layer_shapes(net: NetworkSpec):
    """Row-by-row ``(name, operation, (H, W, C) in, (H, W, C) out)`` audit table."""
    rows = []
    h = net.patch_size
    for layer in net.layers():
        if layer.kind == "sconv":
            k = layer.kernel
            rows.append((layer.name, f"SConv k={k}x{k}, s=1", (h, h, layer.in_channels),
                         (h, h, layer.out_channels)))
        elif layer.kind == "swmr":
            c = layer.in_channels
            kernels = [smc.group_kernel_sizes for smc in layer.swmr.branch_specs]
            rows.append((layer.name, f"SWMR SDC kernels {kernels}", (h, h, c), (h, h, c)))
            rows.append((f"{layer.name}.spc", "SPC k=1x1, s=1", (h, h, c), (h, h, c)))
        elif layer.kind == "pool":
            ho = h // layer.kernel
            rows.append((layer.name, f"Pooling k={layer.kernel}", (h, h, layer.in_channels),
                         (ho, ho, layer.in_channels)))
            h = ho
        else:
            rows.append(("fc", "Fully connect", (h, h, net.channels[-1]), (net.num_classes,)))
    return rows


def _as_batched_train(current, net: NetworkSpec):
    x = np.asarray(current)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5:
        raise ShapeError(f"input must be [T,C,H,W] or [T,N,C,H,W], got {x.shape}")
    expect = (net.in_channels, net.patch_size, net.patch_size)
    if x.shape[2:] != expect:
        raise ShapeError(f"input sample shape {x.shape[2:]} != {expect}")
    return x


def forward_record(net: NetworkSpec, params: dict, current, smooth=None, record=True):
    """Run the unrolled network and return ``(logits [N, K], tape)``.

    ``current`` is the direct-coded input train ``[T, N, C, H, W]`` (or a
    single sample ``[T, C, H, W]``). ``smooth`` replaces every spike with a
    logistic of that slope (differentiable twin, for gradient checking).
    """
    x = _as_batched_train(current, net)
    tape = Tape(params, record=record)
    potentials = {}
    readout = []
    layers = net.layers()
    gain = net.gain

    def lif(name, cur, t):
        prev = potentials.get(name)
        ins = (cur,) if prev is None else (cur, prev)
        spikes, after = tape.apply("lif", ins, t=t, cfg=net.lif, smooth=smooth)
        potentials[name] = after
        return spikes

    for t in range(x.shape[0]):
        h = tape.leaf(x[t])
        for layer in layers:
            if layer.kind == "sconv":
                cur = tape.apply("conv2d", (h,), (f"{layer.name}.weight",), t=t)
                h = lif(layer.name, cur, t)
            elif layer.kind == "swmr":
                branch_currents = []
                for b, smc in enumerate(layer.swmr.branch_specs):
                    pre = f"{layer.name}.branch{b}"
                    names = tuple(f"{pre}.depthwise{g}"
                                  for g in range(len(smc.group_kernel_sizes)))
                    d = tape.apply("mixed_depthwise", (h,), names, t=t)
                    s = lif(f"{pre}.sdc", d, t)
                    branch_currents.append(
                        tape.apply("conv2d", (s,), (f"{pre}.pointwise",), t=t))
                weights = (1.0,) * len(branch_currents) + (gain,)
                merged = tape.apply("add", (*branch_currents, h), t=t, weights=weights)
                h = lif(f"{layer.name}.spc", merged, t)
            elif layer.kind == "pool":
                h = tape.apply("maxpool", (h,), t=t, k=layer.kernel)
        readout.append(h)
        if not record:
            tape.retain(list(potentials.values()) + readout)

    tape.output = tape.apply("integrate", tuple(readout), ("fc.weight",), t=x.shape[0] - 1)
    return tape[tape.output], tape


def predict_logits(net: NetworkSpec, params: dict, patches, batch_size: int = 64):
    """Logits for a stack of patches ``[N, C, s, s]`` (forward only)."""
    from .data import encode_direct

    patches = np.asarray(patches)
    out = []
    for start in range(0, len(patches), batch_size):
        batch = patches[start:start + batch_size]
        logits, _ = forward_record(net, params, encode_direct(batch, net.time_steps),
                                   record=False)
        out.append(logits)
    if not out:
        return np.zeros((0, net.num_classes), dtype=np.float32)
    return np.concatenate(out, axis=0)
