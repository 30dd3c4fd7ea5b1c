"""Shared network builders and checks for the test modules."""

import numpy as np

from oracles import central_difference
from spikegrid.autograd import Tape
from spikegrid.neuron import LifConfig

CFG = LifConfig()

# per-layer (name, input HxWxC, output) of the default 17x17x30 network,
# 1x1 transition convolutions included
REFERENCE_LAYOUT = [
    ("stem", (17, 17, 30), (17, 17, 64)),
    ("swmr1", (17, 17, 64), (17, 17, 64)),
    ("swmr1.spc", (17, 17, 64), (17, 17, 64)),
    ("trans1", (17, 17, 64), (17, 17, 128)),
    ("pool1", (17, 17, 128), (8, 8, 128)),
    ("swmr2a", (8, 8, 128), (8, 8, 128)),
    ("swmr2a.spc", (8, 8, 128), (8, 8, 128)),
    ("swmr2b", (8, 8, 128), (8, 8, 128)),
    ("swmr2b.spc", (8, 8, 128), (8, 8, 128)),
    ("trans2", (8, 8, 128), (8, 8, 256)),
    ("pool2", (8, 8, 256), (4, 4, 256)),
    ("fc", (4, 4, 256), (9,)),
]


def two_layer_tape(params, x, steps, smooth):
    """conv 3x3 -> LIF -> conv 3x3 -> LIF -> readout, unrolled over ``steps``."""
    tape = Tape(params)
    p1 = p2 = None
    outs = []
    for t in range(steps):
        leaf = tape.leaf(x)
        c1 = tape.apply("conv2d", (leaf,), ("w1",), t=t)
        s1, p1 = tape.apply("lif", (c1,) if p1 is None else (c1, p1), t=t, cfg=CFG, smooth=smooth)
        c2 = tape.apply("conv2d", (s1,), ("w2",), t=t)
        s2, p2 = tape.apply("lif", (c2,) if p2 is None else (c2, p2), t=t, cfg=CFG, smooth=smooth)
        outs.append(s2)
    tape.output = tape.apply("integrate", tuple(outs), ("fc",))
    return tape


def fd_check(loss_of, params, grads, rng, per_param=12, h=1e-5):
    """Worst relative error between ``grads`` and central differences, sampled per tensor."""
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        num = np.array([central_difference(loss_of, flat, i, h) for i in idx])
        ana = grads[name].reshape(-1)[idx]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst
