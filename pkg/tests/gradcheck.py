"""Finite-difference gradient checks for single operations and whole networks.

Every check runs in float64 and compares the tape's gradients with central
differences over the same coordinates; the error is the norm-based relative
error over all checked coordinates of one trial.  Coordinates whose step
crosses a ReLU or max-pool kink are skipped (see ``fd.KinkProbe``).
"""

import numpy as np

from fd import H, KinkProbe, relative_error

from lczlab import ops
from lczlab.data import LabelSpace
from lczlab.models import ModelSpec, build
from lczlab.tensor import Tape, Tensor

F64 = np.float64


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    # a fixed random projection makes every output element matter
    return ops.sum_all(ops.mul(out, Tensor(weights, dtype=F64)))


def op_case(name: str, rng: np.random.Generator):
    """(function of tensors, list of input arrays) for operation ``name``."""
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    if name == "add":
        return (lambda a, b: ops.add(a, b)), [r(2, 3, 4), r(3, 1)]
    if name == "mul":
        return (lambda a, b: ops.mul(a, b)), [r(2, 3, 4), r(1, 4)]
    if name == "elementwise_mul":
        return (lambda a, b: ops.elementwise_mul(a, b)), [r(2, 2, 3, 3), r(2, 2, 3, 3)]
    if name == "scale":
        return (lambda a: ops.scale(a, -1.7)), [r(4, 5)]
    if name == "relu":
        return (lambda a: ops.relu(a)), [r(2, 2, 4, 4)]
    if name == "reshape":
        return (lambda a: ops.reshape(a, (6, 4))), [r(2, 3, 4)]
    if name == "permute":
        return (lambda a: ops.permute(a, (2, 0, 1))), [r(2, 3, 4)]
    if name == "concat_channels":
        return (lambda a, b: ops.concat_channels([a, b])), [r(2, 2, 3, 3), r(2, 1, 3, 3)]
    if name == "take_channels":
        return (lambda a: ops.take_channels(a, [3, 0, 2])), [r(2, 4, 2, 3)]
    if name == "matmul":
        return (lambda a, b: ops.matmul(a, b)), [r(2, 3, 4), r(2, 4, 5)]
    if name == "dense":
        return (lambda x, w, b: ops.dense(x, w, b)), [r(2, 3, 4), r(4, 5), r(5)]
    if name == "softmax":
        return (lambda a: ops.softmax(a, axis=-1)), [r(4, 6)]
    if name == "conv2d_same":
        return (lambda x, k, b: ops.conv2d(x, k, b, "same")), [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)]
    if name == "conv2d_valid":
        return (lambda x, k, b: ops.conv2d(x, k, b, "valid")), [r(1, 2, 5, 5), r(2, 2, 3, 3), r(2)]
    if name == "maxpool2d":
        return (lambda a: ops.maxpool2d(a, 2)), [r(1, 2, 4, 5)]
    if name == "global_avg_pool":
        return (lambda a: ops.global_avg_pool(a)), [r(2, 3, 3, 3)]
    if name == "upsample_nearest":
        return (lambda a: ops.upsample_nearest(a, 2)), [r(1, 2, 3, 3)]
    if name == "batchnorm2d_train":
        rm, rv = np.zeros(2), np.ones(2)
        return (
            lambda x, g, b: ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), "train")
        ), [r(2, 2, 3, 3), 1 + 0.3 * r(2), r(2)]
    if name == "batchnorm2d_infer":
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
        return (lambda x, g, b: ops.batchnorm2d(x, g, b, rm, rv, "infer")), [r(2, 2, 3, 3), r(2), r(2)]
    if name == "spatial_dropout":
        seed = int(rng.integers(1 << 31))
        return (
            lambda a: ops.spatial_dropout(a, 0.3, "train", np.random.default_rng(seed))
        ), [r(2, 4, 2, 3)]
    if name == "multi_head_attention":
        keys = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        arrays = [r(1, 4, 8), r(1, 4, 8)] + [0.5 * r(8, 8) if k[0] == "w" else 0.5 * r(8) for k in keys]

        def fn(q, kv, *p):
            return ops.multi_head_attention(q, kv, 2, dict(zip(keys, p)))

        return fn, arrays
    if name == "cross_entropy_loss":
        y = ops.one_hot(rng.integers(0, 5, size=4), 5, dtype=F64)
        return (lambda z: ops.cross_entropy_loss(ops.softmax(z, axis=-1), y)), [r(4, 5)]
    raise KeyError(name)


OPS = (
    "add", "mul", "elementwise_mul", "scale", "relu", "reshape", "permute",
    "concat_channels", "take_channels", "matmul", "dense", "softmax",
    "conv2d_same", "conv2d_valid", "maxpool2d", "global_avg_pool", "upsample_nearest",
    "batchnorm2d_train", "batchnorm2d_infer", "spatial_dropout",
    "multi_head_attention", "cross_entropy_loss",
)


def check_op(name: str, seed: int) -> tuple[float, int]:
    """(relative error, skipped coordinates) over every input element."""
    rng = np.random.default_rng(seed)
    fn, arrays = op_case(name, rng)
    weights = np.random.default_rng([seed, 99]).normal(size=fn(*[Tensor(a, dtype=F64) for a in arrays]).shape)

    def loss(tensors):
        out = fn(*tensors)
        return out if out.ndim == 0 else _weighted_sum(out, weights)

    tensors = [Tensor(a, requires_grad=True, dtype=F64) for a in arrays]
    with Tape() as tape:
        value = loss(tensors)
    tape.backward(value)
    analytic, numeric, skipped = [], [], 0

    def f():
        return loss(tensors).item()  # no tape is active, so nothing is recorded

    with KinkProbe() as probe:
        for t in tensors:
            for index in np.ndindex(t.shape):
                d = probe.checked_difference(f, t.data, index, H)
                if d is None:
                    skipped += 1
                    continue
                analytic.append(t.grad[index])
                numeric.append(d)
    return relative_error(analytic, numeric), skipped


def check_network(variant: str, seed: int, size: int = 8, batch: int = 2, coords: int = 24, band_grouping=False):
    """(relative error, skipped) over ``coords`` random parameter coordinates of a full network."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(variant, band_grouping=band_grouping, label_space=LabelSpace.original(4))
    net = build(spec, seed=seed, dtype=F64, input_size=size)
    sar = rng.normal(size=(batch, 8, size, size))
    msi = rng.normal(size=(batch, 10, size, size))
    y = ops.one_hot(rng.integers(0, 4, size=batch), 4, dtype=F64)

    def loss():
        net.reseed(seed)
        return net.loss(sar, msi, y)

    with Tape() as tape:
        value = loss()
    tape.backward(value)
    params = net.parameters()
    analytic, numeric, skipped = [], [], 0
    with KinkProbe() as probe:
        while len(analytic) < coords and skipped < 20 * coords:
            p = params[rng.integers(len(params))]
            index = np.unravel_index(rng.integers(p.data.size), p.shape)
            d = probe.checked_difference(lambda: loss().item(), p.data, index, H)
            if d is None:
                skipped += 1
                continue
            analytic.append(p.grad[index])
            numeric.append(d)
    if len(analytic) < coords:
        return float("inf"), skipped
    return relative_error(analytic, numeric), skipped
