"""Finite-difference verification of backward passes.

Runs in float64: the analytic gradient of a scalar-valued function is
compared against central differences at randomly chosen coordinates of
each input tensor. Reports the maximum relative error seen.
"""

from dataclasses import dataclass, field

import numpy as np

from .ops import _attach
from .tensor import Tensor, no_grad


def linear_probe(t, weights):
    """Scalarize a tensor as sum(t * weights): smooth, so finite differences
    of any op composed with it never straddle a loss-side kink."""
    w = np.asarray(weights, dtype=t.values.dtype)
    out = Tensor(np.float64(np.sum(t.values.astype(np.float64) * w)))

    def backward(gout):
        if t.requires_grad:
            t.accumulate_grad(w * t.values.dtype.type(float(gout)))

    return _attach(out, [t], backward)


@dataclass
class GradcheckReport:
    max_rel_err: float = 0.0
    n_coords: int = 0
    worst: tuple = ()
    per_tensor: dict = field(default_factory=dict)

    def ok(self, tolerance):
        return self.max_rel_err < tolerance


def _away_from_zero(rng, shape, lo=0.3, hi=1.3):
    """Random values whose magnitudes stay clear of the origin, so kinked
    functions (absolute value, leaky slope switch) cannot cross their
    corner inside a finite-difference step."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def gradcheck(fn, tensors, h=1e-3, coords_per_tensor=50, rng=None, names=None):
    """Check d fn / d tensors against central differences.

    fn: nullary callable returning a scalar Tensor built from `tensors`
    (float64 leaves with requires_grad=True). Coordinates are sampled
    without replacement per tensor, capped at the tensor size.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = names or [f"t{i}" for i in range(len(tensors))]
    for t in tensors:
        if t.values.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("gradcheck inputs must require gradients")
        t.zero_grad()

    loss = fn()
    if loss.shape != ():
        raise ValueError("gradcheck target must be scalar")
    loss.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in tensors]

    report = GradcheckReport()
    for t, name, a in zip(tensors, names, analytic):
        flat = t.values.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        worst_t = 0.0
        for c in picks:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                fp = float(fn().values)
            flat[c] = orig - h
            with no_grad():
                fm = float(fn().values)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            ana = float(a.reshape(-1)[c])
            denom = max(abs(ana), abs(numeric), 1e-6)
            rel = abs(ana - numeric) / denom
            report.n_coords += 1
            if rel > worst_t:
                worst_t = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (name, int(c), ana, numeric)
        report.per_tensor[name] = worst_t
    return report

def _leaf(rng, shape, away=False):
    vals = _away_from_zero(rng, shape) if away else rng.normal(0.0, 1.0, shape)
    return Tensor(np.asarray(vals, dtype=np.float64), requires_grad=True)


def _probe_check(rng, forward, tensors, names):
    """Wrap a tensor-valued forward in a smooth random linear scalarizer."""
    with no_grad():
        out_shape = forward().shape
    w = rng.normal(0.0, 1.0, out_shape)
    return (lambda: linear_probe(forward(), w)), tensors, names


def _conv_case(rng, transposed):
    from . import ops

    ci = int(rng.integers(1, 3))
    co = int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k))
    d = tuple(int(rng.integers(k + 1, k + 5)) for _ in range(3))
    x = _leaf(rng, (1, ci, *d))
    w = _leaf(rng, (co, ci, k, k, k))
    b = _leaf(rng, (co,))
    op = ops.tconv3d if transposed else ops.conv3d
    return _probe_check(
        rng,
        lambda: op(x, w, b, stride=(s, s, s), padding=(p, p, p)),
        [x, w, b], ["x", "w", "b"],
    )


def _op_cases(rng, index):
    """One randomized check per differentiable op; index varies the draw."""
    from . import ops

    del index
    cases = {}
    cases["conv3d"] = _conv_case(rng, transposed=False)
    cases["tconv3d"] = _conv_case(rng, transposed=True)

    c = int(rng.integers(1, 4))
    d = tuple(int(rng.integers(3, 7)) for _ in range(3))
    x = _leaf(rng, (1, c, *d))
    gamma = _leaf(rng, (c,))
    beta = _leaf(rng, (c,))
    cases["instance_norm"] = _probe_check(
        rng, lambda: ops.instance_norm(x, gamma, beta), [x, gamma, beta],
        ["x", "gamma", "beta"],
    )

    xr = _leaf(rng, (1, 2, 4, 5, 4), away=True)
    cases["leaky_relu"] = _probe_check(rng, lambda: ops.leaky_relu(xr), [xr], ["x"])

    a = _leaf(rng, (1, 2, 3, 4, 3))
    b = _leaf(rng, (1, 2, 3, 4, 3))
    cases["add"] = _probe_check(rng, lambda: ops.add(a, b), [a, b], ["a", "b"])

    a2 = _leaf(rng, (1, 2, 3, 3, 4))
    b2 = _leaf(rng, (1, 3, 3, 3, 4))
    cases["concat_channels"] = _probe_check(
        rng, lambda: ops.concat_channels(a2, b2), [a2, b2], ["a", "b"]
    )

    xs = _leaf(rng, (1, 2, 4, 3, 3))
    factor = float(rng.uniform(0.5, 2.0))
    cases["scale"] = _probe_check(rng, lambda: ops.scale(xs, factor), [xs], ["x"])

    xu = _leaf(rng, (1, 2, *(int(rng.integers(2, 5)) for _ in range(3))))
    cases["trilinear_upsample2x"] = _probe_check(
        rng, lambda: ops.trilinear_upsample2x(xu), [xu], ["x"]
    )

    pred = _leaf(rng, (1, 1, 4, 4, 4))
    target = pred.values - _away_from_zero(rng, pred.shape)
    cases["l1_loss"] = ((lambda: ops.l1_loss(pred, target)), [pred], ["pred"])

    ncls = int(rng.integers(2, 5))
    logits = _leaf(rng, (1, ncls, 3, 4, 3))
    labels = rng.integers(0, ncls, size=(1, 3, 4, 3))
    cases["softmax_cross_entropy"] = (
        (lambda: ops.softmax_cross_entropy(logits, labels)), [logits], ["logits"]
    )
    return cases


def _network_case(rng, block, upsample, patch):
    from . import ops
    from .network import Network, NetworkSpec

    spec = NetworkSpec(levels=2, base_channels=2, block=block, upsample=upsample)
    net = Network(spec, seed=int(rng.integers(1 << 30))).astype(np.float64)
    x = _leaf(rng, (1, 1, *patch))
    with no_grad():
        y0, _ = net.forward(x)
    target = y0.values - _away_from_zero(rng, y0.shape, 0.5, 1.5)

    def fn():
        y, _ = net.forward(x)
        return ops.l1_loss(y, target)

    return fn, [x] + list(net.params.values()), ["x"] + list(net.params.keys())


NETWORK_VARIANTS = (
    ("plain", "transposed_conv", (4, 4, 4)),
    ("residual", "conv_trilinear", (4, 6, 4)),
    ("residual", "transposed_conv", (6, 4, 6)),
)


def standard_suite(seed=0, shapes_per_op=3, coords_per_tensor=20, net_coords=6,
                   net_h=1e-5):
    """Yield (name, GradcheckReport) for every differentiable op at several
    random shapes, then for composite two-level networks in each block and
    upsampling variant. The same seed always yields the same checks.

    Composite networks use a smaller finite-difference step: their losses
    include piecewise-linear activations, and a narrower step keeps the
    probes inside one linear piece while float64 still has headroom.
    """
    rng = np.random.default_rng(seed)
    for i in range(shapes_per_op):
        for op_name, (fn, tensors, names) in _op_cases(rng, i).items():
            rep = gradcheck(fn, tensors, coords_per_tensor=coords_per_tensor,
                            rng=rng, names=names)
            yield f"{op_name}[{i}]", rep
    for block, upsample, patch in NETWORK_VARIANTS:
        fn, tensors, names = _network_case(rng, block, upsample, patch)
        rep = gradcheck(fn, tensors, h=net_h, coords_per_tensor=net_coords,
                        rng=rng, names=names)
        yield f"network_{block}_{upsample}", rep
