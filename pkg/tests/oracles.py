"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or closed forms and shares no
code with the package beyond the ``Tensor`` container.
"""

from __future__ import annotations

import itertools

import numpy as np

from cascadeseg import autodiff as ad

FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f, arrays, i, eps=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(*arrays)
        x[idx] = old - eps
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def gradcheck(fn, arrays, rtol=1e-4, seed=0):
    """Compare autodiff and central-difference gradients of ``sum(R * fn(...))``.

    Returns the worst ratio |analytic - numeric| / (rtol * scale), where scale is
    the largest numeric gradient magnitude for that input (so values <= 1 pass).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.precision(np.float64):
        probe = fn(*[ad.tensor(a) for a in arrays])
        r = np.random.default_rng(seed).normal(size=probe.shape)

        def scalar(*arrs):
            return float(ad.weighted_sum(fn(*[ad.tensor(a) for a in arrs]), r).data)

        ts = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
        ad.weighted_sum(fn(*ts), r).backward()
        worst = 0.0
        for i, t in enumerate(ts):
            num = numeric_grad(scalar, arrays, i)
            ana = t.grad if t.grad is not None else np.zeros_like(num)
            scale = max(np.abs(num).max(), 1e-8)
            worst = max(worst, float(np.abs(ana - num).max() / (rtol * scale)))
    return worst


# ---------------------------------------------------------------------------
# layer oracles


def same_pad(n, k, s):
    out = (n + s - 1) // s
    total = max((out - 1) * s + k - n, 0)
    return total // 2


def naive_conv(x, k, b=None, stride=1, padding="same"):
    """Loop cross-correlation, zero padding split low/high with the low side rounded down."""
    B, Cin = x.shape[:2]
    Cout = k.shape[0]
    ks = k.shape[2:]
    sp = x.shape[2:]
    nd = len(sp)
    st = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    if padding == "same":
        lo = [same_pad(n, kk, s) for n, kk, s in zip(sp, ks, st)]
        out_sp = [(n + s - 1) // s for n, s in zip(sp, st)]
    else:
        lo = [0] * nd
        out_sp = [(n - kk) // s + 1 for n, kk, s in zip(sp, ks, st)]
    out = np.zeros((B, Cout) + tuple(out_sp))
    for bi, co in itertools.product(range(B), range(Cout)):
        for o in itertools.product(*(range(n) for n in out_sp)):
            acc = 0.0 if b is None else b[co]
            for ci in range(Cin):
                for kk in itertools.product(*(range(n) for n in ks)):
                    pos = [oi * s + ki - l for oi, s, ki, l in zip(o, st, kk, lo)]
                    if all(0 <= p < n for p, n in zip(pos, sp)):
                        acc += x[(bi, ci) + tuple(pos)] * k[(co, ci) + kk]
            out[(bi, co) + o] = acc
    return out


def naive_maxpool(x, w, s, padding="valid"):
    sp = x.shape[2:]
    nd = len(sp)
    w, s = (w,) * nd, (s,) * nd
    if padding == "same":
        lo = [same_pad(n, ww, ss) for n, ww, ss in zip(sp, w, s)]
        out_sp = [(n + ss - 1) // ss for n, ss in zip(sp, s)]
    else:
        lo = [0] * nd
        out_sp = [(n - ww) // ss + 1 for n, ww, ss in zip(sp, w, s)]
    out = np.zeros(x.shape[:2] + tuple(out_sp))
    for bc in itertools.product(range(x.shape[0]), range(x.shape[1])):
        for o in itertools.product(*(range(n) for n in out_sp)):
            best = -np.inf
            for kk in itertools.product(*(range(n) for n in w)):
                pos = [oi * ss + ki - l for oi, ss, ki, l in zip(o, s, kk, lo)]
                if all(0 <= p < n for p, n in zip(pos, sp)):
                    best = max(best, x[bc + tuple(pos)])
            out[bc + o] = best
    return out


def naive_upsample(x, f):
    """Linear interpolation with half-pixel centres, edge-clamped, one voxel at a time."""
    sp = x.shape[2:]
    out = np.zeros(x.shape[:2] + tuple(n * f for n in sp))
    for o in itertools.product(*(range(n * f) for n in sp)):
        terms = []
        for oi, n in zip(o, sp):
            src = min(max((oi + 0.5) / f - 0.5, 0.0), n - 1.0)
            i0 = int(np.floor(src))
            i1 = min(i0 + 1, n - 1)
            a = src - i0
            terms.append(((i0, 1 - a), (i1, a)))
        val = 0.0
        for combo in itertools.product(*terms):
            wgt = np.prod([c[1] for c in combo])
            val = val + wgt * x[(slice(None), slice(None)) + tuple(c[0] for c in combo)]
        out[(slice(None), slice(None)) + o] = val
    return out


# ---------------------------------------------------------------------------
# vote tree


def vote_oracle(v0, v1, v2, v3, tt, tc, te, inclusive=True):
    """Straight-line transcription of the three-node decision tree, exact rationals."""
    from fractions import Fraction as Fr

    def ok(num, den, t):
        p = Fr(num, den)
        t = Fr(t).limit_denominator(10**9)
        return p >= t if inclusive else p > t

    n = v0 + v1 + v2 + v3
    if not ok(v1 + v2 + v3, n, tt):
        return 0
    if not ok(v1 + v3, v1 + v2 + v3, tc):
        return 2
    if not ok(v3, v1 + v3, te):
        return 1
    return 3


def compositions(n, parts=4):
    """All tuples of ``parts`` non-negative integers summing to ``n``."""
    return [c for c in itertools.product(range(n + 1), repeat=parts) if sum(c) == n]


# ---------------------------------------------------------------------------
# receptive field chains (hand-derived, see each comment)

RF_CHAINS = [
    # single 3x3x3 conv: 1 + 2 = 3
    ([("conv", 3, 1)], 3),
    # conv3 -> pool2/2 -> conv3: 3 -> 4 -> 4 + 2*2 = 8
    ([("conv", 3, 1), ("pool", 2, 2), ("conv", 3, 1)], 8),
    # conv5 -> conv3: 5 -> 7
    ([("conv", 5, 1), ("conv", 3, 1)], 7),
    # conv3 -> pool3/2 -> conv3 -> pool2/2 -> conv3:
    # 3 -> 5 (jump 2) -> 9 -> 11 (jump 4) -> 19
    ([("conv", 3, 1), ("pool", 3, 2), ("conv", 3, 1), ("pool", 2, 2), ("conv", 3, 1)], 19),
    # strided conv3/2 -> conv3 -> conv1: 3 (jump 2) -> 7 -> 7
    ([("conv", 3, 2), ("conv", 3, 1), ("conv", 1, 1)], 7),
]


def rf_oracle(chain):
    rf, jump = 1, 1
    for _, k, s in chain:
        rf += (k - 1) * jump
        jump *= s
    return rf


# ---------------------------------------------------------------------------
# gradient-check cases: name -> (builder(rng) -> (fn, arrays), rtol)


def _bn_case(rng):
    shape = tuple(rng.integers(2, 4, size=2)) + tuple(rng.integers(2, 4, size=int(rng.integers(2, 4))))
    c = shape[1]
    st = ad.BatchNormState(c)
    return (lambda x, g, b: ad.batchnorm(x, g, b, st, "train"),
            [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)])


def _bn_infer_case(rng):
    c = int(rng.integers(1, 4))
    st = ad.BatchNormState(c)
    st.running_mean = rng.normal(size=c)
    st.running_var = rng.uniform(0.5, 2, size=c)
    return (lambda x, g, b: ad.batchnorm(x, g, b, st, "infer"),
            [rng.normal(size=(2, c, 3, 3)), rng.normal(size=c), rng.normal(size=c)])


def _conv_case(rng):
    nd = int(rng.integers(2, 4))
    cin, cout = rng.integers(1, 3, size=2)
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    pad = str(rng.choice(["same", "valid"]))
    sp = tuple(rng.integers(k, k + 3, size=nd))
    use_bias = bool(rng.integers(2))
    x = rng.normal(size=(2, cin) + sp)
    w = rng.normal(size=(cout, cin) + (k,) * nd)
    if use_bias:
        return (lambda x, w, b: ad.conv_nd(x, w, b, s, pad), [x, w, rng.normal(size=cout)])
    return (lambda x, w: ad.conv_nd(x, w, None, s, pad), [x, w])


def _pool_case(rng):
    nd = int(rng.integers(2, 4))
    w = int(rng.choice([2, 3]))
    s = int(rng.choice([1, 2, w]))
    pad = str(rng.choice(["same", "valid"]))
    sp = tuple(rng.integers(w, w + 3, size=nd))
    # distinct values spaced well beyond the FD step so argmax is stable
    n = 2 * int(np.prod(sp))
    x = rng.permutation(n).reshape((2, 1) + sp) * 0.1 + rng.uniform(0, 0.01, size=(2, 1) + sp)
    return (lambda x: ad.maxpool_nd(x, w, s, pad), [x])


def _upsample_case(rng):
    nd = int(rng.integers(2, 4))
    sp = tuple(rng.integers(1, 4, size=nd))
    f = int(rng.choice([2, 3]))
    return (lambda x: ad.upsample_linear_nd(x, f), [rng.normal(size=(1, 2) + sp)])


def _relu_case(rng):
    x = rng.normal(size=(2, 3, 4))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    return (ad.relu, [x])


def _concat_case(rng):
    n = int(rng.integers(1, 4))
    arrs = [rng.normal(size=(2, int(rng.integers(1, 3)), 3, 2)) for _ in range(n)]
    return (lambda *xs: ad.concat_channels(list(xs)), arrs)


def _slice_case(rng):
    c = int(rng.integers(2, 5))
    a = int(rng.integers(0, c - 1))
    b = int(rng.integers(a + 1, c + 1))
    return (lambda x: ad.slice_channels(x, a, b), [rng.normal(size=(2, c, 3, 3))])


def _crop_case(rng):
    sp = tuple(rng.integers(2, 5, size=3))
    keep = tuple(int(rng.integers(1, n + 1)) for n in sp)
    return (lambda x: ad.crop_spatial(x, keep), [rng.normal(size=(1, 2) + sp)])


def _lincomb_case(rng):
    n = int(rng.integers(1, 5))
    c = rng.uniform(0, 1, size=n)
    return (lambda *xs: ad.linear_combination([ad.sum_all(x) for x in xs], c),
            [rng.normal(size=(2, 3)) for _ in range(n)])


def _pick_log_case(rng):
    shape = (2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    w = rng.uniform(0.1, 1, size=labels.shape)
    return (lambda x: ad.pick_log(ad.softmax_channels(x), labels, w), [rng.normal(size=shape)])


def _pick_case(rng):
    shape = (2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    w = rng.uniform(0.1, 1, size=labels.shape)
    return (lambda x: ad.pick(ad.log_softmax_channels(x), labels, w), [rng.normal(size=shape)])


GRADCHECK_CASES = {
    "add": (lambda rng: (ad.add, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]), 1e-4),
    "scale": (lambda rng: ((lambda x, c=float(rng.normal()): ad.scale(x, c)), [rng.normal(size=(3, 2, 2))]), 1e-4),
    "sum_all": (lambda rng: (ad.sum_all, [rng.normal(size=(2, 2, 3))]), 1e-4),
    "weighted_sum": (lambda rng: ((lambda x, w=rng.normal(size=(2, 3)): ad.weighted_sum(x, w)),
                                  [rng.normal(size=(2, 3))]), 1e-4),
    "linear_combination": (_lincomb_case, 1e-4),
    "relu": (_relu_case, 1e-4),
    "slice_channels": (_slice_case, 1e-4),
    "crop_spatial": (_crop_case, 1e-4),
    "conv_nd": (_conv_case, 1e-4),
    "maxpool_nd": (_pool_case, 1e-4),
    "upsample_linear_nd": (_upsample_case, 1e-4),
    "concat_channels": (_concat_case, 1e-4),
    "batchnorm_train": (_bn_case, 1e-3),
    "batchnorm_infer": (_bn_infer_case, 1e-3),
    "softmax_channels": (lambda rng: (ad.softmax_channels, [rng.normal(size=(2, 4, 3))]), 1e-4),
    "log_softmax_channels": (lambda rng: (ad.log_softmax_channels, [rng.normal(size=(2, 4, 3))]), 1e-4),
    "pick_log": (_pick_log_case, 1e-4),
    "pick": (_pick_case, 1e-4),
}


# ---------------------------------------------------------------------------
# schedule trajectory for a constant loss stream, F = 4, alpha0 = 0.25.
# Every window is an insufficient decrease, so alpha halves at the end of each
# window and F doubles on every second consecutive one. Hand-stepped:
# it 4 halve (1 strike), it 8 halve + F->8 (2 strikes, reset), it 16 halve,
# it 24 halve + F->16, it 40 halve, it 56 halve + F->32, it 88 halve,
# it 120 floor at 0.001 + F->64, it 184 floor, it 248 floor + F->128.
CONSTANT_TRAJECTORY = {
    3: (0.25, 4), 4: (0.125, 4), 8: (0.0625, 8), 15: (0.0625, 8), 16: (0.03125, 8),
    24: (0.015625, 16), 40: (0.0078125, 16), 56: (0.00390625, 32), 87: (0.00390625, 32),
    88: (0.001953125, 32), 120: (0.001, 64), 184: (0.001, 64), 248: (0.001, 128),
}
