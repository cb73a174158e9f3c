"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops and the math module so
it shares no code path with the vectorized package functions.
"""

import math

import numpy as np

from coopweight import nn

EPS = 1e-3


def smooth_l1_loop(x):
    out = []
    for v in np.ravel(x):
        out.append(0.5 * v * v if abs(v) < 1 else abs(v) - 0.5)
    return np.array(out).reshape(np.shape(x))


def focal_loop(q, alpha, gamma):
    alpha = np.broadcast_to(alpha, np.shape(q)).ravel()
    q = np.ravel(q)
    out = []
    for qi, ai in zip(q, alpha):
        qi = min(max(qi, 1e-12), 1.0)
        out.append(-ai * (1 - qi) ** gamma * math.log(qi))
    return np.array(out)


def kl_loop(p, q):
    total = 0.0
    for pi, qi in zip(np.ravel(p), np.ravel(q)):
        if pi > 0:
            total += pi * (math.log(pi) - math.log(max(qi, 1e-12)))
    return total


def residual_loop(gt, anchor):
    xg, yg, zg, wg, lg, hg, tg = (float(v) for v in gt)
    xa, ya, za, wa, la, ha, ta = (float(v) for v in anchor)
    d = math.hypot(wa, la)
    return [
        (xg - xa) / d,
        (yg - ya) / d,
        (zg - za) / ha,
        math.log(wg / wa),
        math.log(lg / la),
        math.log(hg / ha),
        math.sin(tg - ta),
    ]


def softmax_list(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def ss_loss_loop(f_ego, pos, neg, clean, net, lambda_pos, lambda_neg):
    """Self-supervised loss, one scene and one CAV at a time.

    Each weight comes from its own single-pair forward pass, so the net has
    to be in eval mode for this to be comparable with the batched version.
    """
    from coopweight.weighting import weight_forward

    b, k = clean.shape[:2]
    total = 0.0
    for s in range(b):
        scene = 0.0
        for j in range(k):
            q = softmax_list(list(clean[s, j].ravel()))
            w_pos = weight_forward(f_ego[s], pos[s, j], net)
            w_neg = weight_forward(f_ego[s], neg[s, j], net)
            p_pos = softmax_list([w_pos * v for v in pos[s, j].ravel()])
            p_neg = softmax_list([w_neg * v for v in neg[s, j].ravel()])
            scene += lambda_pos * kl_loop(p_pos, q) + lambda_neg * kl_loop(p_neg, q)
        total += scene / k
    return total / b


def numeric_grad(fn, arr, eps=EPS, entries=None):
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return out


def rel_error(analytic, numeric, scale=None):
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of ``scale`` (by default the largest numeric entry),
    so entries whose true derivative is essentially zero are judged on
    absolute error instead of blowing up the ratio.
    """
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    if scale is None:
        scale = np.max(np.abs(n)) if n.size else 0.0
    floor = max(1e-3 * scale, 1e-10)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_grads(build, tensors, eps=EPS, entries=None):
    """Compare backprop against central differences for every tensor.

    ``build()`` must return a scalar Tensor computed from ``tensors``.
    ``entries`` maps tensor position to the flat indices to probe (all by
    default). Returns the worst relative error.
    """
    for t in tensors:
        t.zero_grad()
    build().backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for pos, t in enumerate(tensors):
        sel = None if entries is None else entries.get(pos)

        def value():
            with nn.no_grad():
                return float(build().data)

        num = numeric_grad(value, t.data, eps, sel)
        keys = list(num)
        worst = max(worst, rel_error(analytic[pos].reshape(-1)[keys], [num[k] for k in keys]))
    return worst
