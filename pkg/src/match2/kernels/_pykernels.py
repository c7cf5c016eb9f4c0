"""Pure-numpy pairwise kernels.

Inputs are row stacks ``x`` of shape (N, m, w) and ``y`` of shape (N, n, w);
outputs are (N, m, n) matrices over all row pairs.  Work is chunked over the
leading axis so the (chunk, m, n, w) broadcast stays bounded.
"""

import numpy as np

_LN2 = np.log(2.0)
_CHUNK_ELEMS = 1 << 22


def _chunks(x, y):
    n_lead, m, w = x.shape
    per = max(1, m * y.shape[1] * max(w, 1))
    step = max(1, _CHUNK_ELEMS // per)
    for start in range(0, n_lead, step):
        yield slice(start, min(n_lead, start + step))


def _diff(x, y, sl):
    return x[sl, :, None, :].astype(np.float64) - y[sl, None, :, :]


def pairwise_l1(x, y):
    out = np.empty((x.shape[0], x.shape[1], y.shape[1]), dtype=x.dtype)
    for sl in _chunks(x, y):
        out[sl] = np.abs(_diff(x, y, sl)).sum(-1)
    return out


def pairwise_l1_backward(x, y, coef):
    dx = np.zeros(x.shape, dtype=np.float64)
    dy = np.zeros(y.shape, dtype=np.float64)
    for sl in _chunks(x, y):
        sgn = np.sign(_diff(x, y, sl))
        c = coef[sl].astype(np.float64)
        dx[sl] = np.einsum("bij,bijt->bit", c, sgn)
        dy[sl] = -np.einsum("bij,bijt->bjt", c, sgn)
    return dx.astype(x.dtype), dy.astype(y.dtype)


def pairwise_l2(x, y):
    out = np.empty((x.shape[0], x.shape[1], y.shape[1]), dtype=x.dtype)
    for sl in _chunks(x, y):
        d = _diff(x, y, sl)
        out[sl] = np.sqrt((d * d).sum(-1))
    return out


def pairwise_l2_backward(x, y, dist, coef):
    dx = np.zeros(x.shape, dtype=np.float64)
    dy = np.zeros(y.shape, dtype=np.float64)
    for sl in _chunks(x, y):
        d = _diff(x, y, sl)
        e = dist[sl].astype(np.float64)
        c = np.where(e > 0, coef[sl] / np.where(e > 0, e, 1.0), 0.0)
        dx[sl] = np.einsum("bij,bijt->bit", c, d)
        dy[sl] = -np.einsum("bij,bijt->bjt", c, d)
    return dx.astype(x.dtype), dy.astype(y.dtype)


def _xlogx_over(a, mid):
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, a * np.log(safe / np.where(mid > 0, mid, 1.0)), 0.0)


def pairwise_jsd(p, q):
    """Base-2 Jensen-Shannon divergence between every row of p and of q."""
    out = np.empty((p.shape[0], p.shape[1], q.shape[1]), dtype=p.dtype)
    for sl in _chunks(p, q):
        a = np.broadcast_to(p[sl, :, None, :].astype(np.float64), _pair_shape(p, q, sl))
        b = np.broadcast_to(q[sl, None, :, :].astype(np.float64), a.shape)
        mid = 0.5 * (a + b)
        acc = (_xlogx_over(a, mid) + _xlogx_over(b, mid)).sum(-1)
        out[sl] = 0.5 * acc / _LN2
    return out


def _pair_shape(p, q, sl):
    return (len(range(*sl.indices(p.shape[0]))), p.shape[1], q.shape[1], p.shape[2])


def pairwise_jsd_backward(p, q, coef):
    dp = np.zeros(p.shape, dtype=np.float64)
    dq = np.zeros(q.shape, dtype=np.float64)
    for sl in _chunks(p, q):
        a = np.broadcast_to(p[sl, :, None, :].astype(np.float64), _pair_shape(p, q, sl))
        b = np.broadcast_to(q[sl, None, :, :].astype(np.float64), a.shape)
        mid = 0.5 * (a + b)
        safe_mid = np.where(mid > 0, mid, 1.0)
        la = np.where(a > 0, np.log(np.where(a > 0, a, 1.0) / safe_mid), 0.0)
        lb = np.where(b > 0, np.log(np.where(b > 0, b, 1.0) / safe_mid), 0.0)
        c = 0.5 * coef[sl].astype(np.float64) / _LN2
        dp[sl] = np.einsum("bij,bijt->bit", c, la)
        dq[sl] = np.einsum("bij,bijt->bjt", c, lb)
    return dp.astype(p.dtype), dq.astype(q.dtype)
