"""Seeded random-variate kernels used by the sampler.

All draws go through an RngStream, a thin value-like wrapper around a
counter-based (Philox) generator so that (seed, stream_id) pairs give
reproducible, independent streams.
"""

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "RngStream",
    "sample_truncated_normal",
    "sample_wishart",
    "sample_mvn_precision",
]

# splitmix64 increment, used to derive child stream ids
_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64(x):
    # splitmix64 finalizer
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Reproducible random stream keyed by (seed, stream_id)."""

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.gen = np.random.Generator(
            np.random.Philox(key=(self.seed << 64) | self.stream_id)
        )

    def substream(self, k):
        """Derive an independent child stream; deterministic in (self, k)."""
        return RngStream(self.seed, _mix64(self.stream_id ^ _mix64(k)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# --- truncated normal ---------------------------------------------------
#
# Standardized bounds inside (-TAIL, TAIL) use inverse-CDF sampling; a
# one-sided region entirely beyond TAIL uses Robert's shifted-exponential
# rejection, which stays exact and fast arbitrarily far into the tail.
_TAIL = 4.0


def _tail_rejection(a, b, gen):
    """Draws from standard normal truncated to [a, b) with a >= _TAIL."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    alpha = (a + np.sqrt(a * a + 4.0)) / 2.0
    while todo.any():
        aa = a[todo]
        al = alpha[todo]
        z = aa - np.log1p(-gen.uniform(size=aa.shape)) / al
        rho = np.exp(-0.5 * (z - al) ** 2)
        keep = (gen.uniform(size=aa.shape) <= rho) & (z < b[todo])
        vals = out[todo]
        vals[keep] = z[keep]
        out[todo] = vals
        rem = todo[todo]
        rem[keep] = False
        todo[np.nonzero(todo)] = rem
    return out


def sample_truncated_normal(mu, sigma, lower, upper, rng, size=None):
    """Exact draw(s) from N(mu, sigma^2) truncated to (lower, upper).

    Broadcasts over array arguments. Stable far into the tails
    (|mu - bound| / sigma up to ~30).
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower >= upper):
        raise ValueError("lower bound must be strictly below upper bound")
    if size is None:
        shape = np.broadcast_shapes(mu.shape, sigma.shape, lower.shape, upper.shape)
    else:
        shape = tuple(np.atleast_1d(size))
    a = np.broadcast_to((lower - mu) / sigma, shape).ravel().copy()
    b = np.broadcast_to((upper - mu) / sigma, shape).ravel().copy()
    gen = rng.gen

    # map lower-tail cases to upper-tail by symmetry
    flip = b <= -_TAIL
    a[flip], b[flip] = -b[flip], -a[flip]

    x = np.empty(a.shape)
    tail = a >= _TAIL
    if tail.any():
        x[tail] = _tail_rejection(a[tail], b[tail], gen)
    body = ~tail
    if body.any():
        pa = ndtr(a[body])
        pb = ndtr(b[body])
        u = gen.uniform(size=int(body.sum()))
        # work in the smaller tail probability for precision
        hi = (a[body] + b[body]) > 0
        p = np.where(hi, ndtr(-a[body]), pa)  # sf(a) when mass is high
        q = np.where(hi, ndtr(-b[body]), pb)
        draw = np.where(
            hi,
            -ndtri(q + u * (p - q)),
            ndtri(pa + u * (pb - pa)),
        )
        x[body] = draw
    x[flip] = -x[flip]
    out = mu + sigma * x.reshape(shape)
    if size is None and out.shape == ():
        return float(out)
    return out


def sample_wishart(df, scale, rng, scale_factor=None):
    """Wishart draw with E = df * scale, via Bartlett decomposition.

    scale_factor, if given, is any matrix M with M @ M.T == scale and is
    used instead of a fresh Cholesky (lets callers avoid explicit inverses).
    """
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError(f"df must exceed p-1 = {p - 1}, got {df}")
    L = np.linalg.cholesky(scale) if scale_factor is None else scale_factor
    gen = rng.gen
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(gen.chisquare(df - np.arange(p)))
    A[np.tril_indices(p, -1)] = gen.standard_normal(p * (p - 1) // 2)
    LA = L @ A
    return LA @ LA.T


def sample_mvn_precision(mean, precision, rng):
    """Draw from N(mean, precision^{-1}) via Cholesky of the precision."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    L = np.linalg.cholesky(precision)
    z = rng.gen.standard_normal(mean.shape[0])
    from scipy.linalg import solve_triangular

    return mean + solve_triangular(L.T, z, lower=False)


def sample_mvn_canonical(b, precision, rng):
    """Draw from N(precision^{-1} b, precision^{-1}) without inverting."""
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    from scipy.linalg import cho_factor, cho_solve, solve_triangular

    c, low = cho_factor(precision, lower=True)
    mean = cho_solve((c, low), b)
    z = rng.gen.standard_normal(b.shape[0])
    return mean + solve_triangular(c.T if low else c, z, lower=False)
