"""Random number generation, weight initialisation and gradient checking.

Tensors throughout the package are plain ``numpy.ndarray`` objects in C
(row-major) order. Random streams come from numpy's ``PCG64`` bit generator,
which is fixed here so that a seed reproduces the same draws on every
platform numpy supports.
"""

import numpy as np

__all__ = [
    "make_rng",
    "split_rng",
    "gaussian_init",
    "finite_diff_grad",
    "relative_error",
]


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by PCG64 for `seed`.

    Passing an existing Generator returns it unchanged, so functions can
    accept either a seed or a stream.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(seed, n):
    """Derive `n` independent generators from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def gaussian_init(shape, mean=0.0, stddev=0.1, rng=None, dtype=np.float64):
    """Fill a tensor of `shape` with i.i.d. N(mean, stddev**2) draws."""
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    rng = make_rng(rng)
    out = rng.normal(loc=mean, scale=stddev, size=shape)
    return np.ascontiguousarray(out, dtype=dtype)


def finite_diff_grad(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function.

    ``f`` must be pure: it is evaluated at ``x + h e_i`` and ``x - h e_i`` for
    every coordinate ``i``. ``x`` itself is restored before returning.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        raise TypeError("finite_diff_grad needs a floating point tensor")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-12):
    """Largest absolute deviation between `a` and `b`, relative to the
    largest magnitude in either tensor.

    Scaling by the tensor-wide magnitude rather than per element keeps
    near-zero gradient entries from turning finite-difference truncation
    noise into spurious large ratios.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.size:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)
