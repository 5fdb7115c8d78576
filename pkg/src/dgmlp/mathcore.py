"""Dense float64 kernels and seeded randomness.

Matrices are plain C-contiguous ``float64`` ndarrays of shape ``(rows, cols)``.
Random streams are numpy ``Generator`` objects backed by Philox-4x64, a
counter-based generator whose output for a given seed is identical on every
platform numpy supports. Child streams are derived with ``SeedSequence`` so
independent consumers never share a counter range.
"""

import numpy as np

from .errors import RejectedInput

LOG_EPS = 1e-12
RNG_ALGORITHM = "philox4x64-10"


def rng_stream(seed, *key):
    """Return a Philox-backed generator for ``seed``.

    Extra ``key`` integers select an independent child stream, so
    ``rng_stream(s, 3)`` and ``rng_stream(s, 4)`` never overlap.
    """
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise RejectedInput(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(a, name="matrix"):
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise RejectedInput(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise RejectedInput(f"{name} has non-finite entries")
    return m


def as_vector(a, name="vector"):
    v = np.ascontiguousarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise RejectedInput(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise RejectedInput(f"{name} has non-finite entries")
    return v


def matvec(W, x):
    """``y_i = sum_j W_ij x_j`` accumulated in ascending ``j`` for every row.

    This is the reference kernel: each output is the IEEE-754 left fold over
    the row, independent of any BLAS blocking. The model code calls
    :func:`affine` instead, which is much faster but blocks its sums.
    """
    W = as_matrix(W, "W")
    x = as_vector(x, "x")
    if W.shape[1] != x.shape[0]:
        raise RejectedInput(f"matvec: W has {W.shape[1]} columns but x has length {x.shape[0]}")
    y = np.zeros(W.shape[0])
    for j in range(W.shape[1]):
        y += W[:, j] * x[j]
    return y


def affine(X, W, b):
    """Batched ``X @ W.T + b`` for ``X`` of shape ``(batch, in)``.

    Deterministic for fixed shapes and thread count, which is what snapshot
    replay needs: the same call on the same arrays returns the same bits.
    """
    return X @ W.T + b


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # exp(-|z|) never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z):
    """Softmax along the last axis with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] == 0:
        raise RejectedInput("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise RejectedInput("softmax input has non-finite entries")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p, y):
    """``-ln(p[y] + 1e-12)`` for a single probability vector."""
    p = as_vector(p, "p")
    if abs(p.sum() - 1.0) > 1e-9:
        raise RejectedInput(f"probabilities sum to {p.sum()!r}, not 1")
    y = int(y)
    if not 0 <= y < p.shape[0]:
        raise RejectedInput(f"class index {y} out of range for {p.shape[0]} classes")
    return float(-np.log(p[y] + LOG_EPS))


def glorot_uniform(rng, fan_out, fan_in):
    """``(fan_out, fan_in)`` matrix, uniform in ``+-sqrt(6 / (fan_in + fan_out))``."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))
