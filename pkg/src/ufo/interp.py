"""Regularized Nadaraya-Watson smoothing of irregular channels.

An irregular channel (observations x_i at times t_i) becomes a continuous
function via

    xhat(t) = sum_i K(t, t_i) x_i / (lam + sum_i K(t, t_i))

with the decaying kernel K(a, b) = exp(-|a - b| / scale).  The prior mass
``lam`` behaves like a pseudo-observation of 0 with constant weight: it
shrinks the estimate toward zero where data are sparse and makes the
estimator well defined for empty channels.

Weights depend only on times and the missing mask, never on values, so the
weight matrices are plain numpy constants; callers that smooth tape tensors
multiply those constants in (see the resampling module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAMBDA_DEFAULT = math.exp(-3.0)


@dataclass(frozen=True)
class KernelConfig:
    lam: float = LAMBDA_DEFAULT
    scale: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class IrregularChannel:
    """Strictly increasing times with one finite value each."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("times and values must be matching 1-d arrays")
        if t.size and not (np.diff(t) > 0).all():
            raise ValueError("times must be strictly increasing")
        if not (np.isfinite(t).all() and np.isfinite(v).all()):
            raise ValueError("times and values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size


def kernel_weight(a, b, scale: float = 1.0):
    """exp(-|a - b| / scale); symmetric, 1 at zero distance."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("kernel inputs must be finite")
    out = np.exp(-np.abs(a - b) / scale)
    return float(out) if out.ndim == 0 else out


def kernel_matrix(query_times, obs_times, scale: float = 1.0) -> np.ndarray:
    """Pairwise kernel weights, shape (len(query), len(obs))."""
    q = np.asarray(query_times, dtype=np.float64).reshape(-1, 1)
    o = np.asarray(obs_times, dtype=np.float64).reshape(1, -1)
    return kernel_weight(q, o, scale)


def smoothing_weights(query_times, obs_times, scale: float = 1.0,
                      lam: float = LAMBDA_DEFAULT) -> np.ndarray:
    """Normalized weight rows W with xhat(queries) = W @ values.

    Rows sum to sum_K/(lam + sum_K) <= 1; the deficit is the shrinkage
    toward zero.  Fully-observed case only (no mask): the resamplers use
    this to smooth latent sequences, which never have gaps.
    """
    k = kernel_matrix(query_times, obs_times, scale)
    denom = lam + k.sum(axis=1, keepdims=True)
    if lam == 0.0 and (denom == 0.0).any():
        raise ValueError("lam=0 with no observations is degenerate")
    return k / denom


def kernel_smooth(query_times, obs_times, values, mask=None,
                  scale: float = 1.0, lam: float = LAMBDA_DEFAULT) -> np.ndarray:
    """Evaluate the smoother at query times, per channel.

    values: (N,) or (N, d); mask: same shape, True where observed.  Channels
    are treated independently: each uses only its own observed entries.
    """
    k = kernel_matrix(query_times, obs_times, scale)
    v = np.asarray(values, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    if mask is None:
        m = np.ones_like(v)
    else:
        m = np.asarray(mask).astype(np.float64)
        if squeeze and m.ndim == 1:
            m = m[:, None]
    if m.shape != v.shape:
        raise ValueError("mask shape must match values")
    numer = k @ (v * m)
    denom = lam + k @ m
    if (denom == 0.0).any():
        raise ValueError("lam=0 with an empty channel is degenerate")
    out = numer / denom
    return out[:, 0] if squeeze else out


def interpolate(channel: IrregularChannel, query_times,
                cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    if len(channel) == 0 and cfg.lam == 0.0:
        raise ValueError("empty channel with lam=0 is degenerate")
    if len(channel) == 0:
        return np.zeros(np.asarray(query_times).size, dtype=np.float64)
    return kernel_smooth(query_times, channel.times, channel.values,
                         scale=cfg.scale, lam=cfg.lam)
