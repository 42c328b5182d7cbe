"""Sample-based CRPS and the channel-normalized NCRPS.

Two independent routes to the same number:

* :func:`crps_brute` integrates (F(z) - 1{y <= z})^2 exactly for the
  empirical step CDF, segment by segment.  It is the verification oracle
  and is never used in training.
* :func:`crps_samples` is the O(P log P) production form
  ``mean|X - y| - (1/P^2) sum_i (2i - P - 1) X_(i)`` over the ascending
  sort.  The second term equals half the mean absolute pairwise spread.

NCRPS sums CRPS over the horizon, divides per channel by the l1 mass of the
truth, then averages channels.  :func:`ncrps_loss` is the tape version used
as the training objective; the sort permutation is constant at the
evaluation point, so the loss is differentiable almost everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T
from .errors import DegenerateChannelError


def crps_brute(samples, y: float) -> float:
    """Exact squared-CDF integral against the empirical distribution."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        raise ValueError("need at least one sample")
    y = float(y)
    points = np.unique(np.concatenate([x, [y]]))
    total = 0.0
    for a, b in zip(points[:-1], points[1:]):
        f = np.searchsorted(x, a, side="right") / x.size
        h = 1.0 if y <= a else 0.0
        total += (f - h) ** 2 * (b - a)
    return total


def crps_samples(samples, y) -> np.ndarray:
    """Sorted-coefficient CRPS; sample axis first, broadcasts over the rest.

    samples: (P, ...), y: (...) -> (...)
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("need at least one sample")
    y = np.asarray(y, dtype=np.float64)
    p = x.shape[0]
    mae = np.abs(x - y[None]).mean(axis=0)
    xs = np.sort(x, axis=0, kind="stable")
    coeff = (2.0 * np.arange(1, p + 1) - p - 1.0) / (p * p)
    coeff = coeff.reshape((p,) + (1,) * (x.ndim - 1))
    spread = (coeff * xs).sum(axis=0)
    return mae - spread


@dataclass
class ScoreReport:
    per_channel: np.ndarray          # NCRPS per channel
    denominators: np.ndarray         # per-channel l1 mass of the truth
    aggregate: float
    channel_names: list = field(default_factory=list)

    def rows(self):
        names = self.channel_names or [str(i) for i in range(len(self.per_channel))]
        for name, den, val in zip(names, self.denominators, self.per_channel):
            yield name, float(den), float(val)


def ncrps(samples, truth, channel_names=None) -> ScoreReport:
    """Score one horizon: samples (P, L, d) against truth (L, d)."""
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch {samples.shape} vs {truth.shape}")
    denom = np.abs(truth).sum(axis=0)
    if (denom <= 0).any():
        names = channel_names or [str(i) for i in range(truth.shape[1])]
        bad = [names[i] for i in np.nonzero(denom <= 0)[0]]
        raise DegenerateChannelError(bad)
    crps = crps_samples(samples, truth)          # (L, d)
    per_channel = crps.sum(axis=0) / denom
    return ScoreReport(per_channel=per_channel, denominators=denom,
                       aggregate=float(per_channel.mean()),
                       channel_names=list(channel_names or []))


def ncrps_loss(samples: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """Differentiable mean NCRPS over a batch.

    samples: tape tensor (B, P, L, d); truth: constant (B, L, d).
    Each window normalizes by its own horizon l1 mass.
    """
    b, p, l, d = samples.shape
    truth = np.asarray(truth, dtype=samples.data.dtype)
    denom = np.abs(truth).sum(axis=1)            # (B, d)
    if (denom <= 0).any():
        bad = sorted(set(int(j) for j in np.nonzero(denom <= 0)[1]))
        raise DegenerateChannelError([str(j) for j in bad])
    mae = T.tmean(T.tabs(samples - truth[:, None]), axis=1)   # (B, L, d)
    perm = np.argsort(samples.data, axis=1, kind="stable")
    xs = T.permute_along(samples, perm, axis=1)
    coeff = ((2.0 * np.arange(1, p + 1) - p - 1.0) / (p * p)).astype(samples.data.dtype)
    spread = T.tsum(xs * coeff.reshape(1, p, 1, 1), axis=1)   # (B, L, d)
    crps = mae - spread
    per_channel = T.tsum(crps, axis=1) / denom                # (B, d)
    return T.tmean(per_channel)
