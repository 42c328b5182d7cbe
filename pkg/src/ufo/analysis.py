"""Post-hoc diagnostics for a trained forecaster.

Four studies, all read-only over a checkpoint: per-position gradient
sensitivity of the mean forecast, the coefficient of variation of
inter-observation gaps across coarsening levels, a linear probe asking
whether patch embeddings encode where observations went missing, and
wall-clock timing (including the patched-vs-sequential integration
comparison).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import cde, data, kernels, model, scoring
from . import tensorops as T
from .errors import DegenerateStudyError, IntegrationDivergedError


def thread_count(requested: int | None = None) -> int:
    """Effective worker count; the UFO_THREADS env var caps it."""
    cap = os.environ.get("UFO_THREADS")
    n = 1 if requested is None else int(requested)
    if cap is not None:
        n = min(n, max(1, int(cap)))
    return max(1, n)


# ---------------------------------------------------------------------------
# positional gradient sensitivity
# ---------------------------------------------------------------------------

@dataclass
class SensitivityReport:
    norms: np.ndarray        # (T,) mean gradient norm per context position
    r_squared: float         # log-norm vs position, zero positions excluded
    zero_positions: list     # indices whose mean norm is exactly 0.0

    def __post_init__(self):
        assert (self.norms >= 0).all()
        assert 0.0 <= self.r_squared <= 1.0 + 1e-12


def log_position_r2(norms: np.ndarray) -> float:
    """R^2 of a least-squares line through (position, log norm).

    Exact zeros are left out (their log is undefined; they are reported
    separately).  A single surviving point is perfectly explained by
    position; identical norms carry no positional signal at all.
    """
    pos = np.nonzero(norms)[0]
    if pos.size == 0:
        raise DegenerateStudyError("every position has zero gradient")
    if pos.size == 1:
        return 1.0
    x = pos.astype(np.float64)
    y = np.log(norms[pos])
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 0.0
    slope, icept = np.polyfit(x, y, 1)
    ssr = float(((y - slope * x - icept) ** 2).sum())
    return min(1.0, max(0.0, 1.0 - ssr / sst))


def positional_norms(grad: np.ndarray) -> np.ndarray:
    """(B, T, d) input gradients -> (T,) mean 2-norm over windows."""
    return np.sqrt((grad.astype(np.float64) ** 2).sum(axis=-1)).mean(axis=0)


def sensitivity(batch: model.Batch, cfg: model.ModelConfig, params,
                normalized: bool = False) -> SensitivityReport:
    """How strongly each context position steers the mean forecast.

    The latent noise is pinned at zero, so the forecast is the ensemble
    mean and the gradient is deterministic.  By default gradients are taken
    w.r.t. the raw input values, flowing through the instance normalization
    and its restore; ``normalized=True`` differentiates w.r.t. the already
    normalized values instead, holding the statistics fixed.
    """
    b, t, d_x = batch.values.shape
    cov = data.time_covariates(batch.times.reshape(-1)).reshape(b, t, -1)
    rev_mean, rev_scale = model.revin_stats(batch.values, batch.mask)

    if normalized:
        x = T.tensor((batch.values - rev_mean) / rev_scale,
                     requires_grad=True)
        inputs = T.concat([x, T.tensor(cov)], axis=-1)
        restore = lambda out: out * rev_scale + rev_mean
    else:
        x = T.tensor(batch.values, requires_grad=True)
        m = batch.mask.astype(np.float64)
        n = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        mean = T.reshape(T.tsum(x * T.tensor(m), axis=1), (b, 1, d_x)) / n
        var = T.reshape(T.tsum(T.square(x - mean) * T.tensor(m), axis=1),
                        (b, 1, d_x)) / n
        scale = T.tsqrt(var) + model.REVIN_EPS
        inputs = T.concat([(x - mean) / scale, T.tensor(cov)], axis=-1)
        restore = lambda out: out * scale + mean

    state = model.encode(batch, cfg, params, inputs=inputs)
    lm = batch.hor_times.shape[1] // cfg.block_size
    mu = state.latent.mu
    z = T.reshape(mu, (b, 1) + mu.shape[1:])
    z = z[:, :, state.latent.length - lm:]
    y = model.decode(z, state, batch.hor_times, cfg, params)
    out = T.matmul(y, params["out_proj"]["w"]) + params["out_proj"]["b"]
    T.backward(T.tsum(restore(out)))

    norms = positional_norms(x.grad)
    return SensitivityReport(norms=norms, r_squared=log_position_r2(norms),
                             zero_positions=np.nonzero(norms == 0.0)[0]
                             .tolist())


# ---------------------------------------------------------------------------
# gap CV per level
# ---------------------------------------------------------------------------

def cv_study(times, w: int, levels: int) -> list:
    """Gap CV of the input clock and of each coarsened clock above it.

    Returns levels + 1 values; entry 0 is the (truncated) input itself.
    """
    grids, _, _ = data.build_level_grids(np.asarray(times, np.float64),
                                         w, levels)
    clocks = [grids[0].fine_times.reshape(-1)]
    clocks += [g.coarse_times for g in grids]
    return [float(data.gap_cv(c)) for c in clocks]


# ---------------------------------------------------------------------------
# irregularity probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    f1: float
    counts: tuple            # (clean patches, affected patches)
    weight_norm: float
    intercept: float

    def __post_init__(self):
        assert 0.0 <= self.f1 <= 1.0


def bottom_embeddings(batch: model.Batch, cfg: model.ModelConfig,
                      params) -> np.ndarray:
    """Raw first-downsampler outputs, one embedding per level-0 patch.

    With ``skip_pre`` the encoder stores exactly the pre-refiner features
    as its skips, so the level-1 skip is the untouched downsampler output;
    the parameters are unaffected by the flag.  Needs levels >= 2.
    """
    if cfg.levels < 2:
        raise ValueError("bottom embeddings need at least two levels")
    with T.no_grad():
        state = model.encode(batch, replace(cfg, skip_pre=True), params)
    return state.skips[1].data


def patch_labels(batch: model.Batch, cfg: model.ModelConfig,
                 freq_seconds: float) -> np.ndarray:
    """(B, n) flags: did the patch's calendar span lose any slot?

    On a dense grid a removed slot is simply a masked row; on a survivor
    timeline (all rows observed) it shows up as a stretched gap, counted
    against the patch that follows it.  Dispatch is by representation so
    any resampler kind can be probed on either one.
    """
    w = cfg.patch_len
    b, t = batch.times.shape
    missing = ~batch.mask.all(axis=2)
    if missing.any():
        return missing.reshape(b, t // w, w).any(axis=2)
    ends = batch.times[:, w - 1::w]
    prev = np.concatenate([batch.times[:, :1] - freq_seconds,
                           ends[:, :-1]], axis=1)
    slots = np.rint((ends - prev) / freq_seconds).astype(np.int64)
    return slots > w


def logistic_probe(feats: np.ndarray, labels: np.ndarray, seed: int,
                   iters: int = 500, lr: float = 0.1, l2: float = 1e-4,
                   holdout: float = 0.3):
    """Balanced-weight logistic regression by plain gradient descent.

    Features are standardized on the training split.  Returns
    (f1 on the held-out split, weights, intercept).
    """
    y = labels.astype(np.float64)
    if y.min() == y.max():
        raise DegenerateStudyError("probe labels are single-class")
    order = T.stream_generator("probe-split", seed).permutation(len(y))
    cut = int(round(len(y) * (1.0 - holdout)))
    tr, te = order[:cut], order[cut:]
    if y[tr].min() == y[tr].max() or te.size == 0:
        raise DegenerateStudyError("degenerate probe split")

    mu = feats[tr].mean(axis=0)
    sd = feats[tr].std(axis=0) + 1e-8
    z = (feats - mu) / sd
    # balanced class weights: n / (2 n_c)
    counts = np.bincount(y[tr].astype(np.int64), minlength=2)
    cw = tr.size / (2.0 * np.maximum(counts, 1))
    sw = cw[y[tr].astype(np.int64)]

    w = np.zeros(feats.shape[1])
    bias = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(z[tr] @ w + bias)))
        err = sw * (p - y[tr])
        w -= lr * (z[tr].T @ err / tr.size + l2 * w)
        bias -= lr * err.mean()

    pred = (z[te] @ w + bias) > 0.0
    truth = y[te] > 0.5
    tp = float(np.sum(pred & truth))
    precision = tp / max(pred.sum(), 1)
    recall = tp / max(truth.sum(), 1)
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return float(f1), w, float(bias)


def irregularity_probe(windows, cfg: model.ModelConfig, params,
                       freq_seconds: float, seed: int = 0) -> ProbeReport:
    """Can a linear readout recover, per patch, whether observations were
    removed from its span?  Windows are collated one at a time because
    survivor counts differ; windows too sparse to embed are skipped, as are
    the rare extreme-gap windows whose fixed-step integration diverges."""
    feats, labels = [], []
    for wd in windows:
        try:
            batch = model.collate([wd], cfg)
            emb = bottom_embeddings(batch, cfg, params)[0]
        except (ValueError, IntegrationDivergedError):
            continue
        feats.append(emb)
        labels.append(patch_labels(batch, cfg, freq_seconds)[0])
    if not feats:
        raise DegenerateStudyError("no window survived collation")
    x = np.concatenate(feats).astype(np.float64)
    y = np.concatenate(labels)
    f1, w, bias = logistic_probe(x, y, seed)
    return ProbeReport(f1=f1,
                       counts=(int((~y).sum()), int(y.sum())),
                       weight_norm=float(np.linalg.norm(w)),
                       intercept=bias)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass
class TimingReport:
    seconds_per_batch: float   # mean over the timed batches
    per_batch: list            # individual wall-clock seconds
    batch_shape: tuple         # (windows, context length, channels)
    threads: int

    def __post_init__(self):
        assert self.seconds_per_batch > 0


def timing(windows, cfg: model.ModelConfig, params, batches: int = 6,
           batch_size: int = 32, seed: int = 0) -> TimingReport:
    """Wall clock of a single-sample forecast, averaged over ``batches``
    batches.  Collation happens outside the clock and the first batch is a
    discarded warm-up."""
    if not windows:
        raise ValueError("no windows to time")
    picks = [windows[i % len(windows)] for i in
             range((batches + 1) * batch_size)]
    collated = [model.collate(picks[i * batch_size:(i + 1) * batch_size], cfg)
                for i in range(batches + 1)]
    stamps = []
    for i, batch in enumerate(collated):
        start = time.perf_counter()
        model.forecast(batch, 1, cfg, params, seed=seed)
        stamps.append(time.perf_counter() - start)
    timed = stamps[1:]
    return TimingReport(seconds_per_batch=float(np.mean(timed)),
                        per_batch=timed,
                        batch_shape=(batch_size, collated[-1].times.shape[1],
                                     cfg.d_x),
                        threads=thread_count(1))


# ---------------------------------------------------------------------------
# patched-parallel vs sequential integration
# ---------------------------------------------------------------------------

@dataclass
class SpeedupReport:
    parallel_seconds: float
    sequential_seconds: float
    ratio: float
    steps_parallel: int        # RK4 steps per sequence, patched arm
    steps_sequential: int      # RK4 steps per sequence, sequential arm
    workers: int


def _speedup_inputs(t_len, batch, w, d, width, spi, seed, dtype=np.float64):
    gen = T.stream_generator("speedup", seed)
    times = np.broadcast_to(3600.0 * np.arange(t_len, dtype=np.float64),
                            (batch, t_len)).copy()
    values = gen.standard_normal((batch, t_len, d))
    c = data.COVARIATE_DIM
    e = c + d + d                      # [covariates, control, state]
    wg = gen.standard_normal((e, width)) / np.sqrt(e)
    wv = gen.standard_normal((e, width)) / np.sqrt(e)
    # the sequential arm integrates across the whole sequence, so the field
    # must be weak enough not to blow up over ~t_len time units
    wo = gen.standard_normal((width, d)) * (0.5 / t_len)
    n = t_len // w
    cov = data.time_covariates(times.reshape(-1)).reshape(batch, t_len, c)
    plan = cde.downsample_plan(times.reshape(batch, n, w) / 3600.0,
                               cov.reshape(batch, n, w, c), spi=spi)
    hs, ext, x0 = cde.plan_to_kernel_args(plan, values, dtype=dtype)
    u = x0 @ gen.standard_normal((x0.shape[1], d)) / np.sqrt(x0.shape[1])
    z0 = u * (1.0 / (1.0 + np.exp(-u)))
    return hs, ext, z0, wg.astype(dtype), wv.astype(dtype), wo.astype(dtype)


def speedup_study(t_len: int = 720, batch: int = 32, w: int = 4, d: int = 8,
                  width: int = 16, spi_parallel: int = 4,
                  spi_sequential: int = 3, workers: int = 4, seed: int = 0,
                  backend: str = "numpy", repeats: int = 3) -> SpeedupReport:
    """Level-0 integration, patched (all patches at once, chunked over a
    thread pool) against a minimal one-trajectory-at-a-time reference at a
    near-equal RK4 step budget.

    At t_len = 720, w = 4: 180 patches x 3 intervals x 4 steps = 2160
    patched steps per sequence vs 719 intervals x 3 steps = 2157 sequential
    ones; 719 is prime, so the budgets cannot match exactly and the
    patched arm takes the 3 extra steps.  Everything but the integration
    itself (controls, smoothing weights, pool startup) stays outside the
    clock.
    """
    if t_len % w:
        raise ValueError("t_len must divide into patches")
    workers = thread_count(workers)

    hs_p, ext_p, z0_p, wg, wv, wo = _speedup_inputs(
        t_len, batch, w, d, width, spi_parallel, seed)
    steps_p = hs_p.shape[1]

    # one patch spanning the whole sequence gives the step layout of a
    # plain start-to-end integration
    hs_s, ext_s, z0_s, _, _, _ = _speedup_inputs(
        t_len, batch, t_len, d, width, spi_sequential, seed)
    steps_s = hs_s.shape[1]

    chunks = np.array_split(np.arange(hs_p.shape[0]), workers)

    def run_parallel(pool):
        jobs = [pool.submit(kernels.rk4_patches, z0_p[c], ext_p[c], hs_p[c],
                            steps_p, wg, wv, wo, backend=backend)
                for c in chunks]
        return [j.result() for j in jobs]

    def run_sequential():
        return [kernels.rk4_sequential(z0_s[i], ext_s[i], hs_s[i],
                                       wg, wv, wo, backend=backend)
                for i in range(hs_s.shape[0])]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        warm = run_parallel(pool)             # warm-up (and jit, if any)
        if not all(np.isfinite(z).all() for z, _ in warm):
            raise ValueError("timing field diverged; weaker weights needed")
        par = []
        for _ in range(repeats):
            start = time.perf_counter()
            run_parallel(pool)
            par.append(time.perf_counter() - start)

    if not all(np.isfinite(z).all() for z in run_sequential()):
        raise ValueError("timing field diverged; weaker weights needed")
    seq = []
    for _ in range(repeats):
        start = time.perf_counter()
        run_sequential()
        seq.append(time.perf_counter() - start)

    p, s = float(np.mean(par)), float(np.mean(seq))
    return SpeedupReport(parallel_seconds=p, sequential_seconds=s,
                         ratio=s / p, steps_parallel=steps_p * (t_len // w),
                         steps_sequential=steps_s, workers=workers)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def persistence_ncrps(windows) -> float:
    """Repeat-last-observation forecast scored as a one-sample ensemble,
    aggregated exactly like ``model.evaluate``."""
    scores = []
    for wd in windows:
        last = data.last_observed(wd.ctx_values, wd.ctx_mask)
        sample = np.broadcast_to(last, (1,) + wd.hor_values.shape)
        scores.append(scoring.ncrps(sample, wd.hor_values).aggregate)
    return float(np.mean(scores))
