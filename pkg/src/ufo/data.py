"""Datasets, windows, calendar covariates, irregularity injection, patch grids.

Missing data is blockwise by design: whole calendar days are removed, the
way sensor outages actually happen.  A removed observation is carried two
ways simultaneously: the mask always records it, and the value slot either
holds NaN (for the irregular-capable path, which skips it) or a
forward-filled copy (for resamplers that need a dense grid).  Horizon
targets used for scoring always come from the clean series.

Patch grids implement the skip-and-repatch rule: surviving observations are
grouped into patches of exactly ``w`` (equal count, not equal duration),
the patch's coarse timestamp is its end time divided by ``w``, and the
construction recurses on the coarse times.  Times are rescaled once at
level 0 so the mean surviving gap is 1, which keeps patch durations of the
same order at every level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from . import tensorops as T
from .errors import FormatError

DAY = 86400.0
WEEK = 7 * DAY
MONTH = 30.4375 * DAY          # fixed-length month keeps the phase continuous
YEAR = 365.25 * DAY
CYCLES = (("day", DAY), ("week", WEEK), ("month", MONTH), ("year", YEAR))
COVARIATE_DIM = 2 * len(CYCLES)


@dataclass(frozen=True)
class Dataset:
    timestamps: np.ndarray        # (N,) epoch seconds, strictly increasing
    values: np.ndarray            # (N, d) float, NaN where missing
    mask: np.ndarray              # (N, d) bool, True where observed
    channel_names: tuple
    freq_seconds: float

    def __post_init__(self):
        if not (np.diff(self.timestamps) > 0).all():
            raise FormatError("timestamps must be strictly increasing")
        if not self.mask.any(axis=0).all():
            raise FormatError("every channel needs at least one observation")

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.timestamps.size


def freq_descriptor(seconds: float) -> str:
    s = int(round(seconds))
    for unit, size in (("d", 86400), ("h", 3600), ("m", 60)):
        if s % size == 0:
            return f"{s // size}{unit}"
    return f"{s}s"


def _parse_timestamp(text: str, line: int) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise FormatError(f"line {line}: unparseable timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_csv(path) -> Dataset:
    """Header ``date,<ch1>,...``; ISO-8601 or epoch-second timestamps;
    empty cells are missing."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "date":
            raise FormatError("header must be date,<channel>,...")
        names = tuple(h.strip() for h in header[1:])
        times, rows, masks = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names) + 1:
                raise FormatError(f"line {line}: expected {len(names) + 1} cells,"
                                  f" got {len(row)}")
            times.append(_parse_timestamp(row[0], line))
            vals, got = [], []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    got.append(False)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise FormatError(
                            f"line {line}: non-numeric cell {cell!r}") from None
                    got.append(True)
            rows.append(vals)
            masks.append(got)
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        raise FormatError("need at least 2 rows")
    if (np.diff(t) == 0).any():
        raise FormatError("duplicate timestamps")
    if (np.diff(t) < 0).any():
        raise FormatError("timestamps must increase")
    gaps = np.diff(t)
    vals, counts = np.unique(gaps, return_counts=True)
    freq = float(vals[np.argmax(counts)])
    return Dataset(t, np.asarray(rows, dtype=np.float64),
                   np.asarray(masks, dtype=bool), names, freq)


def save_csv(ds: Dataset, path, iso: bool = True):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *ds.channel_names])
        for i, t in enumerate(ds.timestamps):
            if iso:
                stamp = datetime.fromtimestamp(t, tz=timezone.utc).strftime(
                    "%Y-%m-%d %H:%M:%S")
            else:
                stamp = repr(float(t))
            cells = ["" if not ds.mask[i, j] else repr(float(ds.values[i, j]))
                     for j in range(ds.n_channels)]
            writer.writerow([stamp, *cells])


def time_covariates(timestamps) -> np.ndarray:
    """(N, 8): sine-cosine phase pairs for day/week/month/year cycles."""
    t = np.asarray(timestamps, dtype=np.float64)[:, None]
    out = np.empty((t.shape[0], COVARIATE_DIM))
    for k, (_, period) in enumerate(CYCLES):
        phase = 2.0 * math.pi * np.mod(t[:, 0], period) / period
        out[:, 2 * k] = np.sin(phase)
        out[:, 2 * k + 1] = np.cos(phase)
    return out


# ---------------------------------------------------------------------------
# blockwise irregularity
# ---------------------------------------------------------------------------

def inject_block_missing(ds: Dataset, fraction: float, seed: int,
                         representation: str = "nan"):
    """Mark ceil(fraction * D) whole calendar days missing.

    representation="nan" leaves NaN in the removed slots; "ffill" fills them
    with the last observed value (leading gaps backfill).  The mask records
    the removal either way.  Returns (dataset, removed_day_array).
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    if representation not in ("nan", "ffill"):
        raise ValueError(f"unknown representation {representation!r}")
    days = np.unique(np.floor(ds.timestamps / DAY).astype(np.int64))
    if fraction == 0.0:
        return ds, np.empty(0, dtype=np.int64)
    if days.size < 2:
        raise ValueError("dataset must span at least 2 calendar days")
    n_remove = math.ceil(fraction * days.size)
    gen = T.stream_generator("injection", seed)
    removed = np.sort(gen.choice(days, size=n_remove, replace=False))
    hit = np.isin(np.floor(ds.timestamps / DAY).astype(np.int64), removed)
    mask = ds.mask.copy()
    mask[hit] = False
    values = ds.values.copy()
    values[hit] = np.nan
    if representation == "ffill":
        values = forward_fill(values, mask)
    return replace(ds, values=values, mask=mask), removed


def forward_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill unobserved slots with the previous observed value per channel;
    leading gaps take the first observed value."""
    out = values.copy()
    for j in range(values.shape[1]):
        obs = np.nonzero(mask[:, j])[0]
        idx = np.searchsorted(obs, np.arange(values.shape[0]), side="right") - 1
        idx = np.clip(idx, 0, obs.size - 1)
        out[:, j] = values[obs[idx], j]
    return out


# ---------------------------------------------------------------------------
# patch grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelGrid:
    """Partition of the level-``level`` sequence into patches of ``patch_len``."""

    level: int
    patch_len: int
    fine_times: np.ndarray        # (n_patches, w) level-scale times
    coarse_times: np.ndarray      # (n_patches,) = fine end time / w
    patch_bounds: np.ndarray      # (n_patches, 2) = (t_s, t_e)
    source_index: np.ndarray | None = None  # level-0 only: original row ids

    @property
    def n_patches(self) -> int:
        return self.coarse_times.size


class GridError(ValueError):
    pass


def rescale_times(times, offset: float, scale: float) -> np.ndarray:
    return (np.asarray(times, dtype=np.float64) - offset) / scale


def build_level_grids(times, w: int, levels: int, *, offset=None, scale=None,
                      source_index=None):
    """Grids for ``levels`` rounds of patching over surviving times.

    ``times`` are raw (epoch-scale) survivor timestamps.  They are shifted
    by ``offset`` and divided by ``scale`` (defaults: first time, mean gap)
    so the level-0 mean gap is 1.  The sequence is left-truncated to the
    largest multiple of w^levels.  Returns (grids, offset, scale).
    """
    t_raw = np.asarray(times, dtype=np.float64)
    need = w ** levels
    if t_raw.size < need:
        raise GridError(f"need at least {need} surviving observations for"
                        f" w={w}, levels={levels}; got {t_raw.size}")
    if offset is None:
        offset = float(t_raw[0])
    if scale is None:
        scale = float(np.diff(t_raw).mean())
    keep = (t_raw.size // need) * need
    t = rescale_times(t_raw[-keep:], offset, scale)
    src = None
    if source_index is not None:
        src = np.asarray(source_index)[-keep:]
    grids = []
    for m in range(levels):
        n_patches = t.size // w
        fine = t[: n_patches * w].reshape(n_patches, w)
        coarse = fine[:, -1] / w
        bounds = np.stack([fine[:, 0], fine[:, -1]], axis=1)
        grids.append(LevelGrid(level=m, patch_len=w, fine_times=fine,
                               coarse_times=coarse, patch_bounds=bounds,
                               source_index=(src.reshape(n_patches, w)
                                             if m == 0 and src is not None
                                             else None)))
        t = coarse
        src = None
    return grids, offset, scale


def level_sizes(grids) -> list:
    sizes = [grids[0].fine_times.size]
    for g in grids:
        sizes.append(g.n_patches)
    return sizes


def gap_cv(times) -> float:
    """Coefficient of variation of consecutive gaps (population std / mean)."""
    t = np.asarray(times, dtype=np.float64)
    if t.size < 3:
        raise ValueError("need at least 3 times (2 gaps)")
    gaps = np.diff(t)
    return float(gaps.std() / gaps.mean())


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesWindow:
    ctx_times: np.ndarray         # (T,) epoch seconds
    ctx_values: np.ndarray        # (T, d) NaN or filled where missing
    ctx_mask: np.ndarray          # (T, d) bool
    hor_times: np.ndarray         # (L,)
    hor_values: np.ndarray        # (L, d) clean targets
    ctx_covariates: np.ndarray    # (T, c)
    hor_covariates: np.ndarray    # (L, c)

    def __post_init__(self):
        if self.ctx_times[-1] >= self.hor_times[0]:
            raise ValueError("context must precede horizon")

    @property
    def context_len(self):
        return self.ctx_times.size

    @property
    def horizon_len(self):
        return self.hor_times.size


def make_windows(ds: Dataset, context_len: int, horizon_len: int,
                 stride: int, truth_values: np.ndarray | None = None):
    """Sliding windows over rows; horizon targets come from ``truth_values``
    (the clean series) when the dataset itself was injected."""
    truth = ds.values if truth_values is None else np.asarray(truth_values)
    if truth.shape != ds.values.shape:
        raise ValueError("truth_values must align with the dataset rows")
    n = len(ds)
    windows = []
    for s in range(0, n - context_len - horizon_len + 1, stride):
        ctx = slice(s, s + context_len)
        hor = slice(s + context_len, s + context_len + horizon_len)
        if not np.isfinite(truth[hor]).all():
            continue          # horizon targets must be fully observed
        windows.append(TimeSeriesWindow(
            ctx_times=ds.timestamps[ctx],
            ctx_values=ds.values[ctx],
            ctx_mask=ds.mask[ctx],
            hor_times=ds.timestamps[hor],
            hor_values=truth[hor],
            ctx_covariates=time_covariates(ds.timestamps[ctx]),
            hor_covariates=time_covariates(ds.timestamps[hor])))
    return windows


def split_dataset(ds: Dataset, fractions=(0.7, 0.1, 0.2)):
    """Chronological train/val/test split by row count."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(ds)
    a = int(fractions[0] * n)
    b = a + int(fractions[1] * n)
    parts = []
    for lo, hi in ((0, a), (a, b), (b, n)):
        sl = slice(lo, hi)
        parts.append(replace(ds, timestamps=ds.timestamps[sl],
                             values=ds.values[sl], mask=ds.mask[sl]))
    return tuple(parts)


def last_observed(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Most recent observed value per channel (persistence baseline input)."""
    out = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        obs = np.nonzero(mask[:, j])[0]
        if obs.size == 0:
            raise ValueError(f"channel {j} has no observations")
        out[j] = values[obs[-1], j]
    return out


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

SYNTH_START = 1_599_955_200.0     # 2020-09-13 00:00:00 UTC, day-aligned origin


def sine_mix_values(timestamps, d_x: int, seed: int) -> np.ndarray:
    """Noiseless closed form of the sine-mix signal.

    Per channel: amplitudes/phases drawn from the seeded "synth" stream for
    daily, half-daily, and weekly components plus a constant offset.
    """
    t = np.asarray(timestamps, dtype=np.float64)
    gen = T.stream_generator("synth-sine", seed)
    out = np.zeros((t.size, d_x))
    for j in range(d_x):
        amps = gen.uniform(0.5, 1.5, size=3)
        phases = gen.uniform(0.0, 2.0 * math.pi, size=3)
        offset = gen.uniform(-1.0, 1.0)
        out[:, j] = (amps[0] * np.sin(2 * math.pi * t / DAY + phases[0])
                     + amps[1] * np.sin(2 * math.pi * t / (DAY / 2) + phases[1])
                     + amps[2] * np.sin(2 * math.pi * t / WEEK + phases[2])
                     + offset)
    return out


BIMODAL_DELTA = 0.5


def synth_dataset(kind: str, n: int, d_x: int, seed: int,
                  freq_seconds: float = 3600.0,
                  noise: float = 0.1) -> Dataset:
    if n < 4:
        raise ValueError("n too small")
    t = SYNTH_START + freq_seconds * np.arange(n)
    names = tuple(f"ch{j}" for j in range(d_x))
    if kind == "sine-mix":
        clean = sine_mix_values(t, d_x, seed)
        eps = T.stream_generator("synth-noise", seed).standard_normal((n, d_x))
        values = clean + noise * eps
    elif kind == "bimodal":
        # daily sine plus a per-day regime offset of +-BIMODAL_DELTA; the
        # marginal around the sine is two modes 2*delta apart (> 4 sigma)
        base = np.sin(2 * math.pi * t / DAY)[:, None] * np.ones((1, d_x))
        day_ids = np.floor(t / DAY).astype(np.int64)
        uniq, inverse = np.unique(day_ids, return_inverse=True)
        signs = T.stream_generator("synth-regime", seed).choice(
            [-1.0, 1.0], size=(uniq.size, d_x))
        eps = T.stream_generator("synth-noise", seed).standard_normal((n, d_x))
        values = base + BIMODAL_DELTA * signs[inverse] + noise * eps
    elif kind == "ou-process":
        theta, sig = 0.1, 0.5
        dt = freq_seconds / 3600.0
        eps = T.stream_generator("synth-noise", seed).standard_normal((n, d_x))
        values = np.zeros((n, d_x))
        for i in range(1, n):
            values[i] = (values[i - 1] * (1.0 - theta * dt)
                         + sig * math.sqrt(dt) * eps[i])
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return Dataset(t, values, np.ones((n, d_x), dtype=bool), names,
                   float(freq_seconds))
