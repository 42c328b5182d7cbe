"""Full forecaster assembly.

The hierarchy: per-window reversible instance normalization, a linear input
projection over [values, time covariates], M rounds of (causal refiner ->
feature norm -> downsample), a diagonal Gaussian latent read off the
normalized top level, then M rounds of (feature norm -> upsample ->
cross-attending refiner) seeded by latent samples, a linear output head,
and the inverse instance normalization.  Refiners are skipped at the
bottom level on both sides; the bottom level may be long and irregular and
is handled entirely by the resamplers.

Every per-step norm here acts along the feature axis of one position.  The
alternative of normalizing along the time axis would mix future statistics
into past positions and break the encoder's causality, so it is not used.

Entry points: ``collate`` -> ``encode``/``sample_latent``/``decode`` ->
``forecast``, plus ``train_step``/``fit``/``evaluate``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import cde, data, interp, refiner, scoring
from . import tensorops as T
from .errors import TrainingDivergedError

RESAMPLER_KINDS = ("ncde", "rnn", "conv")
SIGMA_FLOOR = 1e-6
REVIN_EPS = 1e-5


def _ln(x, p):
    return refiner.layer_norm(x, p["g"], p["b"])


@dataclass(frozen=True)
class ModelConfig:
    d_x: int
    width: int = 32
    levels: int = 2
    patch_len: int = 4
    blocks: int = 2
    heads: int = 4
    d_ff: int | None = None
    cov_dim: int = data.COVARIATE_DIM
    spi: int = 2                      # solver steps per observation interval
    lam: float = interp.LAMBDA_DEFAULT
    kernel_scale: float = 1.0
    kind: str = "ncde"
    samples: int = 16                 # ensemble size inside the training loss
    skip_pre: bool = False            # skip features before instead of after
                                      # the encoder refiner

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.patch_len < 2:
            raise ValueError("patch_len must be >= 2")
        if self.width < self.cov_dim:
            raise ValueError("width must be >= covariate dim")
        if self.width % self.heads:
            raise ValueError("width must divide into heads")
        if self.kind not in RESAMPLER_KINDS:
            raise ValueError(f"unknown resampler kind {self.kind!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.spi < 1:
            raise ValueError("spi must be >= 1")

    @property
    def ff_width(self) -> int:
        return 2 * self.width if self.d_ff is None else self.d_ff

    @property
    def kcfg(self) -> interp.KernelConfig:
        return interp.KernelConfig(lam=self.lam, scale=self.kernel_scale)

    @property
    def block_size(self) -> int:
        return self.patch_len ** self.levels


@dataclass
class Batch:
    """Collated windows with uniform shapes; context rows are survivors."""

    times: np.ndarray        # (B, T)
    values: np.ndarray       # (B, T, d_x)
    mask: np.ndarray         # (B, T, d_x)
    hor_times: np.ndarray    # (B, L)
    hor_values: np.ndarray   # (B, L, d_x)

    def __len__(self):
        return self.times.shape[0]


def collate(windows, cfg: ModelConfig) -> Batch:
    """Compact each window to the model's grid and stack.

    For the continuous-time resamplers, rows with no observed channel are
    dropped (the surviving timestamps carry the irregularity); the dense
    resamplers keep the full grid.  Either way partial gaps are filled
    forward and the context is left-truncated to a multiple of w^M.
    """
    if not windows:
        raise ValueError("empty window list")
    need = cfg.block_size
    rows = []
    for wd in windows:
        if cfg.kind == "ncde":
            keep = wd.ctx_mask.any(axis=1)
            times = wd.ctx_times[keep]
            vals, mask = wd.ctx_values[keep], wd.ctx_mask[keep]
        else:
            times, vals, mask = wd.ctx_times, wd.ctx_values, wd.ctx_mask
        if not mask.all():
            vals = data.forward_fill(vals, mask)
        t_eff = (times.size // need) * need
        if t_eff < need:
            raise data.GridError(
                f"context has {times.size} surviving rows; need >= {need}")
        sl = slice(times.size - t_eff, None)
        rows.append((times[sl], vals[sl], mask[sl], wd.hor_times,
                     wd.hor_values))
    shapes = {tuple(r[0].shape + r[3].shape) for r in rows}
    if len(shapes) > 1:
        raise ValueError(f"windows collate to mixed shapes {sorted(shapes)}")
    horizon = rows[0][3].size
    if horizon % need or horizon < need:
        raise ValueError(f"horizon {horizon} not a multiple of w^M = {need}")
    if horizon // need > rows[0][0].size // need:
        raise ValueError("horizon needs more top-level positions than the "
                         "context provides")
    return Batch(*[np.stack([r[i] for r in rows]) for i in range(5)])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _linear(gen, n_in: int, n_out: int, zero: bool = False) -> dict:
    w = np.zeros((n_in, n_out)) if zero else \
        gen.standard_normal((n_in, n_out)) / np.sqrt(n_in)
    return {"w": T.parameter(w), "b": T.parameter(np.zeros(n_out))}


def _norm(d: int) -> dict:
    return {"g": T.parameter(np.ones(d)), "b": T.parameter(np.zeros(d))}


def _field(gen, n_in: int, d: int) -> dict:
    s = 1.0 / np.sqrt(n_in)
    return {"gate": T.parameter(s * gen.standard_normal((n_in, d))),
            "value": T.parameter(s * gen.standard_normal((n_in, d))),
            "out": T.parameter(s * gen.standard_normal((d, d)))}


def _resampler(gen, cfg: ModelConfig, direction: str) -> dict:
    d, c, w = cfg.width, cfg.cov_dim, cfg.patch_len
    if cfg.kind == "ncde":
        if direction == "down":
            p = _field(gen, c + 2 * d, d)
            p["init_w"] = T.parameter(gen.standard_normal((d, d)) / np.sqrt(d))
            p["init_b"] = T.parameter(np.zeros(d))
            return p
        return _field(gen, c + d, d)
    if cfg.kind == "rnn":
        n_in = d if direction == "down" else c
        p = {}
        for gate in ("z", "r", "h"):
            p[f"x{gate}"] = T.parameter(
                gen.standard_normal((n_in, d)) / np.sqrt(n_in))
            p[f"h{gate}"] = T.parameter(
                gen.standard_normal((d, d)) / np.sqrt(d))
            p[f"b{gate}"] = T.parameter(np.zeros(d))
        return p
    if direction == "down":
        return {"kernel": T.parameter(
                    gen.standard_normal((w * d, d)) / np.sqrt(w * d)),
                "bias": T.parameter(np.zeros(d))}
    return {"kernel": T.parameter(gen.standard_normal((d, w * d)) / np.sqrt(d)),
            "bias": T.parameter(np.zeros(w * d))}


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Draw every weight from the model-init stream in a fixed order."""
    gen = T.stream_generator("model-init", seed)
    m, d = cfg.levels, cfg.width
    mk_ref = lambda lvl, cross: refiner.refiner_params(
        d, cfg.blocks, cfg.heads, d_ff=cfg.ff_width, cross=cross, seed=seed,
        stream=f"refiner-{'dec' if cross else 'enc'}{lvl}")
    params = {
        "in_proj": _linear(gen, cfg.d_x + cfg.cov_dim, d),
        "enc": [[] if lvl == 0 else mk_ref(lvl, False) for lvl in range(m)],
        "pre_ds_norm": [_norm(d) for _ in range(m)],
        "ds": [_resampler(gen, cfg, "down") for _ in range(m)],
        "top_norm": _norm(d),
        "mu": _linear(gen, d, d),
        "sigma": _linear(gen, d, d, zero=True),
        "dec": [[] if lvl == 0 else mk_ref(lvl, True) for lvl in range(m)],
        "pre_us_norm": [_norm(d) for _ in range(m)],
        "us": [_resampler(gen, cfg, "up") for _ in range(m)],
        "out_proj": _linear(gen, d, cfg.d_x, zero=True),
    }
    return params


def flatten_params(tree, prefix: str = "") -> dict:
    """Nested dicts/lists of tensors -> flat {dotted-name: Tensor}."""
    flat = {}
    if isinstance(tree, T.Tensor):
        flat[prefix] = tree
    elif isinstance(tree, dict):
        for k, v in tree.items():
            flat.update(flatten_params(v, f"{prefix}.{k}" if prefix else k))
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            flat.update(flatten_params(v, f"{prefix}.{i}" if prefix else str(i)))
    else:
        raise TypeError(f"unexpected leaf {type(tree).__name__} at {prefix!r}")
    return flat


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class LatentGaussian:
    mu: T.Tensor            # (B, T_M, d)
    sigma: T.Tensor         # (B, T_M, d) strictly positive

    @property
    def length(self) -> int:
        return self.mu.shape[1]


@dataclass
class EncodeState:
    skips: list              # per level m: Tensor (B, T_m, d)
    latent: LatentGaussian
    offsets: np.ndarray      # (B,) time rescaling origin per window
    scales: np.ndarray       # (B,) time rescaling unit per window
    rev_mean: np.ndarray     # (B, 1, d_x)
    rev_scale: np.ndarray    # (B, 1, d_x)


@dataclass
class ForecastEnsemble:
    samples: np.ndarray      # (B, P, L, d_x), denormalized
    hor_times: np.ndarray    # (B, L)
    rev_mean: np.ndarray
    rev_scale: np.ndarray


def revin_stats(values: np.ndarray, mask: np.ndarray):
    """Per-window per-channel location/scale over observed entries only."""
    m = mask.astype(np.float64)
    n = m.sum(axis=1, keepdims=True)
    safe = np.maximum(n, 1.0)
    mean = (values * m).sum(axis=1, keepdims=True) / safe
    var = (m * (values - mean) ** 2).sum(axis=1, keepdims=True) / safe
    scale = np.sqrt(var) + REVIN_EPS
    mean = np.where(n > 0, mean, 0.0)
    scale = np.where(n > 0, scale, 1.0)
    return mean, scale


def _stack_grids(times: np.ndarray, cfg: ModelConfig, offsets=None,
                 scales=None):
    """Per-window level grids stacked to (B, n_m, w) arrays per level."""
    fines = [[] for _ in range(cfg.levels)]
    offs, scs = [], []
    for b in range(times.shape[0]):
        o = None if offsets is None else float(offsets[b])
        s = None if scales is None else float(scales[b])
        grids, o, s = data.build_level_grids(times[b], cfg.patch_len,
                                             cfg.levels, offset=o, scale=s)
        for lvl, g in enumerate(grids):
            fines[lvl].append(g.fine_times)
        offs.append(o)
        scs.append(s)
    return ([np.stack(f) for f in fines], np.asarray(offs), np.asarray(scs))


def _level_covs(cov: np.ndarray, w: int, levels: int) -> list:
    """(B, T, c) covariates -> per level (B, n_m, w, c); each level keeps the
    patch-end covariates of the level below."""
    out = []
    for _ in range(levels):
        b, t, c = cov.shape
        cov = cov.reshape(b, t // w, w, c)
        out.append(cov)
        cov = cov[:, :, -1]
    return out


def _batch_covs(times: np.ndarray) -> np.ndarray:
    b, t = times.shape
    return data.time_covariates(times.reshape(-1)).reshape(b, t, -1)


def _downsample(x, lvl: int, fine, covs, cfg: ModelConfig, params):
    p = params["ds"][lvl]
    if cfg.kind == "ncde":
        plan = cde.downsample_plan(fine[lvl], covs[lvl], spi=cfg.spi,
                                   kcfg=cfg.kcfg)
        return cde.ncde_downsample(x, plan, p)
    return cde.alt_resample(cfg.kind, "down", x, cfg.patch_len, p)


def _upsample(y, lvl: int, fine, covs, cfg: ModelConfig, params, tile: int):
    p = params["us"][lvl]
    if cfg.kind == "ncde":
        plan = cde.upsample_plan(fine[lvl], covs[lvl], spi=cfg.spi,
                                 kcfg=cfg.kcfg)
        return cde.ncde_upsample(y, _tile_plan(plan, tile), p)
    if cfg.kind == "rnn":
        cov = np.repeat(covs[lvl], tile, axis=0)
        return cde.alt_resample("rnn", "up", y, cfg.patch_len, p, fine_cov=cov)
    return cde.alt_resample("conv", "up", y, cfg.patch_len, p)


def _tile_plan(plan: cde.ResamplePlan, p: int) -> cde.ResamplePlan:
    """Repeat a (B, ...) plan to (B*P, ...) for jointly batched samples."""
    if p == 1:
        return plan
    rep = lambda a: None if a is None else np.repeat(a, p, axis=0)
    return replace(plan, hs=rep(plan.hs), ext_tau=rep(plan.ext_tau),
                   ctrl_weights=rep(plan.ctrl_weights),
                   init_weights=rep(plan.init_weights),
                   out_times=rep(plan.out_times))


def _tile_mem(skip: T.Tensor, p: int) -> T.Tensor:
    if p == 1:
        return skip
    b, l, d = skip.shape
    return T.reshape(T.stack([skip] * p, axis=1), (b * p, l, d))


def encode(batch: Batch, cfg: ModelConfig, params, record=None, inputs=None):
    """Context -> (per-level skip features, latent law, rescaling state).

    ``inputs`` optionally substitutes the internally built
    [normalized values, covariates] tensor, letting a caller place the
    inputs themselves on the tape (gradient diagnostics need this).
    """
    rev_mean, rev_scale = revin_stats(batch.values, batch.mask)
    cov = _batch_covs(batch.times)
    if inputs is None:
        normed = (batch.values - rev_mean) / rev_scale
        inputs = T.tensor(np.concatenate([normed, cov], axis=-1))
    x = T.matmul(inputs, params["in_proj"]["w"]) + params["in_proj"]["b"]

    if cfg.kind == "ncde":
        fine, offsets, scales = _stack_grids(batch.times, cfg)
    else:
        fine = None
        offsets = batch.times[:, 0].astype(np.float64)
        scales = np.ones(len(batch))
    covs = _level_covs(cov, cfg.patch_len, cfg.levels)

    skips = []
    for lvl in range(cfg.levels):
        refined = refiner.refiner(x, params["enc"][lvl], cfg.heads,
                                  causal=True, record=record,
                                  name=f"enc{lvl}")
        skips.append(x if cfg.skip_pre else refined)
        pre = _ln(refined, params["pre_ds_norm"][lvl])
        x = _downsample(pre, lvl, fine, covs, cfg, params)

    top = _ln(x, params["top_norm"])
    mu = T.matmul(top, params["mu"]["w"]) + params["mu"]["b"]
    sig = T.softplus(T.matmul(top, params["sigma"]["w"])
                     + params["sigma"]["b"]) + SIGMA_FLOOR
    return EncodeState(skips=skips, latent=LatentGaussian(mu, sig),
                       offsets=offsets, scales=scales,
                       rev_mean=rev_mean, rev_scale=rev_scale)


def sample_latent(lat: LatentGaussian, n: int, seed: int,
                  stream: str = "latent") -> T.Tensor:
    """(B, n, T_M, d) reparameterized draws; gradients reach mu and sigma."""
    if n < 1:
        raise ValueError("need at least one sample")
    b, t, d = lat.mu.shape
    eps = T.stream_generator(stream, seed).standard_normal((b, n, t, d))
    mu = T.reshape(lat.mu, (b, 1, t, d))
    sig = T.reshape(lat.sigma, (b, 1, t, d))
    return mu + sig * T.tensor(eps)


def decode(z: T.Tensor, state: EncodeState, hor_times: np.ndarray,
           cfg: ModelConfig, params, record=None) -> T.Tensor:
    """Latent draws (B, P, L_M, d) -> horizon embeddings (B*P, L, d)."""
    b, p, lm, d = z.shape
    horizon = hor_times.shape[1]
    if lm * cfg.block_size != horizon:
        raise ValueError(f"latent length {lm} does not cover horizon "
                         f"{horizon} at w^M = {cfg.block_size}")
    if cfg.kind == "ncde":
        fine, _, _ = _stack_grids(hor_times, cfg, offsets=state.offsets,
                                  scales=state.scales)
    else:
        fine = None
    covs = _level_covs(_batch_covs(hor_times), cfg.patch_len, cfg.levels)

    y = T.reshape(z, (b * p, lm, d))
    for lvl in reversed(range(cfg.levels)):
        y = _ln(y, params["pre_us_norm"][lvl])
        y = _upsample(y, lvl, fine, covs, cfg, params, tile=p)
        if lvl > 0:
            y = refiner.refiner(y, params["dec"][lvl], cfg.heads,
                                causal=False,
                                mem=_tile_mem(state.skips[lvl], p),
                                record=record, name=f"dec{lvl}")
    return y


def _project(y: T.Tensor, state: EncodeState, shape, cfg: ModelConfig,
             params) -> T.Tensor:
    """(B*P, L, d) embeddings -> denormalized samples (B, P, L, d_x)."""
    b, p, horizon = shape
    out = T.matmul(y, params["out_proj"]["w"]) + params["out_proj"]["b"]
    out = T.reshape(out, (b, p, horizon, cfg.d_x))
    return out * state.rev_scale[:, None] + state.rev_mean[:, None]


def forward_samples(batch: Batch, cfg: ModelConfig, params, n: int,
                    seed: int, record=None):
    """The full pipeline on the tape; returns (samples, state)."""
    state = encode(batch, cfg, params, record=record)
    z = sample_latent(state.latent, n, seed)
    lm = batch.hor_times.shape[1] // cfg.block_size
    if lm > state.latent.length:
        raise ValueError("horizon longer than the encoded latent sequence")
    z = z[:, :, state.latent.length - lm:]
    y = decode(z, state, batch.hor_times, cfg, params, record=record)
    samples = _project(y, state, (len(batch), n, batch.hor_times.shape[1]),
                       cfg, params)
    return samples, state


def forecast(batch: Batch, n_samples: int, cfg: ModelConfig, params,
             seed: int) -> ForecastEnsemble:
    with T.no_grad():
        samples, state = forward_samples(batch, cfg, params, n_samples, seed)
    return ForecastEnsemble(samples=samples.data, hor_times=batch.hor_times,
                            rev_mean=state.rev_mean,
                            rev_scale=state.rev_scale)


def export_attention(batch: Batch, cfg: ModelConfig, params, seed: int = 0):
    """Every softmax map of one forward pass (one latent sample)."""
    record = []
    with T.no_grad():
        forward_samples(batch, cfg, params, 1, seed, record=record)
    return record


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(batch: Batch, cfg: ModelConfig, params, opt: T.Adam,
               seed: int) -> float:
    samples, _ = forward_samples(batch, cfg, params, cfg.samples, seed)
    loss = scoring.ncrps_loss(samples, batch.hor_values)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"loss became {value}")
    opt.zero_grad()
    T.backward(loss)
    opt.step()
    return value


def fit(windows, cfg: ModelConfig, params, epochs: int, batch_size: int,
        seed: int, lr: float = 1e-3, clip_norm: float = 1.0) -> dict:
    """Plain minibatch loop; per-step latent seeds derive from ``seed`` and
    the global step so repeated runs replay exactly."""
    opt = T.Adam(flatten_params(params), lr=lr, clip_norm=clip_norm)
    history = {"loss": []}
    step = 0
    for epoch in range(epochs):
        order = T.stream_generator("shuffle", seed + epoch).permutation(
            len(windows))
        losses = []
        for start in range(0, len(order), batch_size):
            chosen = [windows[i] for i in order[start:start + batch_size]]
            batch = collate(chosen, cfg)
            losses.append(train_step(batch, cfg, params, opt,
                                     seed=seed * 100003 + step))
            step += 1
        history["loss"].append(float(np.mean(losses)))
    return history


def evaluate(windows, cfg: ModelConfig, params, n_samples: int = 100,
             seed: int = 0, batch_size: int = 32) -> float:
    """Mean per-window score over the collection."""
    scores = []
    for start in range(0, len(windows), batch_size):
        batch = collate(windows[start:start + batch_size], cfg)
        ens = forecast(batch, n_samples, cfg, params, seed=seed + start)
        for i in range(len(batch)):
            rep = scoring.ncrps(ens.samples[i], batch.hor_values[i])
            scores.append(rep.aggregate)
    return float(np.mean(scores))
