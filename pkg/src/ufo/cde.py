"""Continuous-time resampling between hierarchy levels.

Downsampling integrates a neural CDE across each patch of ``w`` surviving
observations and emits the terminal state at the patch end time divided by
``w``; upsampling seeds a CDE with the coarse embedding and unrolls it
along the patch's fine times on the coarse clock, driven by time
covariates alone.  Patches never look outside their own observations, so
all patch integrations are independent and can run in parallel.

The solver is fixed-step RK4, unrolled on the tape
(discretize-then-optimize): gradients are the exact derivatives of the
discrete computation.  Everything that depends only on timestamps (step
sizes, kernel smoothing weights, covariate values at stage times) is
precomputed into a plan of plain numpy constants; only values flow through
tape operations.

Also here: the RNN and strided-convolution resamplers used by the ablation
study, and a generic per-patch reference integrator the tests use as an
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import interp
from . import tensorops as T
from .errors import IntegrationDivergedError


def lipschitz_bound(l_x: float, l_f: float, w: float) -> float:
    """Coarse-trajectory Lipschitz constant for an L_x-Lipschitz control and
    an L_f-Lipschitz field over patch duration w."""
    return l_x * (math.exp(l_f * w) - 1.0) / (l_f * w)


def swiglu_field(u, params) -> T.Tensor:
    """W_out (swish(u W_gate) * (u W_value)); bias-free, the CDE vector field."""
    gated = T.swish(T.matmul(u, params["gate"]))
    return T.matmul(gated * T.matmul(u, params["value"]), params["out"])


@dataclass
class Trajectory:
    times: np.ndarray
    states: list

    def __len__(self):
        return len(self.states)


def integrate_patch(field, z0, fine_times, steps_per_interval: int = 2) -> Trajectory:
    """Reference RK4 over one patch, recording the state at every fine time.

    ``field(t, z)`` may return tape tensors or plain arrays; the loop only
    uses arithmetic operators so both work.  This is the oracle the batched
    plans are tested against, not the production path.
    """
    ts = np.asarray(fine_times, dtype=np.float64)
    if ts.size and (np.diff(ts) <= 0).any():
        raise ValueError("fine_times must be strictly increasing")
    if steps_per_interval < 1:
        raise ValueError("steps_per_interval must be >= 1")
    z = z0
    states = [z]
    for j in range(ts.size - 1):
        h = (ts[j + 1] - ts[j]) / steps_per_interval
        t = ts[j]
        for _ in range(steps_per_interval):
            k1 = field(t, z)
            k2 = field(t + h / 2.0, z + (h / 2.0) * k1)
            k3 = field(t + h / 2.0, z + (h / 2.0) * k2)
            k4 = field(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = t + h
        arr = z.data if isinstance(z, T.Tensor) else np.asarray(z)
        if not np.isfinite(arr).all():
            raise IntegrationDivergedError(ts[j + 1])
        states.append(z)
    return Trajectory(times=ts, states=states)


# ---------------------------------------------------------------------------
# integration plans (timestamp-only precomputation)
# ---------------------------------------------------------------------------

@dataclass
class ResamplePlan:
    """Constants for batched patch integration.

    Leading dims of every array are (B, N) = (batch, patches).
    ``ctrl_weights`` is None for upsampling (no data control, covariates
    only); ``init_weights``/``emit`` distinguish the two directions.
    """

    hs: np.ndarray                    # (B, N, S)
    ext_tau: np.ndarray               # (B, N, S, 3, c) covariates at stages
    ctrl_weights: np.ndarray | None   # (B, N, S*3, w) smoothing onto patch obs
    init_weights: np.ndarray | None   # (B, N, 1, w) smoothing at patch start
    record_every: int                 # 0 = terminal only
    out_times: np.ndarray             # (B, N) or (B, N, w) emit times

    @property
    def n_steps(self):
        return self.hs.shape[-1]


SPAN_CAP = 3.0


def _stage_times(fine: np.ndarray, spi: int):
    """(.., N, w) fine times -> per-step sizes (.., N, S) and stage times
    (.., N, S, 3) with S = (w-1)*spi.

    Intervals longer than SPAN_CAP level units integrate SPAN_CAP centered
    on the interval: a fixed-step solver cannot cross a multi-day hole
    without blowing up, and centering leaves the stage times deep in the
    hole where the shrinkage prior visibly flattens the control."""
    t0 = fine[..., :-1]
    t1 = fine[..., 1:]
    span = np.minimum(t1 - t0, SPAN_CAP)
    t0 = 0.5 * (t0 + t1) - 0.5 * span          # (.., N, w-1)
    h = span / spi                             # per interval
    k = np.arange(spi)
    starts = t0[..., None] + h[..., None] * k  # (.., N, w-1, spi)
    starts = starts.reshape(*fine.shape[:-1], -1)
    hs = np.repeat(h, spi, axis=-1)
    stages = np.stack([starts, starts + hs / 2.0, starts + hs], axis=-1)
    return hs, stages


def _smooth_weights(queries: np.ndarray, obs: np.ndarray, kcfg) -> np.ndarray:
    """exp kernel weights of (.., Q) query times onto (.., w) observation
    times, normalized with the shrinkage prior; trailing dim w."""
    dist = np.abs(queries[..., None] - obs[..., None, :])
    k = np.exp(-dist / kcfg.scale)
    return k / (kcfg.lam + k.sum(axis=-1, keepdims=True))


def downsample_plan(fine_times: np.ndarray, fine_cov: np.ndarray,
                    spi: int = 2, kcfg: interp.KernelConfig = interp.KernelConfig()
                    ) -> ResamplePlan:
    """fine_times (B, N, w) in level units; fine_cov (B, N, w, c)."""
    hs, stages = _stage_times(fine_times, spi)
    b, n, s, _ = stages.shape
    c = fine_cov.shape[-1]
    flat = stages.reshape(b, n, s * 3)
    ctrl_w = _smooth_weights(flat, fine_times, kcfg)            # (B,N,S3,w)
    tau = (ctrl_w @ fine_cov).reshape(b, n, s, 3, c)
    init_w = _smooth_weights(fine_times[..., :1], fine_times, kcfg)  # (B,N,1,w)
    return ResamplePlan(hs=hs, ext_tau=tau, ctrl_weights=ctrl_w,
                        init_weights=init_w, record_every=0,
                        out_times=fine_times[..., -1] / fine_times.shape[-1])


def upsample_plan(fine_times: np.ndarray, fine_cov: np.ndarray,
                  spi: int = 2, kcfg: interp.KernelConfig = interp.KernelConfig()
                  ) -> ResamplePlan:
    """Integration runs on the coarse clock: fine times divided by w."""
    w = fine_times.shape[-1]
    scaled = fine_times / w
    hs, stages = _stage_times(scaled, spi)
    b, n, s, _ = stages.shape
    c = fine_cov.shape[-1]
    flat = stages.reshape(b, n, s * 3)
    tau_w = _smooth_weights(flat, scaled, kcfg)
    tau = (tau_w @ fine_cov).reshape(b, n, s, 3, c)
    return ResamplePlan(hs=hs, ext_tau=tau, ctrl_weights=None,
                        init_weights=None, record_every=spi,
                        out_times=fine_times)


# ---------------------------------------------------------------------------
# differentiable forward passes
# ---------------------------------------------------------------------------

def _rk4_tape(z, ext, hs, params, record_every: int):
    """Unrolled RK4 on the tape; ext (B,N,S,3,k) includes everything except
    the state.  Returns (terminal, recorded list)."""
    steps = hs.shape[-1]
    recorded = []
    for s in range(steps):
        h = hs[..., s, None]
        e1, e2, e3 = ext[:, :, s, 0], ext[:, :, s, 1], ext[:, :, s, 2]
        k1 = swiglu_field(T.concat([e1, z], axis=-1), params)
        k2 = swiglu_field(T.concat([e2, z + (h / 2.0) * k1], axis=-1), params)
        k3 = swiglu_field(T.concat([e2, z + (h / 2.0) * k2], axis=-1), params)
        k4 = swiglu_field(T.concat([e3, z + h * k3], axis=-1), params)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record_every and (s + 1) % record_every == 0:
            recorded.append(z)
    return z, recorded


def _check_finite(z: T.Tensor, out_times: np.ndarray):
    arr = z.data           # (B, N, d)
    bad = ~np.isfinite(arr).all(axis=-1)
    if bad.any():
        b, n = np.argwhere(bad)[0]
        t = out_times[b, n]
        t = t if np.ndim(t) == 0 else t[-1]
        raise IntegrationDivergedError(float(t))


def ncde_downsample(prev: T.Tensor, plan: ResamplePlan, params,
                    init_fn=None) -> T.Tensor:
    """(B, N*w, d) fine sequence -> (B, N, d) coarse embeddings.

    Control = kernel-smoothed fine sequence, initial state = NN_0 of the
    smoothed value at the patch start (``init_fn`` overrides NN_0; tests
    use identity).
    """
    b, total, d = prev.shape
    n, w = plan.ctrl_weights.shape[1], plan.ctrl_weights.shape[-1]
    if total != n * w:
        raise ValueError(f"sequence length {total} != {n} patches * {w}")
    dt = prev.data.dtype
    patch_vals = T.reshape(prev, (b, n, w, d))
    ctrl_w = plan.ctrl_weights.astype(dt)
    s = plan.n_steps
    ctrl = T.reshape(T.matmul(ctrl_w, patch_vals), (b, n, s, 3, d))
    tau = np.broadcast_to(plan.ext_tau.astype(dt), (b,) + plan.ext_tau.shape[1:])
    ext = T.concat([T.tensor(tau), ctrl], axis=-1)
    x0 = T.reshape(T.matmul(plan.init_weights.astype(dt), patch_vals), (b, n, d))
    if init_fn is None:
        z0 = T.swish(T.matmul(x0, params["init_w"]) + params["init_b"])
    else:
        z0 = init_fn(x0)
    z, _ = _rk4_tape(z0, ext, plan.hs.astype(dt), params, record_every=0)
    _check_finite(z, plan.out_times)
    return z


def ncde_upsample(coarse: T.Tensor, plan: ResamplePlan, params) -> T.Tensor:
    """(B, N, d) coarse seeds -> (B, N*w, d) fine sequence.

    The seed is the state at the first fine time; integration is driven by
    covariates only and the state is recorded at every fine time.
    """
    b, n, d = coarse.shape
    dt = coarse.data.dtype
    tau = np.broadcast_to(plan.ext_tau.astype(dt), (b,) + plan.ext_tau.shape[1:])
    z, recorded = _rk4_tape(coarse, T.tensor(tau), plan.hs.astype(dt), params,
                            record_every=plan.record_every)
    states = [coarse] + recorded          # w states per patch, seed first
    stacked = T.stack(states, axis=2)     # (B, N, w, d)
    _check_finite(z, plan.out_times)
    return T.reshape(stacked, (b, n * len(states), d))


# ---------------------------------------------------------------------------
# ablation resamplers (need a dense grid; inputs are forward-filled)
# ---------------------------------------------------------------------------

def _gru_cell(x, h, params):
    zg = T.sigmoid(T.matmul(x, params["xz"]) + T.matmul(h, params["hz"]) + params["bz"])
    rg = T.sigmoid(T.matmul(x, params["xr"]) + T.matmul(h, params["hr"]) + params["br"])
    cand = T.tanh(T.matmul(x, params["xh"]) + T.matmul(rg * h, params["hh"])
                  + params["bh"])
    one = 1.0
    return (one - zg) * h + zg * cand


def rnn_downsample(prev: T.Tensor, w: int, params) -> T.Tensor:
    """Last hidden state of a gated cell run across each patch."""
    b, total, d = prev.shape
    n = total // w
    patches = T.reshape(prev, (b, n, w, d))
    h = T.tensor(np.zeros((b, n, params["hz"].shape[0]), dtype=prev.data.dtype))
    for j in range(w):
        h = _gru_cell(patches[:, :, j], h, params)
    return h


def rnn_upsample(coarse: T.Tensor, fine_cov: np.ndarray, params) -> T.Tensor:
    """Unroll from the coarse seed over the patch covariates."""
    b, n, d = coarse.shape
    w = fine_cov.shape[2]
    cov = fine_cov.astype(coarse.data.dtype)
    h = coarse
    outs = []
    for j in range(w):
        h = _gru_cell(T.Tensor(np.ascontiguousarray(cov[:, :, j])), h, params)
        outs.append(h)
    return T.reshape(T.stack(outs, axis=2), (b, n * w, d))


def conv_downsample(prev: T.Tensor, w: int, params) -> T.Tensor:
    """Strided 1-d convolution, kernel = stride = w."""
    b, total, d = prev.shape
    n = total // w
    flat = T.reshape(prev, (b, n, w * d))
    return T.matmul(flat, params["kernel"]) + params["bias"]


def conv_upsample(coarse: T.Tensor, w: int, params) -> T.Tensor:
    """Transposed 1-d convolution with factor w."""
    b, n, d = coarse.shape
    out = T.matmul(coarse, params["kernel"]) + params["bias"]   # (B, N, w*d_out)
    d_out = out.shape[-1] // w
    return T.reshape(out, (b, n * w, d_out))


def alt_resample(kind: str, direction: str, seq: T.Tensor, w: int, params,
                 fine_cov: np.ndarray | None = None) -> T.Tensor:
    if kind == "rnn":
        if direction == "down":
            return rnn_downsample(seq, w, params)
        if direction == "up":
            return rnn_upsample(seq, fine_cov, params)
    elif kind == "conv":
        if direction == "down":
            return conv_downsample(seq, w, params)
        if direction == "up":
            return conv_upsample(seq, w, params)
    else:
        raise ValueError(f"unknown resampler kind {kind!r}")
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# inference-kernel bridge
# ---------------------------------------------------------------------------

def plan_to_kernel_args(plan: ResamplePlan, prev_values: np.ndarray | None,
                        dtype=np.float64):
    """Flatten a plan (and optionally the fine values it smooths) into the
    (P, S, 3, e) layout of the jitted kernels.  Batch and patch axes merge."""
    b, n, s = plan.hs.shape
    hs = plan.hs.reshape(b * n, s).astype(dtype)
    tau = plan.ext_tau.reshape(b * n, s, 3, -1).astype(dtype)
    if prev_values is None:
        return hs, tau
    w = plan.ctrl_weights.shape[-1]
    vals = prev_values.reshape(b, n, w, -1)
    ctrl = (plan.ctrl_weights @ vals).reshape(b * n, s, 3, -1)
    ext = np.concatenate([tau, ctrl.astype(dtype)], axis=-1)
    x0 = (plan.init_weights @ vals).reshape(b * n, -1).astype(dtype)
    return hs, ext, x0
