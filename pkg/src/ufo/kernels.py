"""Hot integration kernels: numba-compiled with a pure-numpy fallback.

These are the non-differentiable fast paths used by the timing study and
the backend benchmark.  Training and gradient checks never come through
here; they run the same math on the tape (see the resampling module), and
an agreement test pins the two paths together.

Backend selection: numba when importable, unless ``UFO_NUMBA=0`` forces the
numpy twin.  Call sites can also pass ``backend="numpy"|"numba"`` directly.

Layout contract shared by both twins:
  z0   (P, d)            initial states, one row per patch
  ext  (P, S, 3, e)      field input minus the state, at the three RK4
                         stage times (t, t+h/2, t+h) of each of S steps
  hs   (P, S)            per-step sizes (irregular grids vary per patch)
  record_every           0 = terminal state only; k = keep state after
                         every k-th step
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:                      # pragma: no cover - env dependent
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn
        return wrap


def numba_enabled() -> bool:
    if not HAS_NUMBA:
        return False
    return os.environ.get("UFO_NUMBA", "1") not in ("0", "numpy", "off")


def _resolve(backend: str | None) -> bool:
    """True = numba twin."""
    if backend is None:
        return numba_enabled()
    if backend == "numpy":
        return False
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return True
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# numpy twins
# ---------------------------------------------------------------------------

def _field_np(ext_s, z, wg, wv, wo):
    u = np.concatenate((ext_s, z), axis=1)
    g = u @ wg
    s = 1.0 / (1.0 + np.exp(-g))
    return ((g * s) * (u @ wv)) @ wo


def _rk4_patches_np(z0, ext, hs, record_every, wg, wv, wo):
    p, steps = hs.shape
    d = z0.shape[1]
    z = z0.copy()
    n_rec = steps // record_every if record_every else 0
    rec = np.empty((p, n_rec, d), dtype=z0.dtype)
    r = 0
    for s in range(steps):
        h = hs[:, s:s + 1]
        k1 = _field_np(ext[:, s, 0], z, wg, wv, wo)
        k2 = _field_np(ext[:, s, 1], z + 0.5 * h * k1, wg, wv, wo)
        k3 = _field_np(ext[:, s, 1], z + 0.5 * h * k2, wg, wv, wo)
        k4 = _field_np(ext[:, s, 2], z + h * k3, wg, wv, wo)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record_every and (s + 1) % record_every == 0:
            rec[:, r] = z
            r += 1
    return z, rec


def _rk4_sequential_np(z0, ext, hs, wg, wv, wo):
    z = z0.copy()
    for s in range(hs.shape[0]):
        h = hs[s]
        u1 = np.concatenate((ext[s, 0], z))
        g = u1 @ wg
        k1 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u1 @ wv)) @ wo
        u2 = np.concatenate((ext[s, 1], z + 0.5 * h * k1))
        g = u2 @ wg
        k2 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u2 @ wv)) @ wo
        u3 = np.concatenate((ext[s, 1], z + 0.5 * h * k2))
        g = u3 @ wg
        k3 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u3 @ wv)) @ wo
        u4 = np.concatenate((ext[s, 2], z + h * k3))
        g = u4 @ wg
        k4 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u4 @ wv)) @ wo
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


# ---------------------------------------------------------------------------
# numba twins (same math, jitted loops)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _field_nb(ext_s, z, wg, wv, wo):          # pragma: no cover - jitted
    u = np.concatenate((ext_s, z), axis=1)
    g = u @ wg
    s = 1.0 / (1.0 + np.exp(-g))
    return ((g * s) * (u @ wv)) @ wo


@njit(cache=True, nogil=True)
def _rk4_patches_nb(z0, ext, hs, record_every, wg, wv, wo):  # pragma: no cover
    p, steps = hs.shape
    d = z0.shape[1]
    z = z0.copy()
    n_rec = steps // record_every if record_every else 0
    rec = np.empty((p, n_rec, d), dtype=z0.dtype)
    r = 0
    for s in range(steps):
        h = hs[:, s:s + 1]
        k1 = _field_nb(ext[:, s, 0], z, wg, wv, wo)
        k2 = _field_nb(ext[:, s, 1], z + 0.5 * h * k1, wg, wv, wo)
        k3 = _field_nb(ext[:, s, 1], z + 0.5 * h * k2, wg, wv, wo)
        k4 = _field_nb(ext[:, s, 2], z + h * k3, wg, wv, wo)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record_every and (s + 1) % record_every == 0:
            rec[:, r] = z
            r += 1
    return z, rec


@njit(cache=True, nogil=True)
def _rk4_sequential_nb(z0, ext, hs, wg, wv, wo):  # pragma: no cover
    z = z0.copy()
    for s in range(hs.shape[0]):
        h = hs[s]
        u1 = np.concatenate((ext[s, 0], z))
        g = u1 @ wg
        k1 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u1 @ wv)) @ wo
        u2 = np.concatenate((ext[s, 1], z + 0.5 * h * k1))
        g = u2 @ wg
        k2 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u2 @ wv)) @ wo
        u3 = np.concatenate((ext[s, 1], z + 0.5 * h * k2))
        g = u3 @ wg
        k3 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u3 @ wv)) @ wo
        u4 = np.concatenate((ext[s, 2], z + h * k3))
        g = u4 @ wg
        k4 = ((g * (1.0 / (1.0 + np.exp(-g)))) * (u4 @ wv)) @ wo
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------

def rk4_patches(z0, ext, hs, record_every, wg, wv, wo, backend=None):
    """Integrate all patches simultaneously; returns (terminal, recorded)."""
    args = (np.ascontiguousarray(z0), np.ascontiguousarray(ext),
            np.ascontiguousarray(hs), int(record_every),
            np.ascontiguousarray(wg), np.ascontiguousarray(wv),
            np.ascontiguousarray(wo))
    fn = _rk4_patches_nb if _resolve(backend) else _rk4_patches_np
    return fn(*args)


def rk4_sequential(z0, ext, hs, wg, wv, wo, backend=None):
    """One whole-sequence trajectory, one step at a time (timing reference)."""
    args = (np.ascontiguousarray(z0), np.ascontiguousarray(ext),
            np.ascontiguousarray(hs), np.ascontiguousarray(wg),
            np.ascontiguousarray(wv), np.ascontiguousarray(wo))
    fn = _rk4_sequential_nb if _resolve(backend) else _rk4_sequential_np
    return fn(*args)
