"""Pre-norm attention blocks that refine embeddings within one level.

Encoder refiners are causal: position i may attend to positions <= i only,
enforced through the softmax mask so excluded weights are exactly zero and
carry no gradient.  Decoder refiners attend bidirectionally over their own
sequence and cross-attend to the encoder features of the same level.  There
are no positional encodings; order information arrives through the time
covariates embedded upstream.

Output projections start at zero, so a freshly initialized stack is the
identity map and training grows the refinement from the skip path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorops as T


@dataclass
class AttentionRecord:
    """One softmax map captured during a forward pass, for diagnostics."""

    name: str
    weights: np.ndarray        # (B, heads, Lq, Lk)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    mu = T.tmean(x, axis=-1, keepdims=True)
    var = T.tmean(T.square(x - mu), axis=-1, keepdims=True)
    return (x - mu) / T.tsqrt(var + eps) * gain + bias


def _ln(x, p):
    return layer_norm(x, p["g"], p["b"])


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _split_heads(x, n_heads: int):
    b, l, d = x.shape
    return T.swapaxes(T.reshape(x, (b, l, n_heads, d // n_heads)), 1, 2)


def attention(q_in, kv_in, p, n_heads: int, mask=None, record=None,
              name: str = "attn") -> T.Tensor:
    """Multi-head scaled dot-product attention; q_in (B, Lq, d) attends over
    kv_in (B, Lk, d)."""
    b, lq, d = q_in.shape
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    q = _split_heads(T.matmul(q_in, p["wq"]), n_heads)
    k = _split_heads(T.matmul(kv_in, p["wk"]), n_heads)
    v = _split_heads(T.matmul(kv_in, p["wv"]), n_heads)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1, mask=mask)
    if record is not None:
        record.append(AttentionRecord(name, np.copy(weights.data)))
    out = T.swapaxes(T.matmul(weights, v), 1, 2)
    return T.matmul(T.reshape(out, (b, lq, d)), p["wo"])


def _ff(u, p):
    gated = T.swish(T.matmul(u, p["gate"])) * T.matmul(u, p["value"])
    return T.matmul(gated, p["out"])


def refiner(x, blocks, n_heads: int, causal: bool = False, mem=None,
            record=None, name: str = "refiner") -> T.Tensor:
    """Run a stack of blocks; ``mem`` switches on cross-attention."""
    mask = causal_mask(x.shape[1]) if causal else None
    for i, blk in enumerate(blocks):
        normed = _ln(x, blk["ln_attn"])
        x = x + attention(normed, normed, blk["attn"], n_heads, mask=mask,
                          record=record, name=f"{name}.b{i}.self")
        if mem is not None:
            x = x + attention(_ln(x, blk["ln_cross"]), mem, blk["cross"],
                              n_heads, record=record,
                              name=f"{name}.b{i}.cross")
        x = x + _ff(_ln(x, blk["ln_ff"]), blk["ff"])
    return x


def _norm_params(d: int):
    return {"g": T.parameter(np.ones(d)), "b": T.parameter(np.zeros(d))}


def _attn_params(d: int, gen) -> dict:
    s = 1.0 / math.sqrt(d)
    return {
        "wq": T.parameter(s * gen.standard_normal((d, d))),
        "wk": T.parameter(s * gen.standard_normal((d, d))),
        "wv": T.parameter(s * gen.standard_normal((d, d))),
        "wo": T.parameter(np.zeros((d, d))),
    }


def refiner_params(d: int, n_blocks: int = 2, n_heads: int = 4,
                   d_ff: int | None = None, cross: bool = False,
                   seed: int = 0, stream: str = "refiner-init") -> list:
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    d_ff = 2 * d if d_ff is None else d_ff
    gen = T.stream_generator(stream, seed)
    s = 1.0 / math.sqrt(d)
    blocks = []
    for _ in range(n_blocks):
        blk = {
            "ln_attn": _norm_params(d),
            "attn": _attn_params(d, gen),
            "ln_ff": _norm_params(d),
            "ff": {
                "gate": T.parameter(s * gen.standard_normal((d, d_ff))),
                "value": T.parameter(s * gen.standard_normal((d, d_ff))),
                "out": T.parameter(np.zeros((d_ff, d))),
            },
        }
        if cross:
            blk["ln_cross"] = _norm_params(d)
            blk["cross"] = _attn_params(d, gen)
        blocks.append(blk)
    return blocks
