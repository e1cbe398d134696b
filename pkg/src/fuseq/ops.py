"""Fused single-pass ops and their deliberately naive multi-pass twins.

Fused functions call one compiled kernel each and increment
``fused_passes`` by one. The naive family mirrors eager-framework
execution: a fixed sequence of separate vectorized passes, each
materializing a fresh result array, incrementing ``naive_passes`` once per
pass. Both families implement the same math; differential tests pin them
to each other.

Naive pass decompositions (fixed, asserted in tests):

==========================  =====  ==========================================
op                          passes breakdown
==========================  =====  ==========================================
layer_norm                    3    row mean, row variance, normalize
scale_mask_softmax            7    scale, mask add, row max, subtract, exp,
                                   row sum, divide (6 without a mask)
bias_residual_activation      1-3  bias add, optional activation,
                                   optional residual add
qkv_bias_reshape              7    bias add, slice q/k/v, transpose q/k/v
bias_reshape_heads            2    bias add, transpose
merge_heads                   1    transpose-and-merge copy (the fused path
                                   writes attention context pre-merged via a
                                   strided GEMM output and needs no pass)
bias_residual_layer_norm      5    bias add, residual add, 3-pass layer norm
embed_scale_pos               3    gather, scale, position add
==========================  =====  ==========================================

An encoder layer is six fused passes against 27 naive passes (26 without a
padding mask); the exact counts are part of the test contract.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
import scipy.special

from . import kernels
from .errors import DimensionError, FullMaskError
from .tensor import OpCounters, Tensor, as_array, global_counters


class FusedPassKind(str, Enum):
    """The six per-layer fused kernel kinds of an encoder layer.

    Exactly one of each runs per encoder layer forward. ``FFN_BIAS_RESIDUAL``
    folds the layer's closing layer norm into the residual update, which is
    how a post-layer-norm layer fits two norms into six passes.
    """

    QKV_BIAS_RESHAPE = "qkv_bias_reshape"
    ATTENTION_SCALE_MASK_SOFTMAX = "attention_scale_mask_softmax"
    ATTN_OUTPUT_BIAS_RESIDUAL = "attn_output_bias_residual"
    LAYER_NORM = "layer_norm"
    FFN_BIAS_ACTIVATION = "ffn_bias_activation"
    FFN_BIAS_RESIDUAL = "ffn_bias_residual"


_ACT_IDS = {"none": 0, "relu": 1, "gelu": 2}


def _ctr(counters) -> OpCounters:
    return counters if counters is not None else global_counters()


def _out_like(out, shape, like: np.ndarray) -> np.ndarray:
    if out is None:
        return np.empty(shape, dtype=like.dtype)
    o = as_array(out)
    if o.shape != tuple(shape):
        raise DimensionError(f"output shape {o.shape}, expected {tuple(shape)}")
    return o


# ---------------------------------------------------------------------------
# fused family
# ---------------------------------------------------------------------------

def fused_layer_norm(x, gamma, beta, eps: float = 1e-5, out=None, *,
                     counters=None, kind: str = FusedPassKind.LAYER_NORM.value) -> Tensor:
    """Row-wise (x - mean) / sqrt(var + eps) * gamma + beta in one kernel.

    No mean or variance tensor is materialized; the op requests no
    intermediate buffers.
    """
    X, G, B = as_array(x), as_array(gamma), as_array(beta)
    if X.ndim != 2 or G.shape != (X.shape[1],) or B.shape != (X.shape[1],):
        raise DimensionError(f"layer_norm shapes: x {X.shape}, gamma {G.shape}, beta {B.shape}")
    if eps < 0:
        raise DimensionError("eps must be non-negative")
    O = _out_like(out, X.shape, X)
    kernels.layer_norm_kernel(X, G, B, eps, O)
    _ctr(counters).count_fused(kind, X.nbytes + O.nbytes)
    return Tensor(O)


def fused_attention_softmax(scores, scale: float, mask=None, out=None, *,
                            counters=None,
                            kind: str = FusedPassKind.ATTENTION_SCALE_MASK_SOFTMAX.value) -> Tensor:
    """softmax(scores * scale + mask) over the last axis, single pass.

    ``scores`` is [b, h, q, l]; ``mask`` is [b, 1, 1, l] (or [b, l]) holding
    0 for visible and -inf for masked key positions. A fully masked row is
    an error, not a NaN.
    """
    S = as_array(scores)
    if S.ndim != 4:
        raise DimensionError(f"attention scores must be 4D, got {S.ndim}D")
    if mask is not None:
        M = as_array(mask)
        M = M.reshape(M.shape[0], M.shape[-1])
        if M.shape != (S.shape[0], S.shape[3]):
            raise DimensionError(f"mask shape {M.shape} incompatible with scores {S.shape}")
        has_mask = True
    else:
        M = np.zeros((1, 1), dtype=S.dtype)
        has_mask = False
    O = _out_like(out, S.shape, S)
    bad = kernels.scale_mask_softmax_kernel(S, np.float32(scale), M, has_mask, O)
    if bad:
        raise FullMaskError(f"{bad} attention row(s) fully masked")
    _ctr(counters).count_fused(kind, S.nbytes + O.nbytes)
    return Tensor(O)


def fused_bias_residual_activation(x, bias, residual=None, activation: str = "none",
                                   out=None, *, counters=None, kind: str | None = None) -> Tensor:
    """activation(x + bias) (+ residual when present) in one kernel.

    GELU uses the exact erf form.
    """
    X, B = as_array(x), as_array(bias)
    if X.ndim != 2 or B.shape != (X.shape[1],):
        raise DimensionError(f"bias shapes: x {X.shape}, bias {B.shape}")
    if activation not in _ACT_IDS:
        raise DimensionError(f"unknown activation {activation!r}")
    if residual is not None:
        R = as_array(residual)
        if R.shape != X.shape:
            raise DimensionError(f"residual shape {R.shape} != x shape {X.shape}")
        has_res = True
    else:
        R = np.zeros((1, 1), dtype=X.dtype)
        has_res = False
    O = _out_like(out, X.shape, X)
    kernels.bias_residual_act_kernel(X, B, R, has_res, _ACT_IDS[activation], O)
    if kind is None:
        kind = (FusedPassKind.ATTN_OUTPUT_BIAS_RESIDUAL.value if has_res
                else FusedPassKind.FFN_BIAS_ACTIVATION.value)
    _ctr(counters).count_fused(kind, X.nbytes + O.nbytes + (R.nbytes if has_res else 0))
    return Tensor(O)


def fused_bias_residual_layer_norm(x, bias, residual, gamma, beta, eps: float = 1e-5,
                                   out=None, *, counters=None,
                                   kind: str = FusedPassKind.FFN_BIAS_RESIDUAL.value) -> Tensor:
    """layer_norm(x + bias + residual) in one kernel (closing pass of a
    post-layer-norm sublayer)."""
    X, B, R = as_array(x), as_array(bias), as_array(residual)
    G, Be = as_array(gamma), as_array(beta)
    if X.ndim != 2 or B.shape != (X.shape[1],) or R.shape != X.shape:
        raise DimensionError(f"shapes: x {X.shape}, bias {B.shape}, residual {R.shape}")
    if G.shape != (X.shape[1],) or Be.shape != (X.shape[1],):
        raise DimensionError(f"norm parameter shapes: gamma {G.shape}, beta {Be.shape}")
    O = _out_like(out, X.shape, X)
    kernels.bias_residual_layer_norm_kernel(X, B, R, G, Be, eps, O)
    _ctr(counters).count_fused(kind, X.nbytes + R.nbytes + O.nbytes)
    return Tensor(O)


def fused_qkv_bias_reshape(qkv, bias, batch: int, seq: int, heads: int,
                           q_out=None, k_out=None, v_out=None, *, counters=None,
                           kind: str = FusedPassKind.QKV_BIAS_RESHAPE.value):
    """Split a packed [batch*seq, 3d] QKV projection into head-major
    [batch, heads, seq, head_dim] tensors, adding the bias, in one pass."""
    X, B = as_array(qkv), as_array(bias)
    if X.ndim != 2 or X.shape[0] != batch * seq or X.shape[1] % 3:
        raise DimensionError(f"qkv shape {X.shape} incompatible with batch {batch} seq {seq}")
    d = X.shape[1] // 3
    if B.shape != (3 * d,) or d % heads:
        raise DimensionError(f"bias shape {B.shape} or heads {heads} incompatible with d {d}")
    hd = d // heads
    shape4 = (batch, heads, seq, hd)
    Q = _out_like(q_out, shape4, X)
    K = _out_like(k_out, shape4, X)
    V = _out_like(v_out, shape4, X)
    kernels.qkv_bias_reshape_kernel(X, B, Q, K, V, seq, hd)
    _ctr(counters).count_fused(kind, X.nbytes * 2)
    return Tensor(Q), Tensor(K), Tensor(V)


def fused_bias_reshape_heads(x, bias, batch: int, seq: int, heads: int, out=None, *,
                             counters=None, kind: str = FusedPassKind.QKV_BIAS_RESHAPE.value) -> Tensor:
    """Single-tensor variant of the QKV split (used for cross-attention
    queries)."""
    X, B = as_array(x), as_array(bias)
    if X.ndim != 2 or X.shape[0] != batch * seq or B.shape != (X.shape[1],):
        raise DimensionError(f"x shape {X.shape} incompatible with batch {batch} seq {seq}")
    d = X.shape[1]
    if d % heads:
        raise DimensionError(f"d {d} not divisible by heads {heads}")
    hd = d // heads
    O = _out_like(out, (batch, heads, seq, hd), X)
    kernels.bias_reshape_heads_kernel(X, B, O, seq, hd)
    _ctr(counters).count_fused(kind, X.nbytes * 2)
    return Tensor(O)


def fused_embed(tokens, embedding, scale: float, positions, pos_offset: int, seq: int,
                out=None, *, counters=None, kind: str = "embed_scale_pos") -> Tensor:
    """Embedding gather, sqrt(d) scaling, and positional add in one pass."""
    T, E, P = as_array(tokens), as_array(embedding), as_array(positions)
    O = _out_like(out, (T.shape[0], E.shape[1]), E)
    kernels.embed_scale_pos_kernel(T, E, np.float32(scale), P, pos_offset, seq, O)
    _ctr(counters).count_fused(kind, O.nbytes * 2)
    return Tensor(O)


# ---------------------------------------------------------------------------
# naive family (framework-style multi-pass, fresh arrays per pass)
# ---------------------------------------------------------------------------

def naive_layer_norm(x, gamma, beta, eps: float = 1e-5, *, counters=None) -> Tensor:
    """Three separate passes with materialized mean and variance tensors."""
    X, G, B = as_array(x), as_array(gamma), as_array(beta)
    if X.ndim != 2 or G.shape != (X.shape[1],) or B.shape != (X.shape[1],):
        raise DimensionError(f"layer_norm shapes: x {X.shape}, gamma {G.shape}, beta {B.shape}")
    mean = X.mean(axis=1, keepdims=True)                      # pass 1
    var = np.square(X - mean).mean(axis=1, keepdims=True)     # pass 2
    out = (X - mean) / np.sqrt(var + np.float32(eps)) * G + B  # pass 3
    _ctr(counters).count_naive("layer_norm", 3, X.nbytes * 3, intermediates=2)
    return Tensor(out.astype(np.float32, copy=False))


def naive_attention_softmax(scores, scale: float, mask=None, *, counters=None) -> Tensor:
    S = as_array(scores)
    if S.ndim != 4:
        raise DimensionError(f"attention scores must be 4D, got {S.ndim}D")
    passes = 6
    t = S * np.float32(scale)                                  # scale
    if mask is not None:
        M = as_array(mask).reshape(S.shape[0], 1, 1, S.shape[3])
        t = t + M                                              # mask add
        passes += 1
    m = t.max(axis=-1, keepdims=True)                          # row max
    if np.isneginf(m).any():
        raise FullMaskError("fully masked attention row")
    shifted = t - m                                            # subtract
    e = np.exp(shifted)                                        # exp
    e[np.isneginf(shifted)] = 0.0
    s = e.sum(axis=-1, keepdims=True)                          # row sum
    out = e / s                                                # divide
    _ctr(counters).count_naive("attention_softmax", passes, S.nbytes * passes,
                               intermediates=passes - 1)
    return Tensor(out.astype(np.float32, copy=False))


def naive_bias_residual_activation(x, bias, residual=None, activation: str = "none", *,
                                   counters=None) -> Tensor:
    X, B = as_array(x), as_array(bias)
    if X.ndim != 2 or B.shape != (X.shape[1],):
        raise DimensionError(f"bias shapes: x {X.shape}, bias {B.shape}")
    if activation not in _ACT_IDS:
        raise DimensionError(f"unknown activation {activation!r}")
    t = X + B                                                  # bias add
    passes = 1
    if activation == "relu":
        t = np.maximum(t, np.float32(0))                       # activation
        passes += 1
    elif activation == "gelu":
        t = np.float32(0.5) * t * (1.0 + scipy.special.erf(t / np.float32(np.sqrt(2.0))))
        passes += 1
    if residual is not None:
        R = as_array(residual)
        if R.shape != X.shape:
            raise DimensionError(f"residual shape {R.shape} != x shape {X.shape}")
        t = t + R                                              # residual add
        passes += 1
    _ctr(counters).count_naive("bias_residual_activation", passes, X.nbytes * passes,
                               intermediates=passes - 1)
    return Tensor(t.astype(np.float32, copy=False))


def naive_bias_residual_layer_norm(x, bias, residual, gamma, beta, eps: float = 1e-5, *,
                                   counters=None) -> Tensor:
    t = naive_bias_residual_activation(x, bias, residual, "none", counters=counters)
    return naive_layer_norm(t, gamma, beta, eps, counters=counters)


def naive_qkv_bias_reshape(qkv, bias, batch: int, seq: int, heads: int, *, counters=None):
    """Bias add, three slice copies, three head transposes: seven passes."""
    X, B = as_array(qkv), as_array(bias)
    d = X.shape[1] // 3
    hd = d // heads
    t = X + B                                                  # bias add
    q = t[:, :d].copy()                                        # slice x3
    k = t[:, d:2 * d].copy()
    v = t[:, 2 * d:].copy()
    outs = []
    for part in (q, k, v):                                     # transpose x3
        outs.append(np.ascontiguousarray(
            part.reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3)))
    _ctr(counters).count_naive("qkv_bias_reshape", 7, X.nbytes * 4, intermediates=4)
    return Tensor(outs[0]), Tensor(outs[1]), Tensor(outs[2])


def naive_bias_reshape_heads(x, bias, batch: int, seq: int, heads: int, *, counters=None) -> Tensor:
    X, B = as_array(x), as_array(bias)
    d = X.shape[1]
    hd = d // heads
    t = X + B                                                  # bias add
    out = np.ascontiguousarray(t.reshape(batch, seq, heads, hd).transpose(0, 2, 1, 3))
    _ctr(counters).count_naive("bias_reshape_heads", 2, X.nbytes * 2, intermediates=1)
    return Tensor(out)


def naive_merge_heads(ctx4, *, counters=None) -> Tensor:
    """[b, h, s, e] -> [b*s, h*e] transpose-and-merge copy (one pass)."""
    C = as_array(ctx4)
    b, h, s, e = C.shape
    out = np.ascontiguousarray(C.transpose(0, 2, 1, 3)).reshape(b * s, h * e)
    _ctr(counters).count_naive("merge_heads", 1, C.nbytes, intermediates=0)
    return Tensor(out)


def naive_embed(tokens, embedding, scale: float, positions, pos_offset: int, seq: int, *,
                counters=None) -> Tensor:
    T, E, P = as_array(tokens), as_array(embedding), as_array(positions)
    g = E[T]                                                   # gather
    g = g * np.float32(scale)                                  # scale
    pos_rows = P[np.arange(T.shape[0]) % seq + pos_offset]
    out = g + pos_rows                                         # position add
    _ctr(counters).count_naive("embed_scale_pos", 3, g.nbytes * 3, intermediates=2)
    return Tensor(out.astype(np.float32, copy=False))
