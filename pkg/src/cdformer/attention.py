"""Neighborhood attention variants and context-aware position encoding.

Three uses of one multi-head kernel:
  * local self-attention: every point attends to the K points of its patch;
  * collect: max-pooled patch proxies attend to their K nearest proxies;
  * distribute: every point cross-attends to its K nearest proxies.

Per head of width d = C/H, logits are (q.k + position_bias) / sqrt(d) and the
readout is the softmax-weighted sum of (v + position_offset) over the K
neighbors, followed by an output projection over the concatenated heads.

The position terms come from three two-layer MLPs applied to the relative
offsets. In the default context-aware mode the bias is the inner product of
those embeddings with the live query/key vectors; in the static-bias mode
("qkv" ablation) the embeddings are averaged per head with no feature
interaction. With all MLP parameters zero both modes reduce bitwise to
bias-free attention.

`local_self_attention` and `neighborhood_attention_indexed` avoid projecting
duplicated rows (patch tiles, gathered proxies): projections commute with
row gathers, so results match the plain `neighborhood_attention` contract
while running the q/k/v projections on the small side of the gather.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .geometry import knn_indices, relative_offsets
from .tensor import LinearParams, Tensor

CAPE_MODES = ("context", "bias")


@dataclass
class AttentionParams:
    """Projections for one attention layer; heads must divide the width."""

    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    w_out: LinearParams
    heads: int

    def __post_init__(self):
        c = self.wq.weight.data.shape[0]
        if c % self.heads != 0:
            raise ContractError(f"channels {c} not divisible by heads {self.heads}")


@dataclass
class CapeParams:
    """Three offset MLPs (3 -> hidden -> C) producing query/key bias and value offset."""

    mlp_q: Tuple[LinearParams, LinearParams]
    mlp_k: Tuple[LinearParams, LinearParams]
    mlp_v: Tuple[LinearParams, LinearParams]
    mode: str = "context"

    def __post_init__(self):
        if self.mode not in CAPE_MODES:
            raise ContractError(f"cape mode must be one of {CAPE_MODES}, got {self.mode!r}")


@dataclass
class NeighborhoodAttentionInput:
    """One query per row, K keys/values and relative offsets per query."""

    query_feats: Tensor
    key_feats: Tensor
    value_feats: Tensor
    dp: np.ndarray

    def __post_init__(self):
        a, c = self.query_feats.data.shape
        if self.key_feats.data.shape[0] != a or self.key_feats.data.ndim != 3:
            raise ShapeError(
                f"key_feats must be A x K x C with A={a}, got {self.key_feats.data.shape}"
            )
        k = self.key_feats.data.shape[1]
        if k < 1:
            raise ContractError("neighborhood attention needs K >= 1")
        if self.value_feats.data.shape != self.key_feats.data.shape:
            raise ShapeError(
                f"value_feats {self.value_feats.data.shape} != key_feats {self.key_feats.data.shape}"
            )
        if self.dp.shape != (a, k, 3):
            raise ShapeError(f"dp must be {(a, k, 3)}, got {self.dp.shape}")


def _mlp2(x: Tensor, layers: Tuple[LinearParams, LinearParams]) -> Tensor:
    return T.linear(T.gelu(T.linear(x, layers[0])), layers[1])


def _cape_embeddings(dp: np.ndarray, p: CapeParams, dtype) -> tuple[Tensor, Tensor, Tensor]:
    dp_t = Tensor(np.asarray(dp).astype(dtype, copy=False))
    return _mlp2(dp_t, p.mlp_q), _mlp2(dp_t, p.mlp_k), _mlp2(dp_t, p.mlp_v)


def cape_terms(dp, q: Tensor, k: Tensor, p: CapeParams) -> tuple[Tensor, Tensor]:
    """Position bias (A x H x K) and value offset (A x K x C) from offsets dp.

    q is the head-split query (A x H x d), k the head-split keys (A x K x H x d).
    """
    a, heads, d = q.data.shape
    kk = k.data.shape[1]
    dp = np.asarray(dp)
    if dp.shape != (a, kk, 3):
        raise ShapeError(f"dp must be {(a, kk, 3)}, got {dp.shape}")
    e_q, e_k, e_v = _cape_embeddings(dp, p, q.data.dtype)
    e_qh = T.reshape(e_q, (a, kk, heads, d))
    e_kh = T.reshape(e_k, (a, kk, heads, d))
    if p.mode == "context":
        bias = T.add(
            T.einsum2("akhd,ahd->ahk", e_qh, q),
            T.einsum2("akhd,akhd->ahk", e_kh, k),
        )
    else:  # static per-head bias, no interaction with the live features
        bias = T.scale(
            T.add(
                T.swapaxes(T.sum_last(e_qh), 1, 2),
                T.swapaxes(T.sum_last(e_kh), 1, 2),
            ),
            1.0 / d,
        )
    return bias, e_v


def _attend(qh: Tensor, kh: Tensor, v: Tensor, dp, ap: AttentionParams, cp: Optional[CapeParams]) -> Tensor:
    """Shared core: qh (A,H,d), kh (A,K,H,d), v (A,K,C) -> output (A,C)."""
    a, heads, d = qh.data.shape
    kk = kh.data.shape[1]
    c = heads * d
    logits = T.einsum2("ahd,akhd->ahk", qh, kh)
    if cp is not None:
        bias, v_off = cape_terms(dp, qh, kh, cp)
        logits = T.add(logits, bias)
        v = T.add(v, v_off)
    alpha = T.softmax_last(T.scale(logits, 1.0 / math.sqrt(d)))
    out = T.einsum2("ahk,akhd->ahd", alpha, T.reshape(v, (a, kk, heads, d)))
    return T.linear(T.reshape(out, (a, c)), ap.w_out)


def neighborhood_attention(
    inp: NeighborhoodAttentionInput, ap: AttentionParams, cp: Optional[CapeParams]
) -> Tensor:
    """Multi-head attention of each query over its K neighbors."""
    a, c = inp.query_feats.data.shape
    kk = inp.key_feats.data.shape[1]
    heads = ap.heads
    d = c // heads
    qh = T.reshape(T.linear(inp.query_feats, ap.wq), (a, heads, d))
    kh = T.reshape(T.linear(inp.key_feats, ap.wk), (a, kk, heads, d))
    v = T.linear(inp.value_feats, ap.wv)
    return _attend(qh, kh, v, inp.dp, ap, cp)


def neighborhood_attention_indexed(
    query_feats: Tensor,
    source_feats: Tensor,
    nbr_idx: np.ndarray,
    dp: np.ndarray,
    ap: AttentionParams,
    cp: Optional[CapeParams],
) -> Tensor:
    """neighborhood_attention with keys/values = source rows selected by nbr_idx.

    Projects the source rows once and gathers afterwards; identical to
    gathering first because linear layers act row-wise.
    """
    a, c = query_feats.data.shape
    kk = nbr_idx.shape[1]
    heads = ap.heads
    d = c // heads
    qh = T.reshape(T.linear(query_feats, ap.wq), (a, heads, d))
    kh = T.reshape(T.gather_rows(T.linear(source_feats, ap.wk), nbr_idx), (a, kk, heads, d))
    v = T.gather_rows(T.linear(source_feats, ap.wv), nbr_idx)
    return _attend(qh, kh, v, dp, ap, cp)


def local_self_attention(
    patch_feats: Tensor, patch_dp: np.ndarray, ap: AttentionParams, cp: Optional[CapeParams]
) -> Tensor:
    """Full K x K attention inside every patch: M x K x C -> M x K x C.

    Equals neighborhood attention with M*K queries each attending to its own
    patch's K points, but projects each patch row once instead of K times.
    """
    m, kk, c = patch_feats.data.shape
    patch_dp = np.asarray(patch_dp)
    if patch_dp.shape != (m, kk, kk, 3):
        raise ShapeError(f"patch_dp must be {(m, kk, kk, 3)}, got {patch_dp.shape}")
    heads = ap.heads
    d = c // heads
    qh = T.reshape(T.linear(patch_feats, ap.wq), (m, kk, heads, d))
    kh = T.reshape(T.linear(patch_feats, ap.wk), (m, kk, heads, d))
    vh = T.reshape(T.linear(patch_feats, ap.wv), (m, kk, heads, d))
    logits = T.einsum2("mihd,mjhd->mhij", qh, kh)
    v_off5 = None
    if cp is not None:
        e_q, e_k, e_v = _cape_embeddings(patch_dp, cp, patch_feats.data.dtype)
        e_q5 = T.reshape(e_q, (m, kk, kk, heads, d))
        e_k5 = T.reshape(e_k, (m, kk, kk, heads, d))
        v_off5 = T.reshape(e_v, (m, kk, kk, heads, d))
        if cp.mode == "context":
            bias = T.add(
                T.einsum2("mijhd,mihd->mhij", e_q5, qh),
                T.einsum2("mijhd,mjhd->mhij", e_k5, kh),
            )
        else:
            ones = Tensor(np.ones((heads, d), dtype=patch_feats.data.dtype))
            bias = T.scale(
                T.add(
                    T.einsum2("mijhd,hd->mhij", e_q5, ones),
                    T.einsum2("mijhd,hd->mhij", e_k5, ones),
                ),
                1.0 / d,
            )
        logits = T.add(logits, bias)
    alpha = T.softmax_last(T.scale(logits, 1.0 / math.sqrt(d)))
    out = T.einsum2("mhij,mjhd->mihd", alpha, vh)
    if v_off5 is not None:
        out = T.add(out, T.einsum2("mhij,mijhd->mihd", alpha, v_off5))
    return T.reshape(
        T.linear(T.reshape(out, (m * kk, c)), ap.w_out), (m, kk, c)
    )


def collect(
    patch_out: Tensor,
    proxy_coords: np.ndarray,
    k: int,
    ap: AttentionParams,
    cp: Optional[CapeParams],
) -> Tensor:
    """Max-pool each patch into a proxy, then self-attend over proxy neighborhoods."""
    m = patch_out.data.shape[0]
    if k > m:
        raise ContractError(f"collect: k={k} exceeds proxy count {m}")
    r = T.reduce_max_axis(patch_out, axis=1)
    nbr = knn_indices(proxy_coords, proxy_coords, k)
    dp = relative_offsets(proxy_coords, np.asarray(proxy_coords)[nbr])
    return neighborhood_attention_indexed(r, r, nbr, dp, ap, cp)


def distribute(
    point_feats: Tensor,
    point_coords: np.ndarray,
    proxies: Tensor,
    proxy_coords: np.ndarray,
    k: int,
    ap: AttentionParams,
    cp: Optional[CapeParams],
) -> Tensor:
    """Cross-attend every point to its k nearest proxies."""
    m = proxies.data.shape[0]
    if k > m:
        raise ContractError(f"distribute: k={k} exceeds proxy count {m}")
    nbr = knn_indices(point_coords, proxy_coords, k)
    dp = relative_offsets(point_coords, np.asarray(proxy_coords)[nbr])
    return neighborhood_attention_indexed(point_feats, proxies, nbr, dp, ap, cp)


# --- initialization -----------------------------------------------------------------


def attention_init(rng: np.random.Generator, c: int, heads: int, dtype=np.float32) -> AttentionParams:
    return AttentionParams(
        wq=T.linear_init(rng, c, c, dtype=dtype),
        wk=T.linear_init(rng, c, c, dtype=dtype),
        wv=T.linear_init(rng, c, c, dtype=dtype),
        w_out=T.linear_init(rng, c, c, dtype=dtype),
        heads=heads,
    )


def cape_init(
    rng: np.random.Generator,
    c: int,
    hidden: Optional[int] = None,
    mode: str = "context",
    dtype=np.float32,
) -> CapeParams:
    hidden = 2 * c if hidden is None else hidden

    def mlp():
        return (T.linear_init(rng, 3, hidden, dtype=dtype), T.linear_init(rng, hidden, c, dtype=dtype))

    return CapeParams(mlp_q=mlp(), mlp_k=mlp(), mlp_v=mlp(), mode=mode)


def zero_cape(cp: CapeParams) -> None:
    """Zero every CAPE parameter in place (reduces attention to bias-free)."""
    for pair in (cp.mlp_q, cp.mlp_k, cp.mlp_v):
        for lin in pair:
            lin.weight.data[...] = 0.0
            if lin.bias is not None:
                lin.bias.data[...] = 0.0
