"""Full model assembly: embedding, CD blocks, stage pyramid, task heads.

A CD block runs four pre-norm residual steps on the points of one stage:
local self-attention inside KNN patches, collection of patch maxima into
proxies refined by neighbor self-attention, distribution of the proxies back
to every point by neighbor cross-attention, and a feed-forward layer. Stages
are separated by FPS downsampling transitions; segmentation adds an
interpolation decoder over the stage pyramid, classification pools the
coarsest stage.

Batching: clouds of equal point count are packed into one (B*N, C) feature
matrix. Patch/proxy indices are built per cloud and offset into the packed
rows, so all tensor math runs batched while neighborhoods never cross cloud
boundaries. The single-cloud functions (`cd_block`, `encoder_forward`, ...)
are the B=1 case.

The ablation switches mirror the studied variants: `collect=False` keeps
only the patch max-pool as proxy (no neighbor self-attention),
`distribute=False` replaces cross-attention with inverse-distance
interpolation of the proxies plus a linear layer. `cape_mode` selects the
position encoding: "context" (default), "bias" (no feature interaction),
"plain" (absolute-coordinate MLP added after embedding), or "none".
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    CapeParams,
    attention_init,
    cape_init,
    local_self_attention,
    neighborhood_attention_indexed,
)
from .errors import ConfigError, ContractError
from .geometry import PointCloud, farthest_point_sample, knn_indices
from .tensor import LinearParams, Tensor

CAPE_MODEL_MODES = ("context", "bias", "plain", "none")
TASKS = ("classification", "segmentation")


@dataclass
class ModelConfig:
    blocks: list
    channels: list
    heads: list
    k_neighbors: int = 16
    scale_s: int = 4
    task: str = "classification"
    num_classes: int = 8
    in_channels: int = 0  # 0: coordinates double as input features
    block_scale: Optional[int] = None  # proxies per block; defaults to scale_s
    cape_mode: str = "context"
    collect: bool = True
    distribute: bool = True
    ffn_ratio: int = 4
    cape_hidden_ratio: int = 2

    def __post_init__(self):
        if not (len(self.blocks) == len(self.channels) == len(self.heads)):
            raise ConfigError("blocks/channels/heads must have equal lengths")
        if not self.blocks:
            raise ConfigError("at least one stage required")
        for c, h in zip(self.channels, self.heads):
            if c % h != 0:
                raise ConfigError(f"channels {c} not divisible by heads {h}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.cape_mode not in CAPE_MODEL_MODES:
            raise ConfigError(f"cape_mode must be one of {CAPE_MODEL_MODES}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.k_neighbors < 1 or self.scale_s < 1:
            raise ConfigError("k_neighbors and scale_s must be >= 1")

    @property
    def proxies_scale(self) -> int:
        return self.block_scale if self.block_scale is not None else self.scale_s

    @property
    def stages(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "channels": list(self.channels),
            "heads": list(self.heads),
            "k_neighbors": self.k_neighbors,
            "scale_s": self.scale_s,
            "task": self.task,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "block_scale": self.block_scale,
            "cape_mode": self.cape_mode,
            "collect": self.collect,
            "distribute": self.distribute,
            "ffn_ratio": self.ffn_ratio,
            "cape_hidden_ratio": self.cape_hidden_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = set(ModelConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**d)


# --- parameter containers ----------------------------------------------------------


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class CdBlockParams:
    lsa: AttentionParams
    nsa: Optional[AttentionParams]
    nca: Optional[AttentionParams]
    lsa_cape: Optional[CapeParams]
    nsa_cape: Optional[CapeParams]
    nca_cape: Optional[CapeParams]
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams
    norm4: NormParams
    ffn1: LinearParams
    ffn2: LinearParams
    dist_mlp: Optional[LinearParams]  # used only when distribute is disabled


@dataclass
class EmbedParams:
    lift: LinearParams
    agg: LinearParams
    norm: NormParams
    pos: Optional[tuple] = None  # (LinearParams, LinearParams) in plain-PE mode


@dataclass
class DecoderLevelParams:
    proj: LinearParams
    post: LinearParams
    norm: NormParams


@dataclass
class HeadParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class ModelParams:
    embed: EmbedParams
    stages: list  # list[list[CdBlockParams]]
    transitions: list  # list[LinearParams]
    decoder: list  # list[DecoderLevelParams], finest first; empty for classification
    head: HeadParams


def _norm_init(c: int, dtype) -> NormParams:
    return NormParams(
        Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )


def _block_init(rng, c: int, heads: int, cfg: ModelConfig, dtype) -> CdBlockParams:
    def cape():
        if cfg.cape_mode in ("context", "bias"):
            return cape_init(rng, c, hidden=cfg.cape_hidden_ratio * c, mode=cfg.cape_mode, dtype=dtype)
        return None

    return CdBlockParams(
        lsa=attention_init(rng, c, heads, dtype=dtype),
        nsa=attention_init(rng, c, heads, dtype=dtype) if cfg.collect else None,
        nca=attention_init(rng, c, heads, dtype=dtype) if cfg.distribute else None,
        lsa_cape=cape(),
        nsa_cape=cape() if cfg.collect else None,
        nca_cape=cape() if cfg.distribute else None,
        norm1=_norm_init(c, dtype),
        norm2=_norm_init(c, dtype),
        norm3=_norm_init(c, dtype),
        norm4=_norm_init(c, dtype),
        ffn1=T.linear_init(rng, c, cfg.ffn_ratio * c, dtype=dtype),
        ffn2=T.linear_init(rng, cfg.ffn_ratio * c, c, dtype=dtype),
        dist_mlp=None if cfg.distribute else T.linear_init(rng, c, c, dtype=dtype),
    )


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    c_in = cfg.in_channels if cfg.in_channels > 0 else 3
    c1 = cfg.channels[0]
    embed = EmbedParams(
        lift=T.linear_init(rng, c_in, c1, dtype=dtype),
        agg=T.linear_init(rng, c1, c1, dtype=dtype),
        norm=_norm_init(c1, dtype),
        pos=(
            (T.linear_init(rng, 3, c1, dtype=dtype), T.linear_init(rng, c1, c1, dtype=dtype))
            if cfg.cape_mode == "plain"
            else None
        ),
    )
    stages = [
        [_block_init(rng, c, h, cfg, dtype) for _ in range(n)]
        for n, c, h in zip(cfg.blocks, cfg.channels, cfg.heads)
    ]
    transitions = [
        T.linear_init(rng, cfg.channels[i], cfg.channels[i + 1], dtype=dtype)
        for i in range(cfg.stages - 1)
    ]
    decoder = []
    if cfg.task == "segmentation":
        for i in range(cfg.stages - 1):
            ci, cj = cfg.channels[i], cfg.channels[i + 1]
            decoder.append(
                DecoderLevelParams(
                    proj=T.linear_init(rng, cj, ci, dtype=dtype),
                    post=T.linear_init(rng, ci, ci, dtype=dtype),
                    norm=_norm_init(ci, dtype),
                )
            )
    c_last = cfg.channels[-1]
    c_head = c_last if cfg.task == "classification" else cfg.channels[0]
    head = HeadParams(
        fc1=T.linear_init(rng, c_head, c_head, dtype=dtype),
        fc2=T.linear_init(rng, c_head, cfg.num_classes, dtype=dtype),
    )
    return ModelParams(embed, stages, transitions, decoder, head)


# --- parameter naming ---------------------------------------------------------------


def _named_linear(out, name, lp: Optional[LinearParams]):
    if lp is None:
        return
    out[f"{name}.weight"] = lp.weight
    if lp.bias is not None:
        out[f"{name}.bias"] = lp.bias


def _named_norm(out, name, npar: NormParams):
    out[f"{name}.gamma"] = npar.gamma
    out[f"{name}.beta"] = npar.beta


def _named_attn(out, name, ap: Optional[AttentionParams]):
    if ap is None:
        return
    for sub, lp in (("wq", ap.wq), ("wk", ap.wk), ("wv", ap.wv), ("w_out", ap.w_out)):
        _named_linear(out, f"{name}.{sub}", lp)


def _named_cape(out, name, cp: Optional[CapeParams]):
    if cp is None:
        return
    for sub, pair in (("mlp_q", cp.mlp_q), ("mlp_k", cp.mlp_k), ("mlp_v", cp.mlp_v)):
        _named_linear(out, f"{name}.{sub}0", pair[0])
        _named_linear(out, f"{name}.{sub}1", pair[1])


def named_params(params: ModelParams) -> dict:
    out: dict = {}
    _named_linear(out, "embed.lift", params.embed.lift)
    _named_linear(out, "embed.agg", params.embed.agg)
    _named_norm(out, "embed.norm", params.embed.norm)
    if params.embed.pos is not None:
        _named_linear(out, "embed.pos0", params.embed.pos[0])
        _named_linear(out, "embed.pos1", params.embed.pos[1])
    for i, blocks in enumerate(params.stages):
        for j, blk in enumerate(blocks):
            p = f"stage{i}.block{j}"
            _named_attn(out, f"{p}.lsa", blk.lsa)
            _named_attn(out, f"{p}.nsa", blk.nsa)
            _named_attn(out, f"{p}.nca", blk.nca)
            _named_cape(out, f"{p}.lsa_cape", blk.lsa_cape)
            _named_cape(out, f"{p}.nsa_cape", blk.nsa_cape)
            _named_cape(out, f"{p}.nca_cape", blk.nca_cape)
            for nname, npar in (
                ("norm1", blk.norm1),
                ("norm2", blk.norm2),
                ("norm3", blk.norm3),
                ("norm4", blk.norm4),
            ):
                _named_norm(out, f"{p}.{nname}", npar)
            _named_linear(out, f"{p}.ffn1", blk.ffn1)
            _named_linear(out, f"{p}.ffn2", blk.ffn2)
            _named_linear(out, f"{p}.dist_mlp", blk.dist_mlp)
    for i, tr in enumerate(params.transitions):
        _named_linear(out, f"transition{i}", tr)
    for i, lvl in enumerate(params.decoder):
        _named_linear(out, f"decoder{i}.proj", lvl.proj)
        _named_linear(out, f"decoder{i}.post", lvl.post)
        _named_norm(out, f"decoder{i}.norm", lvl.norm)
    _named_linear(out, "head.fc1", params.head.fc1)
    _named_linear(out, "head.fc2", params.head.fc2)
    return out


def count_params(cfg: ModelConfig) -> int:
    """Total scalar parameter count of a freshly built model."""
    return sum(p.data.size for p in named_params(init_params(cfg, seed=0)).values())


# --- batched index plumbing -----------------------------------------------------------


def _batched_fps(coords: np.ndarray, m: int) -> np.ndarray:
    """coords (B,N,3) -> local center indices (B,m)."""
    return np.stack([farthest_point_sample(c, m) for c in coords])


def _batched_knn(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """(B,Mq,3) x (B,N,3) -> local neighbor indices (B,Mq,k)."""
    return np.stack([knn_indices(q, p, k) for q, p in zip(queries, points)])


def _globalize(idx_local: np.ndarray, rows_per_cloud: int) -> np.ndarray:
    """Offset per-cloud indices (B, ...) into packed row space."""
    b = idx_local.shape[0]
    offsets = (np.arange(b, dtype=np.int64) * rows_per_cloud).reshape(
        (b,) + (1,) * (idx_local.ndim - 1)
    )
    return (idx_local + offsets).reshape((-1,) + idx_local.shape[2:])


def _interp_plan(src: np.ndarray, dst: np.ndarray):
    """Inverse-distance weights over the 3 nearest sources (single cloud)."""
    kk = min(3, src.shape[0])
    idx = knn_indices(dst, src, kk)
    diff = src[idx] - dst[:, None, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    w = 1.0 / (d + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    exact = d[:, 0] < 1e-8
    if exact.any():
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return idx, w


class _StageCache:
    """Per-stage index plans; coordinates are fixed inside a stage, so this is
    computed once and reused by every block of the stage (result-identical to
    recomputation)."""

    def __init__(self, coords: np.ndarray, cfg: ModelConfig):
        b, n, _ = coords.shape
        k = cfg.k_neighbors
        if n < k:
            raise ContractError(f"cd_block needs N >= K, got N={n}, K={k}")
        m = -(-n // cfg.proxies_scale)
        centers = _batched_fps(coords, m)
        nbr = _batched_knn(
            np.take_along_axis(coords, centers[..., None], axis=1), coords, k
        )
        self.b, self.n, self.m, self.k = b, n, m, k
        self.nbr_global = _globalize(nbr, n)  # (B*M, K)
        self.scatter_rows = self.nbr_global.reshape(-1)  # (B*M*K,)
        pc = np.take_along_axis(
            coords[:, :, None, :], nbr[..., None], axis=1
        )  # (B, M, K, 3) member coords
        self.patch_dp = (pc[:, :, None, :, :] - pc[:, :, :, None, :]).reshape(
            b * m, k, k, 3
        )
        self.proxy_coords = np.take_along_axis(coords, centers[..., None], axis=1)  # (B,M,3)
        self.proxy_coords_flat = self.proxy_coords.reshape(b * m, 3)

        self.k_proxy = min(k, m)
        nsa_nbr = _batched_knn(self.proxy_coords, self.proxy_coords, self.k_proxy)
        self.nsa_nbr_global = _globalize(nsa_nbr, m)  # (B*M, k_proxy)
        self.nsa_dp = (
            np.take_along_axis(self.proxy_coords[:, :, None, :], nsa_nbr[..., None], axis=1)
            - self.proxy_coords[:, :, None, :]
        ).reshape(b * m, self.k_proxy, 3)

        nca_nbr = _batched_knn(coords, self.proxy_coords, self.k_proxy)
        self.nca_nbr_global = _globalize(nca_nbr, m)  # (B*N, k_proxy)
        self.nca_dp = (
            np.take_along_axis(self.proxy_coords[:, :, None, :], nca_nbr[..., None], axis=1)
            - coords[:, :, None, :]
        ).reshape(b * n, self.k_proxy, 3)

        self.interp = None
        if not cfg.distribute:
            plans = [_interp_plan(self.proxy_coords[i], coords[i]) for i in range(b)]
            self.interp = (
                _globalize(np.stack([p[0] for p in plans]), m),
                np.stack([p[1] for p in plans]).reshape(b * n, -1),
            )


def _ln(x: Tensor, npar: NormParams) -> Tensor:
    return T.layer_norm(x, npar.gamma, npar.beta, 1e-5)


def _cd_block_packed(x: Tensor, cache: _StageCache, blk: CdBlockParams, cfg: ModelConfig) -> Tensor:
    b, n, m, k = cache.b, cache.n, cache.m, cache.k
    c = x.data.shape[-1]

    # local self-attention inside patches, averaged back onto points
    patches = T.gather_rows(_ln(x, blk.norm1), cache.nbr_global)  # (B*M, K, C)
    lsa_out = local_self_attention(patches, cache.patch_dp, blk.lsa, blk.lsa_cape)
    x1 = T.add(
        x, T.scatter_mean(T.reshape(lsa_out, (b * m * k, c)), cache.scatter_rows, b * n)
    )

    # collect: patch max -> proxies, optionally refined by neighbor self-attention
    patches2 = T.gather_rows(_ln(x1, blk.norm2), cache.nbr_global)
    proxies = T.reduce_max_axis(patches2, axis=1)  # (B*M, C)
    if cfg.collect:
        proxies = neighborhood_attention_indexed(
            proxies, proxies, cache.nsa_nbr_global, cache.nsa_dp, blk.nsa, blk.nsa_cape
        )

    # distribute proxies back to points
    if cfg.distribute:
        delta = neighborhood_attention_indexed(
            _ln(x1, blk.norm3), proxies, cache.nca_nbr_global, cache.nca_dp, blk.nca, blk.nca_cape
        )
    else:
        idx, w = cache.interp
        gathered = T.gather_rows(proxies, idx)
        up = T.einsum2("nkc,nk->nc", gathered, Tensor(w.astype(x.data.dtype)))
        delta = T.linear(up, blk.dist_mlp)
    x2 = T.add(x1, delta)

    ffn = T.linear(T.gelu(T.linear(_ln(x2, blk.norm4), blk.ffn1)), blk.ffn2)
    return T.add(x2, ffn)


def _embed_packed(coords: np.ndarray, feats: Tensor, params: EmbedParams, cfg: ModelConfig) -> Tensor:
    b, n, _ = coords.shape
    k = min(cfg.k_neighbors, n)
    lifted = T.linear(feats, params.lift)  # (B*N, C1)
    nbr = _globalize(_batched_knn(coords, coords, k), n)
    ctx = T.reduce_max_axis(T.gather_rows(lifted, nbr), axis=1)
    out = _ln(T.linear(ctx, params.agg), params.norm)
    if params.pos is not None:
        flat = Tensor(coords.reshape(b * n, 3).astype(out.data.dtype))
        out = T.add(out, T.linear(T.gelu(T.linear(flat, params.pos[0])), params.pos[1]))
    return out


def _transition_packed(coords: np.ndarray, x: Tensor, lp: LinearParams, cfg: ModelConfig):
    b, n, _ = coords.shape
    m = -(-n // cfg.scale_s)
    k = min(cfg.k_neighbors, n)
    centers = _batched_fps(coords, m)
    new_coords = np.take_along_axis(coords, centers[..., None], axis=1)
    nbr = _globalize(_batched_knn(new_coords, coords, k), n)
    pooled = T.reduce_max_axis(T.gather_rows(x, nbr), axis=1)
    return new_coords, T.linear(pooled, lp)


class CdModel:
    """Config + parameters + packed forward pass."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "CdModel":
        return CdModel(cfg, init_params(cfg, seed=seed, dtype=dtype))

    def named_params(self) -> dict:
        return named_params(self.params)

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    def _dtype(self):
        return self.params.embed.lift.weight.data.dtype

    def encoder(self, coords: np.ndarray, feats: Optional[np.ndarray]):
        """coords (B,N,3), feats (B,N,C_in) or None -> pyramid of (coords, Tensor)."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[-1] != 3:
            raise ContractError(f"coords must be (B,N,3), got {coords.shape}")
        b, n, _ = coords.shape
        if feats is None:
            if self.cfg.in_channels > 0:
                raise ConfigError("model expects input features but none were given")
            flat = coords.reshape(b * n, 3)
        else:
            feats = np.asarray(feats)
            if feats.shape[:2] != (b, n):
                raise ContractError(f"feats must be (B,N,C), got {feats.shape}")
            flat = feats.reshape(b * n, -1)
        x = _embed_packed(coords, Tensor(flat.astype(self._dtype())), self.params.embed, self.cfg)

        pyramid = []
        cur = coords
        for i, blocks in enumerate(self.params.stages):
            cache = _StageCache(cur, self.cfg)
            for blk in blocks:
                x = _cd_block_packed(x, cache, blk, self.cfg)
            pyramid.append((cur, x))
            if i < len(self.params.stages) - 1:
                cur, x = _transition_packed(cur, x, self.params.transitions[i], self.cfg)
        return pyramid

    def decode(self, pyramid):
        """Coarse-to-fine interpolation decoder -> features at full resolution."""
        coords, y = pyramid[-1]
        for i in range(len(pyramid) - 2, -1, -1):
            dst_coords, skip = pyramid[i]
            b = dst_coords.shape[0]
            plans = [_interp_plan(coords[j], dst_coords[j]) for j in range(b)]
            idx = _globalize(np.stack([p[0] for p in plans]), coords.shape[1])
            w = np.stack([p[1] for p in plans]).reshape(idx.shape[0], -1)
            up = T.einsum2(
                "nkc,nk->nc", T.gather_rows(y, idx), Tensor(w.astype(self._dtype()))
            )
            lvl = self.params.decoder[i]
            z = T.add(T.linear(up, lvl.proj), skip)
            y = T.gelu(_ln(T.linear(z, lvl.post), lvl.norm))
            coords = dst_coords
        return y

    def forward(self, coords: np.ndarray, feats: Optional[np.ndarray] = None) -> Tensor:
        """Classification: (B, U) logits. Segmentation: (B*N, U) point logits."""
        pyramid = self.encoder(coords, feats)
        if self.cfg.task == "classification":
            last_coords, x = pyramid[-1]
            b, m, _ = last_coords.shape
            pooled = T.reduce_max_axis(T.reshape(x, (b, m, x.data.shape[-1])), axis=1)
            h = self.params.head
            return T.linear(T.gelu(T.linear(pooled, h.fc1)), h.fc2)
        decoded = self.decode(pyramid)
        h = self.params.head
        return T.linear(T.gelu(T.linear(decoded, h.fc1)), h.fc2)


# --- single-cloud op surface --------------------------------------------------------


def embed_input(cloud: PointCloud, params: EmbedParams, cfg: ModelConfig) -> Tensor:
    feats = cloud.feats if cfg.in_channels > 0 else cloud.coords
    return _embed_packed(
        np.asarray(cloud.coords, dtype=np.float64)[None],
        Tensor(np.asarray(feats, dtype=np.float64).reshape(cloud.n, -1)),
        params,
        cfg,
    )


def cd_block(feats: Tensor, coords: np.ndarray, blk: CdBlockParams, cfg: ModelConfig) -> Tensor:
    cache = _StageCache(np.asarray(coords, dtype=np.float64)[None], cfg)
    return _cd_block_packed(feats, cache, blk, cfg)


def downsample_transition(feats: Tensor, coords: np.ndarray, lp: LinearParams, cfg: ModelConfig):
    new_coords, out = _transition_packed(np.asarray(coords, dtype=np.float64)[None], feats, lp, cfg)
    return out, new_coords[0]


def encoder_forward(cloud: PointCloud, cfg: ModelConfig, params: ModelParams):
    model = CdModel(cfg, params)
    feats = cloud.feats[None] if cfg.in_channels > 0 else None
    pyramid = model.encoder(np.asarray(cloud.coords)[None], feats)
    return [(c[0], x) for c, x in pyramid]


def decoder_forward(pyramid, cfg: ModelConfig, params: ModelParams) -> Tensor:
    model = CdModel(cfg, params)
    return model.decode([(c[None], x) for c, x in pyramid])


def classify_head(pyramid, params: ModelParams) -> Tensor:
    coords, x = pyramid[-1]
    m = coords.shape[0]
    pooled = T.reduce_max_axis(T.reshape(x, (1, m, x.data.shape[-1])), axis=1)
    return T.reshape(
        T.linear(T.gelu(T.linear(pooled, params.head.fc1)), params.head.fc2), (-1,)
    )


def segment_head(decoded: Tensor, params: ModelParams) -> Tensor:
    return T.linear(T.gelu(T.linear(decoded, params.head.fc1)), params.head.fc2)


# --- checkpointing ---------------------------------------------------------------------


def save_checkpoint(path, model: CdModel, meta: Optional[dict] = None, opt_state=None) -> None:
    """Directory layout: config.json, meta.json, params/<dotted.name>.cdt,
    optional opt/<name>.m.cdt + .v.cdt + opt.json."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as f:
        json.dump(model.cfg.to_dict(), f, indent=1)
    pdir = os.path.join(path, "params")
    os.makedirs(pdir, exist_ok=True)
    for name, p in model.named_params().items():
        T.write_tensor_blob(os.path.join(pdir, name + ".cdt"), p.data)
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta or {}, f, indent=1)
    if opt_state is not None:
        odir = os.path.join(path, "opt")
        os.makedirs(odir, exist_ok=True)
        with open(os.path.join(odir, "opt.json"), "w") as f:
            json.dump({"t": opt_state.t}, f)
        for name in opt_state.m:
            T.write_tensor_blob(os.path.join(odir, name + ".m.cdt"), opt_state.m[name])
            T.write_tensor_blob(os.path.join(odir, name + ".v.cdt"), opt_state.v[name])


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, meta dict, opt blobs or None)."""
    with open(os.path.join(path, "config.json")) as f:
        cfg = ModelConfig.from_dict(json.load(f))
    model = CdModel.build(cfg, seed=0, dtype=dtype)
    pdir = os.path.join(path, "params")
    for name, p in model.named_params().items():
        blob = T.read_tensor_blob(os.path.join(pdir, name + ".cdt"))
        if blob.shape != p.data.shape:
            raise ConfigError(f"checkpoint param {name} has shape {blob.shape}, expected {p.data.shape}")
        p.data = blob.astype(dtype)
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    opt = None
    odir = os.path.join(path, "opt")
    if os.path.isdir(odir):
        with open(os.path.join(odir, "opt.json")) as f:
            t = json.load(f)["t"]
        m = {}
        v = {}
        for name in model.named_params():
            m[name] = T.read_tensor_blob(os.path.join(odir, name + ".m.cdt"))
            v[name] = T.read_tensor_blob(os.path.join(odir, name + ".v.cdt"))
        opt = (t, m, v)
    return model, meta, opt
