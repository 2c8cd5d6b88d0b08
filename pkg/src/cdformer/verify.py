"""Gradient verification: reverse-mode vs central finite differences.

Exhaustive per-element finite differencing over every parameter of a
miniature float64 model. Kept separate from the tensor-core grad_check so the
CLI can run it and report per-parameter errors.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .attention import NeighborhoodAttentionInput, attention_init, cape_init, neighborhood_attention
from .model import CdModel, ModelConfig
from .tensor import Tensor


def mini_config(task: str = "classification") -> ModelConfig:
    """Two-stage model under 5k parameters, used by the gradient-check gate."""
    return ModelConfig(
        blocks=[1, 1],
        channels=[4, 8],
        heads=[2, 2],
        k_neighbors=4,
        scale_s=3,
        task=task,
        num_classes=3,
        cape_hidden_ratio=1,
    )


def op_grad_checks(seed: int = 0, eps: float = 1e-6) -> dict:
    """Finite-difference error for each differentiable tensor op (float64)."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)))
    lin = T.LinearParams(w, Tensor(np.arange(3.0)))
    weights34 = Tensor(rng.normal(size=(3, 4)))
    other4 = Tensor(rng.normal(size=(3, 2, 2, 2)))
    idx = np.array([[0, 2], [1, 1]])

    cases = {
        "add": lambda x: T.tsum(T.add(x, Tensor(np.arange(4.0)))),
        "sub": lambda x: T.tsum(T.sub(Tensor(np.ones((3, 4))), x)),
        "mul": lambda x: T.tsum(T.mul(x, weights34)),
        "scale": lambda x: T.tsum(T.scale(x, -1.5)),
        "matmul": lambda x: T.tsum(T.matmul(x, w)),
        "einsum": lambda x: T.tsum(T.einsum2("ahd,akhd->ahk", T.reshape(x, (3, 2, 2)), other4)),
        "reshape_swap": lambda x: T.tsum(T.mul(T.swapaxes(T.reshape(x, (4, 3)), 0, 1), weights34)),
        "expand_axis": lambda x: T.tsum(T.expand_axis(T.mul(x, x), 1, 3)),
        "mean": lambda x: T.tmean(T.mul(x, x)),
        "sum_last": lambda x: T.tsum(T.mul(T.sum_last(x), Tensor(np.arange(3.0)))),
        "reduce_max": lambda x: T.tsum(T.reduce_max_axis(T.reshape(x, (2, 3, 2)), axis=1)),
        "gelu": lambda x: T.tsum(T.gelu(x)),
        "softmax": lambda x: T.tsum(T.mul(T.softmax_last(x), Tensor(np.arange(4.0)))),
        "log_softmax": lambda x: T.tsum(T.mul(T.log_softmax_last(x), Tensor(np.arange(4.0) - 2))),
        "layer_norm": lambda x: T.tsum(
            T.mul(
                T.layer_norm(x, Tensor(np.arange(1.0, 5.0)), Tensor(np.arange(4.0)), 1e-3),
                Tensor(np.arange(4.0) + 0.5),
            )
        ),
        "gather_rows": lambda x: T.tsum(
            T.mul(T.gather_rows(x, idx), Tensor(np.arange(16.0).reshape(2, 2, 4)))
        ),
        "scatter_mean": lambda x: T.tsum(
            T.mul(T.scatter_mean(x, np.array([0, 2, 2]), 4), Tensor(np.arange(16.0).reshape(4, 4)))
        ),
        "take_last": lambda x: T.tsum(T.take_last(x, np.array([1, 3, 0]))),
        "linear": lambda x: T.tsum(T.mul(T.linear(x, lin), Tensor(np.arange(9.0).reshape(3, 3)))),
    }
    return {name: T.grad_check(f, rng.normal(size=(3, 4)), eps=eps) for name, f in cases.items()}


def attention_grad_checks(seed: int = 0, eps: float = 1e-5) -> dict:
    """Finite-difference errors through neighborhood attention (A=2,K=3,C=4,H=2)."""
    rng = np.random.default_rng(seed)
    ap = attention_init(rng, 4, 2, dtype=np.float64)
    cp = cape_init(rng, 4, mode="context", dtype=np.float64)
    qf = rng.normal(size=(2, 4))
    kf = rng.normal(size=(2, 3, 4))
    vf = rng.normal(size=(2, 3, 4))
    dp = rng.normal(size=(2, 3, 3))

    def against_query(x):
        inp = NeighborhoodAttentionInput(x, Tensor(kf), Tensor(vf), dp)
        return T.tmean(neighborhood_attention(inp, ap, cp))

    def against_keys(x):
        inp = NeighborhoodAttentionInput(Tensor(qf), x, Tensor(vf), dp)
        return T.tmean(neighborhood_attention(inp, ap, cp))

    def against_values(x):
        inp = NeighborhoodAttentionInput(Tensor(qf), Tensor(kf), x, dp)
        return T.tmean(neighborhood_attention(inp, ap, cp))

    return {
        "query_feats": T.grad_check(against_query, qf, eps=eps),
        "key_feats": T.grad_check(against_keys, kf, eps=eps),
        "value_feats": T.grad_check(against_values, vf, eps=eps),
    }


def grad_check_model(
    cfg: Optional[ModelConfig] = None,
    n_points: int = 12,
    batch: int = 1,
    seed: int = 0,
    eps: float = 1e-5,
    corrupt: bool = False,
) -> dict:
    """Max relative error per parameter between backward() and finite differences.

    `corrupt` perturbs one analytic gradient before comparison; it exists as a
    negative control so callers can verify the checker actually fails.
    """
    cfg = cfg or mini_config()
    model = CdModel.build(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    coords = rng.normal(size=(batch, n_points, 3))
    feats = rng.normal(size=(batch, n_points, cfg.in_channels)) if cfg.in_channels else None

    def loss_value() -> float:
        return float(T.tmean(model.forward(coords, feats)).data)

    model.zero_grad()
    loss = T.tmean(model.forward(coords, feats))
    loss.backward()

    params = model.named_params()
    if corrupt:
        first = next(iter(params.values()))
        first.grad = first.grad + 1.0

    errs = {}
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                fp = loss_value()
                flat[i] = saved - eps
                fm = loss_value()
                flat[i] = saved
                numeric = (fp - fm) / (2.0 * eps)
                denom = max(abs(analytic[i]), abs(numeric), 1e-8)
                err = abs(analytic[i] - numeric) / denom
                if err > worst:
                    worst = err
            errs[name] = worst
    return errs
