"""Attention-cost benchmark: wall time versus point count, fitted log-log slopes.

The three neighborhood kernels should scale near-linearly in N (patch count
M = N/S with K^2 work per patch; K proxies per query), while the dense
baseline attention is quadratic. `run_scaling` measures forward wall time on
random clouds (median over >= 5 repeats after one warm-up, inference mode)
and `fit_slope` turns each kernel's curve into a single exponent.

Memory is reported as the largest single tensor allocation observed during
the timed region (allocator peak, a cheap reproducible proxy). A kernel
whose predicted working set exceeds the budget is refused explicitly and
reported in the summary instead of the CSV.

Benchmarks are meaningful single-threaded; the CLI pins BLAS threads before
numpy loads when invoked as `cdformer bench`.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import attention_init, cape_init, collect, distribute, local_self_attention
from .errors import ContractError
from .geometry import PointCloud, patch_divide
from .tensor import Tensor

KERNELS = ("lsa", "collect", "distribute", "full_attention")


@dataclass
class BenchResult:
    kernel: str
    n: int
    k: int
    s: int
    repeats: int
    median_s: float
    mem_bytes: int


def _params(rng, c, heads, dtype=np.float32):
    ap = attention_init(rng, c, heads, dtype=dtype)
    cp = cape_init(rng, c, mode="context", dtype=dtype)
    return ap, cp


def _make_runner(kernel: str, n: int, k: int, s: int, c: int, heads: int, seed: int):
    """Untimed setup; returns a zero-arg closure running one forward pass."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1.0, 1.0, size=(n, 3))
    feats = rng.normal(size=(n, c)).astype(np.float32)
    ap, cp = _params(rng, c, heads)

    if kernel == "lsa":
        pi = patch_divide(PointCloud(coords, feats), s, k)
        patch_feats = Tensor(feats[pi.neighbor_idx])
        pc = coords[pi.neighbor_idx]
        patch_dp = (pc[:, None, :, :] - pc[:, :, None, :]).astype(np.float32)
        return lambda: local_self_attention(patch_feats, patch_dp, ap, cp)

    if kernel == "collect":
        m = -(-n // s)
        centers = patch_divide(PointCloud(coords, feats), s, k).center_idx
        patch_out = Tensor(rng.normal(size=(m, k, c)).astype(np.float32))
        proxy_coords = coords[centers]
        kk = min(k, m)
        return lambda: collect(patch_out, proxy_coords, kk, ap, cp)

    if kernel == "distribute":
        m = -(-n // s)
        centers = patch_divide(PointCloud(coords, feats), s, k).center_idx
        proxy_coords = coords[centers]
        proxies = Tensor(rng.normal(size=(m, c)).astype(np.float32))
        point_feats = Tensor(feats)
        kk = min(k, m)
        return lambda: distribute(point_feats, coords, proxies, proxy_coords, kk, ap, cp)

    if kernel == "full_attention":
        x = Tensor(feats)
        scale = 1.0 / math.sqrt(c)

        def run():
            q = T.linear(x, ap.wq)
            kmat = T.linear(x, ap.wk)
            v = T.linear(x, ap.wv)
            alpha = T.softmax_last(T.scale(T.matmul(q, T.swapaxes(kmat, 0, 1)), scale))
            return T.linear(T.matmul(alpha, v), ap.w_out)

        return run

    raise ContractError(f"unknown kernel {kernel!r}; valid: {KERNELS}")


def _predicted_bytes(kernel: str, n: int, c: int) -> int:
    if kernel == "full_attention":
        # logits + softmax output dominate
        return 2 * n * n * 4 + 4 * n * c * 4
    return 0  # neighborhood kernels stay far below any sensible budget


def run_scaling(
    kernel: str,
    ns,
    k: int = 16,
    s: int = 8,
    repeats: int = 5,
    channels: int = 32,
    heads: int = 4,
    seed: int = 0,
    mem_budget: int = 4 << 30,
):
    """Returns (results, refusals): BenchResult per completed N, refusal dicts otherwise."""
    ns = list(ns)
    if ns != sorted(ns):
        raise ContractError("Ns must be ascending")
    if repeats < 5:
        raise ContractError("repeats must be >= 5")
    if kernel not in KERNELS:
        raise ContractError(f"unknown kernel {kernel!r}; valid: {KERNELS}")
    T.tune_malloc()  # page-fault churn on big temporaries would corrupt the slopes
    results = []
    refusals = []
    for n in ns:
        need = _predicted_bytes(kernel, n, channels)
        if need > mem_budget:
            refusals.append(
                {
                    "kernel": kernel,
                    "N": n,
                    "reason": f"predicted {need} bytes exceeds budget {mem_budget}",
                }
            )
            continue
        run = _make_runner(kernel, n, k, s, channels, heads, seed)
        with T.no_grad():
            run()  # warm-up
            times = []
            T.reset_alloc_meter()
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
        results.append(
            BenchResult(
                kernel=kernel,
                n=n,
                k=k,
                s=s,
                repeats=repeats,
                median_s=float(np.median(times)),
                mem_bytes=T.peak_alloc_bytes(),
            )
        )
    return results, refusals


def fit_slope(results) -> float:
    """Ordinary least squares slope of log(median time) against log(N)."""
    if len(results) < 3:
        raise ContractError(f"fit_slope needs >= 3 results, got {len(results)}")
    xs = np.log([r.n for r in results])
    ys = np.log([r.median_s for r in results])
    if len(set(r.n for r in results)) < 2 or float(np.var(xs)) == 0.0:
        raise ContractError("fit_slope: degenerate N variance")
    xc = xs - xs.mean()
    return float((xc * (ys - ys.mean())).sum() / (xc * xc).sum())


def write_csv(results, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kernel", "N", "K", "S", "median_s", "mem_bytes"])
        for r in results:
            w.writerow([r.kernel, r.n, r.k, r.s, f"{r.median_s:.6g}", r.mem_bytes])


def run_backend_compare(ns, k: int = 16, repeats: int = 5, seed: int = 0):
    """Times the compiled vs pure-python geometry kernels on the same inputs.

    Kernel names carry the backend (e.g. "knn[compiled]"). FPS samples N/8
    centers; KNN queries all N points against N/8 targets, the distribute
    workload shape.
    """
    from .geometry import _compiled, _kernels_py

    if repeats < 5:
        raise ContractError("repeats must be >= 5")
    T.tune_malloc()
    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["compiled"] = _compiled
    results = []
    for n in ns:
        rng = np.random.default_rng(seed)
        pts = np.ascontiguousarray(rng.uniform(-1, 1, size=(n, 3)))
        m = max(1, n // 8)
        sub = np.ascontiguousarray(pts[rng.permutation(n)[:m]])
        for bname, mod in backends.items():
            fps_fn = mod.fps_kernel
            if bname == "compiled":
                knn_fn = lambda q, p, kk: mod.knn_grid_kernel(q, p, kk) if q.shape[0] * p.shape[0] > 262_144 else mod.knn_brute_kernel(q, p, kk)
            else:
                knn_fn = mod.knn_kernel
            for name, fn in (
                (f"fps[{bname}]", lambda: fps_fn(pts, m)),
                (f"knn[{bname}]", lambda: knn_fn(pts, sub, min(k, m))),
            ):
                fn()
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                results.append(
                    BenchResult(name, n, k, 8, repeats, float(np.median(times)), 0)
                )
    return results
