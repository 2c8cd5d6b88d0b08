"""Command-line entry point: gen-data, train, eval, bench, grad-check.

Exit codes: 0 success, 1 contract/config error, 2 verification failure.
CDF_STRICT=1 pins BLAS/OMP to one thread (set before numpy is imported, which
is why heavy imports happen inside the command handlers) and makes runs
bitwise reproducible; bench always pins threads so slopes are meaningful.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_VERIFY = 2


def _pin_threads() -> None:
    assert "numpy" not in sys.modules, "thread pinning must happen before numpy loads"
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdformer", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--task", choices=["cls", "seg"], required=True)
    g.add_argument("--classes", type=int, default=None, help="number of shape families")
    g.add_argument("--per-class", type=int, default=32, help="training clouds per class")
    g.add_argument("--val-per-class", type=int, default=8)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty target")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", help="JSON run config file")
    t.add_argument("--preset", help="named preset (see --list-presets)")
    t.add_argument("--list-presets", action="store_true")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="output directory (checkpoints + train_log.jsonl)")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--run-epochs", type=int, help="stop after this many epochs without changing the schedule")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="attention-complexity benchmark")
    b.add_argument("--kernels", default="lsa,collect,distribute,full_attention")
    b.add_argument("--ns", default="1024,2048,4096,8192,16384")
    b.add_argument("--k", type=int, default=16)
    b.add_argument("--s", type=int, default=8)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--mem-budget", type=int, default=4 << 30, help="refusal threshold in bytes")
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--summary", default=None, help="write the slope summary JSON here too")
    b.add_argument("--backends", action="store_true", help="compare compiled vs python geometry kernels instead")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("grad-check", help="verify gradients against finite differences")
    c.add_argument("--module", default="all", choices=["all", "tensor", "attention", "model"])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)
    return p


def cmd_gen_data(args) -> int:
    from .data import CLS_FAMILY_ORDER, SEG_FAMILY_ORDER, SyntheticSpec, write_dataset

    order = CLS_FAMILY_ORDER if args.task == "cls" else SEG_FAMILY_ORDER
    n = args.classes if args.classes is not None else len(order)
    if not 1 <= n <= len(order):
        raise _usage(f"--classes must be in [1, {len(order)}] for task {args.task}")
    spec = SyntheticSpec(
        families=order[:n], points=args.points, noise_sigma=args.noise, seed=args.seed
    )
    task = "classification" if args.task == "cls" else "segmentation"
    manifest = write_dataset(
        args.out, task, spec, args.per_class, args.val_per_class, force=args.force
    )
    print(
        json.dumps(
            {
                "out": args.out,
                "task": task,
                "classes": manifest["classes"],
                "train_files": len(manifest["files"]["train"]),
                "val_files": len(manifest["files"]["val"]),
            }
        )
    )
    return EXIT_OK


def _usage(msg: str):
    from .errors import ConfigError

    return ConfigError(msg)


def _merged_run_config(args) -> dict:
    from .errors import ConfigError
    from .presets import get_preset

    run: dict = {"model": {}, "train": {}}
    if args.preset:
        run = get_preset(args.preset)
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - {"model", "train", "data", "out", "preset"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "preset" in file_cfg:
            base = get_preset(file_cfg["preset"])
            base["model"].update(file_cfg.get("model", {}))
            base["train"].update(file_cfg.get("train", {}))
            file_cfg = {**file_cfg, "model": base["model"], "train": base["train"]}
            file_cfg.pop("preset")
        run["model"].update(file_cfg.get("model", {}))
        run["train"].update(file_cfg.get("train", {}))
        for key in ("data", "out"):
            if key in file_cfg:
                run[key] = file_cfg[key]
    for key, val in (("data", args.data), ("out", args.out)):
        if val is not None:
            run[key] = val
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size), ("lr", args.lr), ("seed", args.seed)):
        if val is not None:
            run["train"][key] = val
    return run


def cmd_train(args) -> int:
    from .errors import ConfigError

    if args.list_presets:
        from .presets import PRESETS

        print("\n".join(sorted(PRESETS)))
        return EXIT_OK

    from .data import load_dataset
    from .model import CdModel, ModelConfig, load_checkpoint
    from .training import TrainConfig, train_loop

    if args.resume:
        model, meta, opt = load_checkpoint(args.resume)
        if opt is None:
            raise ConfigError(f"{args.resume}: checkpoint has no optimizer state; cannot resume")
        tc = TrainConfig.from_dict(meta["train_config"])
        data_dir = args.data or meta.get("data")
        out_dir = args.out or os.path.dirname(os.path.abspath(args.resume))
        resume_state = {
            "t": opt[0],
            "m": opt[1],
            "v": opt[2],
            "rng": meta["rng"],
            "epoch": meta["epoch"],
        }
    else:
        run = _merged_run_config(args)
        if "data" not in run:
            raise ConfigError("no dataset: pass --data or put it in the config")
        data_dir = run["data"]
        out_dir = run.get("out")
        resume_state = None

    ds = load_dataset(data_dir)
    manifest = ds["manifest"]
    n_classes = (
        len(manifest["classes"])
        if manifest["task"] == "classification"
        else manifest["num_parts"]
    )
    if args.resume:
        if model.cfg.task != manifest["task"]:
            raise ConfigError(
                f"checkpoint task {model.cfg.task!r} != dataset task {manifest['task']!r}"
            )
    else:
        run["model"]["num_classes"] = n_classes
        mc = ModelConfig.from_dict(run["model"])
        if mc.task != manifest["task"]:
            raise ConfigError(f"model task {mc.task!r} != dataset task {manifest['task']!r}")
        tc = TrainConfig.from_dict(run["train"])
        model = CdModel.build(mc, seed=tc.seed)

    meta_extra = {"data": data_dir}
    history = train_loop(
        model,
        ds["splits"]["train"],
        ds["splits"].get("val", []),
        tc,
        out_dir=out_dir,
        run_epochs=args.run_epochs,
        resume_state=resume_state,
    )
    if out_dir:
        with open(os.path.join(out_dir, "run.json"), "w") as f:
            json.dump({"train_config": tc.to_dict(), **meta_extra}, f, indent=1)
    if history:
        print(json.dumps(history[-1]))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .errors import ConfigError
    from .model import load_checkpoint
    from .training import evaluate

    model, meta, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if model.cfg.task != ds["manifest"]["task"]:
        raise ConfigError(
            f"checkpoint task {model.cfg.task!r} != dataset task {ds['manifest']['task']!r}"
        )
    items = ds["splits"].get(args.split)
    if not items:
        raise ConfigError(f"dataset has no non-empty split {args.split!r}")
    metrics = evaluate(model, items)
    print(json.dumps({"split": args.split, **metrics}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import KERNELS, fit_slope, run_backend_compare, run_scaling, write_csv
    from .errors import ContractError
    from .geometry import backend_name

    ns = [int(v) for v in args.ns.split(",") if v]
    if args.backends:
        results = run_backend_compare(ns, k=args.k, repeats=args.repeats, seed=args.seed)
        write_csv(results, args.out)
        summary = {"mode": "backend-compare", "geometry_backend": backend_name()}
        for name in sorted({r.kernel for r in results}):
            rows = [r for r in results if r.kernel == name]
            summary[name] = {str(r.n): r.median_s for r in rows}
        print(json.dumps(summary))
        return EXIT_OK

    kernels = [k for k in args.kernels.split(",") if k]
    bad = set(kernels) - set(KERNELS)
    if bad:
        raise ContractError(f"unknown kernels {sorted(bad)}; valid: {KERNELS}")
    all_results = []
    slopes = {}
    refused = []
    for kernel in kernels:
        results, refusals = run_scaling(
            kernel,
            ns,
            k=args.k,
            s=args.s,
            repeats=args.repeats,
            channels=args.channels,
            heads=args.heads,
            seed=args.seed,
            mem_budget=args.mem_budget,
        )
        all_results.extend(results)
        refused.extend(refusals)
        for r in refusals:
            print(f"refused: {r['kernel']} at N={r['N']}: {r['reason']}", file=sys.stderr)
        if len(results) >= 3:
            slopes[kernel] = fit_slope(results)
    write_csv(all_results, args.out)
    summary = {
        "slopes": slopes,
        "refusals": refused,
        "geometry_backend": backend_name(),
        "k": args.k,
        "s": args.s,
        "channels": args.channels,
        "csv": args.out,
    }
    if args.summary:
        with open(args.summary, "w") as f:
            json.dump(summary, f, indent=1)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .verify import attention_grad_checks, grad_check_model, op_grad_checks

    failures = 0
    sections = []
    if args.module in ("all", "tensor"):
        sections.append(("tensor", op_grad_checks(seed=args.seed), 1e-6))
    if args.module in ("all", "attention"):
        sections.append(("attention", attention_grad_checks(seed=args.seed), 1e-5))
    if args.module in ("all", "model"):
        sections.append(
            ("model", grad_check_model(seed=args.seed, corrupt=args.inject_error), 1e-4)
        )
    for section, errs, tol in sections:
        worst_name = max(errs, key=errs.get)
        for name, err in sorted(errs.items()):
            ok = err < tol
            if not ok:
                failures += 1
            print(f"[{'PASS' if ok else 'FAIL'}] {section}.{name}: max rel err {err:.3g} (tol {tol:g})")
        print(
            f"{section}: worst {errs[worst_name]:.3g} at {worst_name} "
            f"({'ok' if errs[worst_name] < tol else 'FAILED'})"
        )
    return EXIT_OK if failures == 0 else EXIT_VERIFY


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if os.environ.get("CDF_STRICT") == "1" or args.cmd == "bench":
        if "numpy" not in sys.modules:
            _pin_threads()
    from . import tensor
    from .errors import ContractError, VerificationError

    tensor.tune_malloc()
    try:
        return args.func(args)
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
