"""Command-line entry point.

Subcommands: ``init-config``, ``gradcheck``, ``kernel``, ``train``,
``experiment <name>``, ``parse-idx``. Exit codes: 0 pass, 1 assertion
failure, 2 usage error, 3 numeric failure. ``--threads`` is honored by
exporting the BLAS thread environment variables before numpy loads, so it
only works through the console script (not after numpy is imported).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_DEFAULT_CONFIG = {
    "model": {
        "n": 64, "d": 8, "horizon": 1.0,
        "sigma_u": 1.0, "sigma_w": 1.0, "sigma_v": 1.0,
        "activation": "softplus-shifted", "seed": 0,
    },
    "solver": {"method": "rk4", "steps": 128, "rel_tol": 1e-6, "abs_tol": 1e-9},
    "dataset": {"N": 8, "seed": 0, "label_rule": "linear-teacher"},
    "train": {"steps": 50, "eta": None, "eval_every": 5,
              "pipeline": {"kind": "discrete", "L": 64}, "diagnostics": ["ntk"]},
    "kernel": {"L": 128, "pair_seed": 2025},
    "notes": {
        "model": "width n, input dim d, time horizon, variance multipliers, "
                 "activation id, init seed",
        "train.eta": "null selects lr_bound/2 from the dataset",
        "train.pipeline": "kind discrete (backprop through depth-L Euler net) "
                          "or adjoint (method/steps of the solver block)",
        "kernel": "depth L of the limit tables; pair_seed draws the probe pair",
    },
}


def _global_flags(parser, suppress: bool) -> None:
    # The same flags live on the main parser (with real defaults) and on
    # every subparser (with SUPPRESS defaults), so both positions work.
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=str,
                        default=d, help="JSON config path")
    parser.add_argument("--seed", type=int, default=d, help="override seed")
    parser.add_argument("--out", type=str,
                        default=(argparse.SUPPRESS if suppress else "out"),
                        help="output directory")
    parser.add_argument("--threads", type=int, default=d,
                        help="BLAS thread count (console script only)")
    parser.add_argument("--format", choices=("csv", "json"),
                        default=(argparse.SUPPRESS if suppress else "csv"))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odenets",
        description="Neural ODE gradients, kernel recursions, and experiments",
    )
    _global_flags(parser, suppress=False)
    parent = argparse.ArgumentParser(add_help=False)
    _global_flags(parent, suppress=True)
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("init-config", parents=[parent],
                   help="emit the annotated default config")
    sub.add_parser("gradcheck", parents=[parent],
                   help="discrete pipeline vs finite differences")
    kern = sub.add_parser("kernel", parents=[parent],
                          help="limit-kernel value for a probe pair")
    kern.add_argument("--kind", choices=("nngp", "ntk"), default="ntk")
    kern.add_argument("--L", type=int, default=None)
    sub.add_parser("train", parents=[parent],
                   help="full-batch GD with diagnostics")
    exp = sub.add_parser("experiment", parents=[parent],
                         help="run a named experiment")
    exp.add_argument("name", type=str)
    exp.add_argument("--seeds", type=int, nargs="+", default=None)
    idx = sub.add_parser("parse-idx", parents=[parent],
                         help="parse an IDX image/label pair")
    idx.add_argument("--images", required=True)
    idx.add_argument("--labels", required=True)
    idx.add_argument("--limit", type=int, default=None)
    return parser


def _load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(_DEFAULT_CONFIG))  # deep copy
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def _model_config(conf: dict, seed_override):
    from .model import ModelConfig

    m = conf["model"]
    seed = seed_override if seed_override is not None else m["seed"]
    return ModelConfig(
        n=m["n"], d=m["d"], horizon=m["horizon"], sigma_u=m["sigma_u"],
        sigma_w=m["sigma_w"], sigma_v=m["sigma_v"],
        activation=m["activation"], seed=seed,
    )


def _pipeline(conf: dict):
    pipe = conf["train"]["pipeline"]
    if pipe["kind"] == "discrete":
        return ("discrete", int(pipe["L"]))
    from .solvers import SolverSpec

    s = conf["solver"]
    return ("adjoint", SolverSpec(method=s["method"], steps=s["steps"],
                                  rel_tol=s["rel_tol"], abs_tol=s["abs_tol"]))


def _cmd_init_config(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(_DEFAULT_CONFIG, indent=2))
    print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    import numpy as np

    from .gradients import compare_grads, grad_discrete, grad_fd
    from .model import init_params

    conf = _load_config(args.config)
    cfg = _model_config(conf, args.seed)
    p = init_params(cfg)
    gen = np.random.Generator(np.random.Philox(key=cfg.seed + 1))
    x = gen.standard_normal(cfg.d)
    x /= np.linalg.norm(x)
    L = int(conf["train"]["pipeline"].get("L", 32))
    report = compare_grads(
        grad_discrete(cfg, p, x, L), grad_fd(cfg, p, x, 1e-4, ("discrete", L))
    )
    for name, (abs_err, rel_err) in report.per_block.items():
        print(f"{name}: abs={abs_err:.3e} rel={rel_err:.3e}")
    print(f"total: abs={report.abs_diff:.3e} rel={report.rel_diff:.3e}")
    return 0 if report.rel_diff <= 1e-5 else 1


def _cmd_kernel(args) -> int:
    import numpy as np

    from .kernels import gram_to_csv, nngp_tables, ntk_tables

    conf = _load_config(args.config)
    cfg = _model_config(conf, args.seed)
    L = args.L if args.L is not None else int(conf["kernel"]["L"])
    gen = np.random.Generator(
        np.random.Philox(key=int(conf["kernel"]["pair_seed"]))
    )
    x = gen.standard_normal(cfg.d)
    x /= np.linalg.norm(x)
    xbar = gen.standard_normal(cfg.d)
    xbar /= np.linalg.norm(xbar)
    if args.kind == "nngp":
        tables = nngp_tables(cfg, x, xbar, L)
        value = tables.nngp
    else:
        tables = ntk_tables(cfg, x, xbar, L)
        value = tables.ntk
    payload = {"kind": args.kind, "L": L, "kappa": tables.kappa, "value": value,
               "activation": cfg.activation}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        (out / "kernel.json").write_text(json.dumps(payload, indent=2))
    else:
        with open(out / "kernel.csv", "w") as fh:
            fh.write("kind,L,kappa,value,activation\n")
            fh.write(f"{args.kind},{L},{tables.kappa:.17g},{value:.17g},"
                     f"{cfg.activation}\n")
    print(f"{args.kind} value at L={L}: {value:.10g}")
    return 0


def _cmd_train(args) -> int:
    from .data import synth_sphere
    from .training import history_summary_json, history_to_csv, lr_bound, train

    conf = _load_config(args.config)
    cfg = _model_config(conf, args.seed)
    dconf = conf["dataset"]
    ds = synth_sphere(dconf["N"], cfg.d, dconf["seed"], dconf["label_rule"])
    tconf = conf["train"]
    eta = tconf["eta"] if tconf["eta"] is not None else lr_bound(ds) / 2
    hist = train(cfg, ds, tconf["steps"], eta,
                 diagnostics=tuple(tconf.get("diagnostics", ["ntk"])),
                 pipeline=_pipeline(conf), eval_every=tconf["eval_every"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history_to_csv(hist, out / "history.csv")
    (out / "summary.json").write_text(history_summary_json(hist))
    print(f"trained {tconf['steps']} steps: loss {hist.loss[0]:.6g} -> "
          f"{hist.loss[-1]:.6g}")
    return 0


def _cmd_experiment(args) -> int:
    from .experiments import ExperimentSpec, run_experiment

    conf = _load_config(args.config)
    seeds = args.seeds
    if seeds is None:
        base = args.seed if args.seed is not None else conf["model"]["seed"]
        seeds = list(range(base, base + 5))
    spec = ExperimentSpec(
        name=args.name,
        overrides=conf.get("experiment_overrides", {}),
        seeds=tuple(seeds),
        output_dir=args.out,
    )
    manifest = run_experiment(spec)
    status = "PASS" if manifest.passed else "FAIL"
    print(f"{args.name}: {status}")
    for key, val in manifest.details.items():
        print(f"  {key}: {val}")
    return 0 if manifest.passed else 1


def _cmd_parse_idx(args) -> int:
    import numpy as np

    from .data import dataset_to_csv, load_idx, to_sphere_dataset

    raw = load_idx(args.images, args.labels)
    print(f"{raw.count} images of {raw.rows}x{raw.cols}")
    counts = np.bincount(raw.labels, minlength=10)
    print("label histogram:", counts.tolist())
    if args.limit:
        ds = to_sphere_dataset(raw, args.limit)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dataset_to_csv(ds, out / "dataset.csv")
        print(f"wrote {out / 'dataset.csv'} with {ds.N} rows")
    return 0


def cli(argv) -> int:
    """Run one command; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage()
        return 2
    from .errors import (
        DivergenceError,
        NumericError,
        OdenetsError,
        SolverFailure,
        UsageError,
    )

    handlers = {
        "init-config": _cmd_init_config,
        "gradcheck": _cmd_gradcheck,
        "kernel": _cmd_kernel,
        "train": _cmd_train,
        "experiment": _cmd_experiment,
        "parse-idx": _cmd_parse_idx,
    }
    try:
        return handlers[args.command](args)
    except (SolverFailure, NumericError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except OdenetsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    argv = sys.argv[1:]
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ.setdefault(var, argv[idx + 1])
    sys.exit(cli(argv))


if __name__ == "__main__":
    main()
