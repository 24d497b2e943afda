"""Command-line front end: generate -> train -> extract -> evaluate.

Commands: ``gen henon|grouped``, ``train``, ``extract``,
``eval corr|cluster|recon``. Every command is deterministic under its
``--seed`` flags, echoes its effective configuration into the output
directory, and never mutates its inputs. Config precedence is
CLI flag > ``--config`` JSON file > built-in default.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure, 5 stage mismatch, 6 missing ground truth.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION
from .data import (HenonParams, SplitSpec, generate_grouped, generate_henon,
                   read_dataset, split, write_dataset)
from .errors import (DivergentOrbit, FormatError, IndexOutOfRange, InvalidK,
                     InvalidSpec, InvalidSplit, NonFiniteLoss, StageMismatch)
from .evaluation import (global_mean_corr, kmeans, nmi, pool_features,
                         recon_report, silhouette)
from .models import (Checkpoint, ModelSpec, TrainConfig, build,
                     extract_latents, load_checkpoint, read_latents,
                     save_checkpoint, train_full, train_step1, train_step2,
                     write_latents)
from .objectives import IbWeights

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_STAGE = 5
EXIT_NO_TRUTH = 6


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("INFODPCCA_THREADS", "1")))
    except ValueError:
        return 1


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(",") if p != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {exc}")


def build_parser():
    top = argparse.ArgumentParser(
        prog="infodpcca",
        description="Two-step information-theoretic dynamic probabilistic CCA: "
                    "synthetic benchmarks, training, latent extraction and "
                    "evaluation.")
    top.add_argument("--threads", type=int, default=_default_threads(),
                     help="worker-thread cap (default 1 for reproducibility; "
                          "env INFODPCCA_THREADS)")
    top.add_argument("--config", type=str, default=None,
                     help="JSON file of defaults for the invoked subcommand "
                          "(CLI flags win)")
    sub = top.add_subparsers(dest="command", required=True)
    leaves = {}

    gen = sub.add_parser("gen", help="generate synthetic datasets")
    gen_sub = gen.add_subparsers(dest="generator", required=True)

    g_h = gen_sub.add_parser("henon", help="chaotic-map paired sequences")
    g_h.add_argument("--out", required=True)
    g_h.add_argument("--seed", type=int, default=0)
    g_h.add_argument("--a", type=float, default=1.4)
    g_h.add_argument("--b", type=float, default=0.3)
    g_h.add_argument("--t-len", type=int, default=300)
    g_h.add_argument("--n-seq", type=int, default=1000)
    g_h.add_argument("--dx", type=int, default=120)
    g_h.add_argument("--dy", type=int, default=120)
    g_h.add_argument("--noise-std", type=float, default=0.05)
    g_h.add_argument("--split-fraction", type=float, default=None,
                     help="also write a split.json manifest for this fraction")
    g_h.add_argument("--split-seed", type=int, default=0)
    leaves[("gen", "henon")] = g_h

    g_g = gen_sub.add_parser("grouped", help="two-regime labeled variant")
    g_g.add_argument("--out", required=True)
    g_g.add_argument("--seed", type=int, default=0)
    g_g.add_argument("--a1", type=float, default=1.4)
    g_g.add_argument("--a2", type=float, default=1.2)
    g_g.add_argument("--b", type=float, default=0.3)
    g_g.add_argument("--t", type=int, default=100)
    g_g.add_argument("--n-per-group", type=int, default=40)
    g_g.add_argument("--dx", type=int, default=30)
    g_g.add_argument("--dy", type=int, default=30)
    g_g.add_argument("--noise-std", type=float, default=0.05)
    leaves[("gen", "grouped")] = g_g

    tr = sub.add_parser("train", help="train a model on a dataset directory")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--model", choices=("dvib", "dpcca", "infodpcca"),
                    default="infodpcca")
    tr.add_argument("--stage", choices=("1", "2", "both"), default="both")
    tr.add_argument("--init-from", default=None,
                    help="step-1 checkpoint to continue from (--stage 2)")
    tr.add_argument("--init-random", action="store_true",
                    help="step-II-only ablation: random, trainable step-I init")
    tr.add_argument("--alpha", type=float, default=1.0)
    tr.add_argument("--beta", type=float, default=0.1)
    tr.add_argument("--dvib-beta", type=float, default=0.1)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--epochs", type=int, default=200)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--grad-clip", type=float, default=10.0)
    tr.add_argument("--patience", type=int, default=20)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--dz0", type=int, default=2)
    tr.add_argument("--dz1", type=int, default=2)
    tr.add_argument("--dz2", type=int, default=2)
    tr.add_argument("--rnn-hidden", type=int, default=64)
    tr.add_argument("--mlp-hidden", type=_int_list, default=(64, 64),
                    help="comma-separated hidden widths, e.g. 64,64")
    tr.add_argument("--residual-connection", action="store_true")
    tr.add_argument("--no-reuse-rnn", action="store_true")
    tr.add_argument("--reuse-sigma1", action="store_true")
    tr.add_argument("--emitter-activation", choices=("identity", "sigmoid"),
                    default="identity")
    tr.add_argument("--split-fraction", type=float, default=None,
                    help="train on the train side of this in-memory split")
    tr.add_argument("--split-seed", type=int, default=0)
    tr.add_argument("--split-role", choices=("train", "test", "all"),
                    default=None)
    leaves[("train", None)] = tr

    ex = sub.add_parser("extract", help="extract latent trajectories")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--stage", choices=("step1", "step2"), default="step1")
    ex.add_argument("--split-fraction", type=float, default=None)
    ex.add_argument("--split-seed", type=int, default=0)
    ex.add_argument("--split-role", choices=("train", "test", "all"),
                    default=None)
    leaves[("extract", None)] = ex

    ev = sub.add_parser("eval", help="evaluation reports")
    ev_sub = ev.add_subparsers(dest="metric", required=True)

    e_c = ev_sub.add_parser("corr", help="global-mean correlation vs ground truth")
    e_c.add_argument("--latents", required=True)
    e_c.add_argument("--data", required=True)
    e_c.add_argument("--out", required=True)
    e_c.add_argument("--split-fraction", type=float, default=None)
    e_c.add_argument("--split-seed", type=int, default=0)
    e_c.add_argument("--split-role", choices=("train", "test", "all"),
                     default=None)
    leaves[("eval", "corr")] = e_c

    e_k = ev_sub.add_parser("cluster", help="pooled features + k-means scoring")
    e_k.add_argument("--latents", required=True)
    e_k.add_argument("--data", required=True)
    e_k.add_argument("--out", required=True)
    e_k.add_argument("--k", type=int, default=2)
    e_k.add_argument("--seed", type=int, default=0)
    e_k.add_argument("--restarts", type=int, default=10)
    leaves[("eval", "cluster")] = e_k

    e_r = ev_sub.add_parser("recon", help="one-step-ahead reconstruction rows")
    e_r.add_argument("--ckpt", required=True)
    e_r.add_argument("--data", required=True)
    e_r.add_argument("--out", required=True, help="CSV path for plot rows")
    e_r.add_argument("--summary-out", default=None,
                     help="JSON path for the coverage summary "
                          "(default: <out>.json)")
    e_r.add_argument("--seq", type=int, default=0)
    e_r.add_argument("--dims", type=_int_list, default=(0,))
    e_r.add_argument("--stream", type=int, choices=(1, 2), default=1)
    e_r.add_argument("--pred-stage", choices=("step1", "step2"), default=None,
                     help="predictive path for two-step checkpoints "
                          "(default: the checkpoint's stage)")
    leaves[("eval", "recon")] = e_r

    return top, leaves


def _apply_config_file(argv):
    """Resolve --config into subparser defaults and re-parse."""
    top, leaves = build_parser()
    args = top.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    try:
        overrides = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config file is not valid JSON: {exc}")
    if not isinstance(overrides, dict):
        raise CliError(EXIT_CONFIG, "config file must hold a JSON object")
    key = (args.command, getattr(args, "generator", None)
           or getattr(args, "metric", None))
    top2, leaves2 = build_parser()
    leaf = leaves2[key]
    known = {a.dest for a in leaf._actions}
    unknown = set(overrides) - known
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown config keys: {sorted(unknown)}")
    if "mlp_hidden" in overrides:
        overrides["mlp_hidden"] = tuple(overrides["mlp_hidden"])
    if "dims" in overrides:
        overrides["dims"] = tuple(overrides["dims"])
    leaf.set_defaults(**overrides)
    return top2.parse_args(argv)


def _echo_config(out_dir: Path, args) -> None:
    record = {k: v for k, v in sorted(vars(args).items())
              if not k.startswith("_")}
    for k, v in record.items():
        if isinstance(v, tuple):
            record[k] = list(v)
    record["format_version"] = FORMAT_VERSION
    (out_dir / "config.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_split(args, default_role):
    ds = read_dataset(args.data)
    fraction = getattr(args, "split_fraction", None)
    if fraction is None:
        return ds
    role = getattr(args, "split_role", None) or default_role
    if role == "all":
        return ds
    tr, te = split(ds, SplitSpec(fraction, getattr(args, "split_seed", 0)))
    return tr if role == "train" else te


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.generator == "henon":
        params = HenonParams(a=args.a, b=args.b, t_len=args.t_len,
                             n_seq=args.n_seq, dx=args.dx, dy=args.dy,
                             noise_std=args.noise_std, seed=args.seed)
        ds = generate_henon(params, threads=args.threads)
    else:
        pa = HenonParams(a=args.a1, b=args.b, t_len=args.t, n_seq=1,
                         dx=args.dx, dy=args.dy, noise_std=args.noise_std,
                         seed=args.seed)
        pb = HenonParams(a=args.a2, b=args.b, t_len=args.t, n_seq=1,
                         dx=args.dx, dy=args.dy, noise_std=args.noise_std,
                         seed=args.seed)
        ds = generate_grouped(pa, pb, args.n_per_group, args.seed,
                              threads=args.threads)
    out = Path(args.out)
    write_dataset(ds, out)
    if args.generator == "henon" and args.split_fraction is not None:
        tr, te = split(ds, SplitSpec(args.split_fraction, args.split_seed))
        manifest = {"format_version": FORMAT_VERSION,
                    "train_fraction": args.split_fraction,
                    "seed": args.split_seed,
                    "train_indices": tr.meta["split"]["indices"],
                    "test_indices": te.meta["split"]["indices"]}
        (out / "split.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n",
            encoding="utf-8")
    _echo_config(out, args)
    _print_json({"format_version": FORMAT_VERSION, "out": str(out),
                 "generator": args.generator, "n_seq": ds.n_seq,
                 "t_len": ds.t_len, "dx": int(ds.x1.shape[2]),
                 "dy": int(ds.x2.shape[2]),
                 "has_labels": ds.labels is not None})
    return EXIT_OK


def _model_spec(args, ds) -> ModelSpec:
    return ModelSpec(kind=args.model, dx=int(ds.x1.shape[2]),
                     dy=int(ds.x2.shape[2]), dz0=args.dz0, dz1=args.dz1,
                     dz2=args.dz2, rnn_hidden=args.rnn_hidden,
                     mlp_hidden=tuple(args.mlp_hidden),
                     residual_connection=args.residual_connection,
                     reuse_rnn=not args.no_reuse_rnn,
                     reuse_sigma1=args.reuse_sigma1,
                     emitter_activation=args.emitter_activation)


def cmd_train(args) -> int:
    weights = IbWeights(alpha=args.alpha, beta=args.beta,
                        dvib_beta=args.dvib_beta)
    config = TrainConfig(weights=weights, learning_rate=args.lr,
                         max_epochs=args.epochs, batch_size=args.batch_size,
                         grad_clip_norm=args.grad_clip, seed=args.seed,
                         patience=args.patience)
    ds = _load_split(args, default_role="train")
    spec = _model_spec(args, ds)

    if args.model != "infodpcca":
        if args.stage != "both":
            raise CliError(EXIT_CONFIG,
                           f"--stage {args.stage} only applies to infodpcca")
        ckpt = train_full(spec, ds, config)
    elif args.stage == "1":
        ckpt = train_step1(spec, build(spec, config.seed), ds, config)
    elif args.stage == "2":
        if args.init_from and args.init_random:
            raise CliError(EXIT_CONFIG,
                           "--init-from and --init-random are exclusive")
        if args.init_from:
            first = load_checkpoint(args.init_from)
            if first.stage != "step1":
                raise CliError(EXIT_STAGE,
                               f"--init-from checkpoint has stage "
                               f"{first.stage!r}, need step1")
            ckpt = train_step2(first, ds, config)
        elif args.init_random:
            seed_ckpt = Checkpoint(spec, build(spec, config.seed), config,
                                   [], "step1")
            ckpt = train_step2(seed_ckpt, ds, config, freeze_step1=False)
        else:
            raise CliError(EXIT_CONFIG,
                           "--stage 2 needs --init-from <step1 ckpt> or "
                           "--init-random")
    else:
        ckpt = train_full(spec, ds, config)

    out = Path(args.out)
    save_checkpoint(ckpt, out)
    _echo_config(out, args)
    aborted = any(h.get("event") == "non_finite_abort" for h in ckpt.history)
    _print_json({"format_version": FORMAT_VERSION, "out": str(out),
                 "stage": ckpt.stage, "epochs_run": len(ckpt.history),
                 "final_total": next((h["total"] for h in reversed(ckpt.history)
                                      if "total" in h), None),
                 "aborted": aborted})
    return EXIT_NUMERIC if aborted else EXIT_OK


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_split(args, default_role="test")
    ext = extract_latents(ckpt, ds, args.stage)
    out = Path(args.out)
    write_latents(ext, out)
    _echo_config(out, args)
    _print_json({"format_version": FORMAT_VERSION, "out": str(out),
                 "stage": ext.stage, "n_seq": int(ext.z0_mean.shape[0]),
                 "t_steps": int(ext.z0_mean.shape[1])})
    return EXIT_OK


def cmd_eval_corr(args) -> int:
    ext = read_latents(args.latents)
    ds = _load_split(args, default_role="test")
    if ds.z_true is None:
        raise CliError(EXIT_NO_TRUTH,
                       "dataset has no ground-truth latents (z.bin)")
    steps = ext.z0_mean.shape[1]
    if ds.n_seq != ext.z0_mean.shape[0] or steps > ds.t_len:
        raise CliError(EXIT_DATA,
                       f"latents ({ext.z0_mean.shape[:2]}) do not match "
                       f"dataset ({ds.n_seq}, {ds.t_len})")
    report = global_mean_corr(ds.z_true[:, :steps].astype(np.float64),
                              ext.z0_mean)
    payload = {"format_version": FORMAT_VERSION, "metric": "global_mean_corr",
               "stage": ext.stage, **report.to_json_dict()}
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    _print_json({"rho_hat": report.rho_hat, "out": args.out})
    return EXIT_OK


def cmd_eval_cluster(args) -> int:
    ext = read_latents(args.latents)
    ds = read_dataset(args.data)
    if ds.labels is None:
        raise CliError(EXIT_NO_TRUTH, "dataset has no labels (labels.bin)")
    if ds.n_seq != ext.z0_mean.shape[0]:
        raise CliError(EXIT_DATA, "latents and dataset disagree on N")
    feats = pool_features(ext)
    labels = kmeans(feats, args.k, seed=args.seed, restarts=args.restarts)
    payload = {"format_version": FORMAT_VERSION, "metric": "cluster",
               "stage": ext.stage, "k": args.k,
               "feature_spec": "z0-mean/std pooling",
               "nmi": nmi(ds.labels, labels),
               "silhouette": silhouette(feats, labels),
               "labels": labels.tolist()}
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    _print_json({"nmi": payload["nmi"], "silhouette": payload["silhouette"],
                 "out": args.out})
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    rows, coverage = recon_report(ckpt, ds, args.seq, list(args.dims),
                                  stream=args.stream,
                                  pred_stage=args.pred_stage)
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=("t", "dim", "actual",
                                                "mean", "std"))
        writer.writeheader()
        writer.writerows(rows)
    summary_path = Path(args.summary_out) if args.summary_out \
        else out.with_suffix(out.suffix + ".json")
    summary = {"format_version": FORMAT_VERSION, "metric": "recon",
               "seq": args.seq, "dims": list(args.dims),
               "stream": args.stream, "rows": len(rows),
               "coverage_2std": coverage}
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")
    _print_json({"rows": len(rows), "coverage_2std": coverage,
                 "out": str(out)})
    return EXIT_OK


_DATA_ERRORS = (FormatError, FileNotFoundError, InvalidSplit, DivergentOrbit)
_CONFIG_ERRORS = (InvalidSpec, InvalidK, IndexOutOfRange, ValueError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = _apply_config_file(argv)
        if args.threads < 1:
            raise CliError(EXIT_CONFIG, "--threads must be >= 1")
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "extract":
            return cmd_extract(args)
        metric = args.metric
        if metric == "corr":
            return cmd_eval_corr(args)
        if metric == "cluster":
            return cmd_eval_cluster(args)
        return cmd_eval_recon(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except StageMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
