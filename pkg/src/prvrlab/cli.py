"""Command-line entry point: ``prvrlab <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 missing input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import FeatureFormatError, ManifestError, gen_synthetic, load_features, load_manifest, write_dataset

log = logging.getLogger("prvrlab")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3


class MissingInput(Exception):
    def __init__(self, path, what="input"):
        super().__init__(f"{what} not found: {path}")
        self.path = str(path)


def _require(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(p, what)
    return p


def _config(args) -> RunConfig:
    overrides = list(args.override or [])
    if args.config:
        _require(args.config, "config file")
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"data.synth.seed={args.seed}"]
    if getattr(args, "mode", None):
        overrides.append(f'merge.mode="{args.mode}"')
    if getattr(args, "tau", None) is not None:
        overrides.append(f"merge.tau={args.tau}")
    return RunConfig.load(args.config, overrides)


def _out_dir(args) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows: list, fieldnames=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames or list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _print_rows(rows: list) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _dataset(cfg: RunConfig, args, split: str):
    """Dataset chosen by ``--data``, else the configured manifest, else the synthetic split."""
    from .train import synth_eval
    if getattr(args, "data", None):
        return load_manifest(_require(args.data, "manifest"))
    d = cfg.raw["data"]
    key = "train_manifest" if split == "train" else "eval_manifest"
    if d[key]:
        return load_manifest(_require(d[key], "manifest"))
    return gen_synthetic(cfg.synth if split == "train" else synth_eval(cfg))


def _model(args):
    from .train import load_model
    return load_model(_require(args.checkpoint, "checkpoint"))


def cmd_gen_synth(args) -> int:
    from .train import synth_eval
    cfg = _config(args)
    out = _out_dir(args)
    if out is None:
        raise ConfigError("gen-synth needs --out")
    train_ds, eval_ds = gen_synthetic(cfg.synth), gen_synthetic(synth_eval(cfg))
    for name, ds in (("train", train_ds), ("eval", eval_ds)):
        m = write_dataset(ds, out / name)
        print(f"{name}: {len(ds.videos)} videos, {len(ds.queries)} queries -> {m}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import load_datasets, train
    cfg = _config(args)
    train_ds, eval_ds = load_datasets(cfg)
    res = train(cfg, train_ds, eval_ds, _out_dir(args))
    first, last = res.history[0]["total"], res.history[-1]["total"]
    print(f"steps {len(res.history)}  total loss {first:.4f} -> {last:.4f}  "
          f"best SumR {res.best_sum_r:.2f} (epoch {res.best_epoch})  {res.seconds:.1f}s")
    if res.checkpoint:
        print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .retrieval import evaluate
    params, meta = _model(args)
    cfg = _config(args)
    ds = _dataset(cfg, args, "eval")
    w_f, w_c = cfg.fusion
    report, _, _ = evaluate(params, ds, cfg.merge, w_f, w_c, Qs=tuple(args.q))
    rows = report.rows()
    _print_rows(rows)
    out = _out_dir(args)
    if out:
        _write_csv(out / "eval.csv", rows)
    return EXIT_OK


def cmd_merge(args) -> int:
    from .merging import op_tome, op_tome_lengths
    frames = load_features(_require(args.input, "feature file"))
    if args.target > len(frames):
        raise ValueError(f"target {args.target} exceeds the {len(frames)} frames in {args.input}")
    lengths = op_tome_lengths(len(frames), args.rate, args.target)
    print(" -> ".join(str(n) for n in lengths))
    out = _out_dir(args)
    if out:
        seq = op_tome(frames.astype(np.float64), args.rate, args.target)
        rows = [{"clip": i, "start": s, "end": e, "size": int(z)}
                for i, ((s, e), z) in enumerate(zip(seq.spans(), seq.sizes))]
        _write_csv(out / "clips.csv", rows)
        from .data import write_features
        write_features(out / "clips.prvf", seq.tokens)
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import collapse_metrics, ranker_confusion, spearman_vs_teacher, teacher_ranks
    from .retrieval import build_index, encode_queries, gt_ranks, recall_from_ranks, score_all
    params, _ = _model(args)
    cfg = _config(args)
    ds = _dataset(cfg, args, args.split)
    w_f, w_c = cfg.fusion
    index = build_index(ds.videos, params, cfg.merge, w_f, w_c)
    q = encode_queries(ds.queries, params)
    owners = np.array([x.video_id for x in ds.queries])
    clip_owner = np.repeat(np.arange(len(index)), np.diff(index.clip_offsets))
    collapse = [collapse_metrics(q, owners).row("text"),
                collapse_metrics(index.clip_tokens, clip_owner).row("video")]
    teacher = np.stack([x.teacher_eos for x in ds.queries])
    sp = spearman_vs_teacher(q, teacher)
    spear = [{"spearman_x100": sp.value, "anchors": sp.n_anchors, "skipped": sp.skipped}]
    model_ranks = gt_ranks(score_all(q, index), index, list(owners))
    confusion = []
    try:
        t_ranks = teacher_ranks(ds)
    except ValueError as exc:
        log.warning("no teacher ranker: %s", exc)
        t_ranks = None
    if t_ranks is not None:
        for Q in args.q:
            c = ranker_confusion(model_ranks, t_ranks, Q)
            confusion.append({"Q": Q, **c})
    recall = recall_from_ranks(model_ranks, tuple(args.q), len(index)).rows()
    out = _out_dir(args)
    for name, rows in (("collapse", collapse), ("spearman", spear), ("confusion", confusion), ("recall", recall)):
        if not rows:
            continue
        print(f"# {name}")
        _print_rows(rows)
        if out:
            _write_csv(out / f"{name}.csv", rows)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .analysis import bench
    from .encoders import init_encoder
    from .retrieval import build_index, encode_queries
    from .train import encoder_config_for
    cfg = _config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    if any(s <= 0 for s in sizes):
        raise ValueError("database sizes must be positive")
    ds = gen_synthetic(replace(cfg.synth, n_videos=max(sizes), split="eval"))
    if args.checkpoint:
        params, _ = _model(args)
    else:
        params = init_encoder(encoder_config_for(cfg, ds), seed=cfg.train["seed"])
    w_f, w_c = cfg.fusion
    index = build_index(ds.videos, params, cfg.merge, w_f, w_c)
    queries = encode_queries(ds.queries[:args.queries], params)
    rows = bench(index, queries, sizes, runs=args.runs)
    rows = [{"size": r["size"], "time_ms": round(r["time_ms"], 4), "memory_mb": round(r["memory_mb"], 1)}
            for r in rows]
    _print_rows(rows)
    out = _out_dir(args)
    if out:
        _write_csv(out / "bench.csv", rows)
    return EXIT_OK


def cmd_sweep_tau(args) -> int:
    """Retrain and evaluate once per threshold; one CSV row per tau."""
    from .merging import high_sim_ratio, select_merge_depth
    from .train import load_datasets, prepare_clips, train
    base = _config(args)
    train_ds, eval_ds = load_datasets(base)
    out = _out_dir(args)
    rows = []
    for tau in args.taus:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        cfg = base.copy().set(f"merge.tau={tau}")
        merge = cfg.merge
        K = merge.schedule().K
        clips = prepare_clips(train_ds, merge)
        omegas = np.array([high_sim_ratio(c.tokens, tau) for c in clips])
        deep = np.mean([select_merge_depth(w, K, merge.mode) > 1 for w in omegas])
        res = train(cfg, train_ds, eval_ds, out / f"tau_{tau:g}" if out else None)
        best = max(res.evals, key=lambda e: e["sum_r"])
        row = {"tau": tau, **{k: round(v, 2) for k, v in best.items() if k.startswith("r")},
               "sum_r": round(res.best_sum_r, 2), "mean_omega": round(float(omegas.mean()), 4),
               "frac_merged": round(float(deep), 4)}
        rows.append(row)
        log.info("tau %.3g -> SumR %.2f", tau, res.best_sum_r)
    _print_rows(rows)
    if out:
        _write_csv(out / "sweep_tau.csv", rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--out", help="output directory (nothing is written without it)")
    common.add_argument("-o", "--override", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. -o loss.lambda_e=0 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--seed", type=int, help="sets train.seed and data.synth.seed")
    run.add_argument("--mode", choices=("literal", "monotone"), help="merge-depth rule")
    run.add_argument("--tau", type=float, help="high-similarity threshold")

    qs = argparse.ArgumentParser(add_help=False)
    qs.add_argument("-q", type=int, nargs="+", default=[1, 5, 10, 100], help="recall cut-offs")

    p = argparse.ArgumentParser(prog="prvrlab", description="Partially relevant video retrieval lab.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sp = sub.add_parser("gen-synth", parents=[common, run], help="write synthetic train/eval datasets")
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("train", parents=[common, run], help="train encoders, keep the best checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common, run, qs], help="R@Q and SumR of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="manifest to evaluate (default: configured eval split)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("merge", parents=[common], help="order-preserving merge of one feature file")
    sp.add_argument("--input", required=True, help="PRVF feature file")
    sp.add_argument("--rate", type=float, default=75.0, help="merge rate in percent")
    sp.add_argument("--target", type=int, default=32, help="clip count to stop at")
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("analyze", parents=[common, run, qs], help="collapse, Spearman and confusion reports")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="manifest to analyze")
    sp.add_argument("--split", choices=("train", "eval"), default="train",
                    help="configured split to analyze when --data is absent")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("bench", parents=[common, run], help="query latency vs database size")
    sp.add_argument("--checkpoint", help="model to index with (default: freshly initialized)")
    sp.add_argument("--sizes", default="100,200,300,400,474")
    sp.add_argument("--runs", type=int, default=5)
    sp.add_argument("--queries", type=int, default=100, help="number of timed queries")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("sweep-tau", parents=[common, run], help="retrain and evaluate per threshold")
    sp.add_argument("taus", type=float, nargs="+")
    sp.set_defaults(func=cmd_sweep_tau)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ManifestError, FeatureFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
