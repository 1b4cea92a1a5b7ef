"""Command-line entry point: gen-data, train, evaluate, query, gradcheck.

Exit codes: 0 success, 1 failed check, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .datasets import PRESETS, WorldConfig, generate_world, load_dataset, save_dataset
from .errors import PlaceRecError
from .geometry import quantize, read_pcv
from .losses import LossConfig
from .network import NetworkConfig, build, load_checkpoint, save_checkpoint
from .retrieval import DescriptorDB, knn
from .trainer import PROTOCOLS, TOY_LR, TrainConfig, descriptor_db, evaluate_model, scale_schedule, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(path: Path, command: str, config: dict, seed, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _stamp(),
        "outputs": outputs,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _ensure_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {p}: {exc}") from exc
    return p


def cmd_gen_data(args) -> int:
    started = _stamp()
    out = _ensure_dir(args.out)
    cfg = PRESETS.get(args.preset, WorldConfig())
    overrides = {k: v for k, v in {
        "n_locations": args.n_locations, "n_traversals": args.n_traversals,
        "n_test_locations": args.n_test_locations, "points_per_cloud": args.points_per_cloud,
    }.items() if v is not None}
    if args.preset != "custom" and overrides:
        raise UsageError("size overrides need --preset custom")
    cfg = replace(cfg, seed=args.seed, **overrides)
    ds = generate_world(cfg)
    save_dataset(ds, out)
    write_manifest(out / "run_manifest.json", "gen-data", asdict(cfg), args.seed,
                   ["manifest.json", "clouds/"], started)
    print(f"wrote {len(ds)} clouds ({cfg.n_locations} locations x {cfg.n_traversals} traversals) to {out}")
    return EXIT_OK


def _train_config(args) -> tuple[TrainConfig, NetworkConfig]:
    base = PROTOCOLS[args.protocol]
    epochs = args.epochs if args.epochs is not None else (60 if args.toy else base["epochs"])
    decay = scale_schedule(base["lr_decay_epochs"], base["epochs"], epochs)
    batch = args.batch if args.batch is not None else (64 if args.toy else 2048)
    lr = args.lr if args.lr is not None else (TOY_LR if args.toy else TrainConfig.initial_lr)
    cfg = TrainConfig(batch_size=batch, epochs=epochs, lr_decay_epochs=decay, initial_lr=lr,
                      loss=LossConfig(tau=args.tau, k=args.k, margin=args.margin),
                      loss_kind=args.loss, seed=args.seed)
    net = NetworkConfig.toy() if args.toy else NetworkConfig()
    return cfg, net


def cmd_train(args) -> int:
    started = _stamp()
    if not args.data and not args.dry_run:
        args.parser.error("--data is required")
    cfg, net = _train_config(args)
    echo = {"train": cfg.to_dict(), "network": net.to_dict(), "protocol": args.protocol}
    print(json.dumps({"lr": cfg.initial_lr, "tau": cfg.loss.tau, "k": cfg.loss.k,
                      "weight_decay": cfg.weight_decay, "lr_decay_epochs": list(cfg.lr_decay_epochs),
                      "epochs": cfg.epochs, "batch_size": cfg.batch_size, "loss": cfg.loss_kind}))
    if args.dry_run:
        return EXIT_OK
    out = _ensure_dir(args.out)
    ds = load_dataset(args.data)
    model = build(net, args.seed)
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))
    log_path = out / "train_log.jsonl"

    def progress(rec):
        if "eval_ar_at_1" in rec:
            print(f"epoch {rec['epoch']:4d}  test AR@1 {rec['eval_ar_at_1']:.2f}")
        elif rec["step"] == 0:
            print(f"epoch {rec['epoch']:4d}  loss {rec['loss']:.5f}  lr {rec['lr']:.1e}")

    train(model, ds, cfg, log_path=log_path, eval_every=args.eval_every, callback=progress)
    save_checkpoint(model, out / "model.ckpt")
    write_manifest(out / "run_manifest.json", "train", echo, args.seed,
                   ["config.json", "train_log.jsonl", "model.ckpt"], started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _stamp()
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    step = model.config.quantization_step
    report = evaluate_model(model, ds, args.split, step)
    if args.db_out:
        descriptor_db(model, ds, ds.split_indices(args.split), step).save_jsonl(args.db_out)
    print(f"{'N':>4}  {'Recall@N':>9}")
    for n, v in report["recall_at"].items():
        print(f"{n:>4}  {v:9.2f}")
    print(f"AR@1%: {report['ar_at_1pct']:.2f}  ({report['n_queries']} queries)")
    if args.report:
        report_path = Path(args.report)
        report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
        write_manifest(report_path.with_name(report_path.name + ".manifest.json"), "evaluate",
                       {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split},
                       None, [report_path.name], started)
    return EXIT_OK


def cmd_query(args) -> int:
    model = load_checkpoint(args.checkpoint)
    db = DescriptorDB.load_jsonl(args.db)
    cloud = read_pcv(args.cloud)
    desc = model.describe(quantize(cloud, model.config.quantization_step))
    print(f"query {cloud.cloud_id} (traversal {cloud.traversal_id})")
    print(f"{'rank':>4}  {'cloud_id':<20} {'distance':>10}")
    for rank, (cid, dist) in enumerate(knn(desc, db, args.n), start=1):
        print(f"{rank:>4}  {cid:<20} {dist:10.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.seed, args.tolerance)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} rel_err={r.rel_error:.3e}  tol={r.tolerance:.0e}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="placerec", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=int(os.environ.get("PLACEREC_THREADS", os.cpu_count() or 1)),
                   help="BLAS thread count (default: $PLACEREC_THREADS or logical cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-traversal world")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=sorted(PRESETS) + ["custom"], default="toy-oxford")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-locations", type=int)
    g.add_argument("--n-traversals", type=int)
    g.add_argument("--n-test-locations", type=int)
    g.add_argument("--points-per-cloud", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the descriptor network")
    t.add_argument("--data")
    t.add_argument("--out", default="run")
    t.add_argument("--protocol", choices=sorted(PROTOCOLS), default="baseline")
    t.add_argument("--toy", action="store_true", help="toy-scale network, batch 64, 60 epochs, lr 5e-3")
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate (default 1e-3, or 5e-3 with --toy)")
    t.add_argument("--loss", choices=["tsap", "triplet"], default="tsap")
    t.add_argument("--tau", type=float, default=0.01)
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--margin", type=float, default=0.2)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(fn=cmd_train, parser=t)

    e = sub.add_parser("evaluate", help="Recall@N and AR@1%% on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--db-out", help="also write the descriptor database (JSON lines)")
    e.set_defaults(fn=cmd_evaluate)

    q = sub.add_parser("query", help="rank database entries for one point cloud")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--db", required=True)
    q.add_argument("--cloud", required=True)
    q.add_argument("--n", type=int, default=5)
    q.set_defaults(fn=cmd_query)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PlaceRecError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
