"""Command-line entry point.

Exit codes: 0 success, 1 operational failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .autodiff import no_grad
from .config import ConfigError, RunConfig, parse_value
from .data import DatasetManifest, RecordFormatError, generate_synthetic, read_record, write_dataset
from .metrics import evaluate_scores
from .model import forward_record, init_params, masked_forward, modality_ranks, predict
from .summarizer import generate_summary
from .training import (CheckpointError, History, TrainingDiverged, load_checkpoint, save_checkpoint,
                       train)

log = logging.getLogger("triplesumm")


class OperationalError(RuntimeError):
    pass


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "seed": ("train.seed", "synthetic.seed"),
        "fusion_mode": ("model.fusion_mode",),
        "agg_mode": ("model.agg_mode",),
        "window_schedule": ("model.window_schedule",),
        "share_mst": ("model.share_mst_params",),
        "epochs": ("train.epochs",),
        "batch_size": ("train.batch_size",),
        "lr": ("train.lr",),
        "budget": ("summary.budget",),
    }
    for attr, keys in overrides.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "window_schedule":
            value = [w.strip() for w in value.split(",") if w.strip()]
        elif attr == "share_mst":
            value = value == "on"
        for key in keys:
            cfg.set(key, value)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), parse_value(raw))
    cfg.resolve()
    return cfg


def _parse_ranks(text: str) -> list:
    try:
        ranks = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError as exc:
        raise ConfigError(f"--keep-ranks expects comma-separated integers, got {text!r}") from exc
    if not ranks or not set(ranks) <= {1, 2, 3}:
        raise ConfigError(f"--keep-ranks must be a nonempty subset of 1,2,3, got {text!r}")
    return ranks


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if getattr(args, "run_dir", None):
        return Path(args.run_dir) / "best.ckpt"
    raise ConfigError("a --checkpoint or --run-dir is required")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    spec = cfg.synthetic_spec()
    out = Path(args.data_dir)
    records = generate_synthetic(spec)
    man = write_dataset(records, out, spec.ratios, spec.seed)
    cfg.save(out / "config.json")
    counts = {s: len(man.ids(s)) for s in ("train", "val", "test")}
    print(json.dumps({"records": len(man.entries), "splits": counts, "manifest": str(out / "manifest.json")}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    data_dir = Path(args.data_dir)
    if not (data_dir / "manifest.json").exists():
        raise OperationalError(f"no manifest.json in {data_dir}")
    man = DatasetManifest.load(data_dir)
    train_recs = man.load_records("train")
    val_recs = man.load_records("val")
    if not train_recs:
        raise OperationalError("the manifest has no training records")
    cfg.model["input_dims"] = list(train_recs[0].dims)
    cfg.resolve()
    mcfg, tcfg = cfg.model_config(), cfg.train_config()

    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    last = run / "last.ckpt"
    state = history = best = None
    if args.resume and last.exists():
        ck = load_checkpoint(last, expected_config=mcfg)
        params, state = ck.params, ck.state
        history = History.from_json(json.loads((run / "history.json").read_text()))
        n_batches = -(-len(train_recs) // tcfg.batch_size)
        history.epochs = history.epochs[: state.t // n_batches]
        best = load_checkpoint(run / "best.ckpt", expected_config=mcfg).params
        log.info("resuming from step %d", state.t)
    else:
        params = init_params(mcfg, seed=tcfg.seed)
    cfg.save(run / "config.json")

    def on_epoch(epoch, res):
        save_checkpoint(last, mcfg, res.params, res.state, meta={"epoch": epoch})
        save_checkpoint(run / "best.ckpt", mcfg, res.best_params,
                        meta={"epoch": res.history.best_epoch, "val_tau": res.history.best_val_tau})
        _write_json(run / "history.json", res.history.to_json())

    res = train(train_recs, mcfg, params, tcfg, val_records=val_recs, state=state, history=history,
                best_params=best, stop_after=args.stop_after, on_epoch=on_epoch)
    if res.history.epochs:
        plotting.plot_history(res.history, run / "history.png")
    summary = {"epochs_run": len(res.history.epochs), "final_loss": res.history.losses[-1] if res.history.epochs else None,
               "best_epoch": res.history.best_epoch, "best_val_tau": res.history.best_val_tau}
    print(json.dumps(summary))
    return 0


def _load_score_file(path) -> dict:
    doc = json.loads(Path(path).read_text())
    scores = doc.get("scores") if isinstance(doc, dict) else None
    if not isinstance(scores, dict):
        raise ConfigError(f"{path}: expected an object with a 'scores' mapping of id -> list")
    return {k: np.asarray(v, dtype=np.float64) for k, v in scores.items()}


def cmd_evaluate(args) -> int:
    man = DatasetManifest.load(Path(args.data_dir))
    records = man.load_records(args.split)
    if not records:
        raise OperationalError(f"split {args.split!r} is empty")
    if args.scores:
        preds = _load_score_file(args.scores)
        records = [r for r in records if r.id in preds] if args.subset else records
    elif args.oracle == "gt":
        preds = {r.id: r.gt for r in records}
    else:
        ck = load_checkpoint(_checkpoint_path(args))
        ranks = _parse_ranks(args.keep_ranks) if args.keep_ranks else None
        preds = {r.id: (predict(ck.config, ck.params, r) if ranks is None
                        else masked_forward(ck.config, ck.params, r, ranks)) for r in records}
    report = evaluate_scores(preds, records)
    out = Path(args.out_dir or args.run_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.split}"
    report.write_json(out / f"{stem}.json")
    report.write_csv(out / f"{stem}.csv")
    if report.videos:
        plotting.plot_report(report, out / f"{stem}.png")
    print(json.dumps(report.summary()))
    return 0


def cmd_summarize(args) -> int:
    cfg = _load_run_config(args)
    ck = load_checkpoint(_checkpoint_path(args))
    record = read_record(args.record)
    with no_grad():
        res = forward_record(ck.config, ck.params, record)
    scores = res.scores.data.astype(np.float64)
    feats = res.fused if cfg.summary["kts_features"] == "fused" else record.v
    sel = generate_summary(scores, feats, float(cfg.summary["budget"]), cfg.summary["max_shots"],
                           float(cfg.summary["penalty"]))
    out = Path(args.out)
    doc = sel.to_json()
    doc.update({"record_id": record.id, "budget_fraction": float(cfg.summary["budget"]),
                "frame_scores": scores.tolist()})
    _write_json(out, doc)
    plotting.plot_summary(scores, sel, out.with_suffix(".png"), gt=record.gt)
    print(json.dumps({"selected_shots": sel.selected, "selected_frames": int(sel.frame_mask.sum()),
                      "budget_frames": sel.budget_frames}))
    return 0


def cmd_inspect_attention(args) -> int:
    ck = load_checkpoint(_checkpoint_path(args))
    record = read_record(args.record)
    with no_grad():
        res = forward_record(ck.config, ck.params, record)
    trace = res.trace
    doc = {"record_id": record.id, "scores": {record.id: res.scores.data.astype(float).tolist()},
           "trace": trace.to_json(), "ranks": modality_ranks(trace).tolist() if trace.blocks else None}
    out = Path(args.out)
    masked = {}
    for spec in args.keep_ranks or []:
        ranks = _parse_ranks(spec)
        key = ",".join(map(str, ranks))
        scores = masked_forward(ck.config, ck.params, record, ranks).astype(float).tolist()
        masked[key] = scores
        tag = "".join(map(str, ranks))
        _write_json(out.with_name(f"{out.stem}_rank{tag}.json"), {"keep_ranks": ranks, "scores": {record.id: scores}})
    if masked:
        doc["masked_scores"] = masked
    _write_json(out, doc)
    if trace.blocks:
        dominant = record.meta.get("dominant") if record.meta else None
        plotting.plot_attention(trace, out.with_suffix(".png"), scores=res.scores.data, dominant=dominant)
    print(json.dumps({"blocks": len(trace.blocks), "frames": record.n_frames, "masked": sorted(masked)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triplesumm", description="Trimodal video summarization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, data=False, run=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data-dir", required=True)
        if run:
            sp.add_argument("--run-dir")

    g = sub.add_parser("gen-data", help="write a synthetic planted-saliency dataset")
    common(g, data=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    common(t, data=True)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--fusion-mode", choices=["dynamic", "global", "static"])
    t.add_argument("--agg-mode", choices=["average", "learnable", "no_fusion"])
    t.add_argument("--window-schedule", help="comma list, e.g. 5,15,45,global")
    t.add_argument("--share-mst", choices=["on", "off"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", action="store_true", help="continue from RUN_DIR/last.ckpt")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs in this invocation")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="rank metrics on a split")
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--checkpoint")
    e.add_argument("--run-dir")
    e.add_argument("--out-dir")
    e.add_argument("--scores", help="score file: {\"scores\": {id: [..]}}")
    e.add_argument("--subset", action="store_true", help="with --scores, only evaluate the ids present")
    e.add_argument("--oracle", choices=["gt"], help="use ground truth as the prediction")
    e.add_argument("--keep-ranks", help="rank-masked inference, e.g. 1 or 1,2")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("summarize", help="select summary shots for one record")
    common(s, run=True)
    s.add_argument("--checkpoint")
    s.add_argument("--record", required=True)
    s.add_argument("--budget", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)

    i = sub.add_parser("inspect-attention", help="dump fusion-token attention for one record")
    i.add_argument("--checkpoint")
    i.add_argument("--run-dir")
    i.add_argument("--record", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--keep-ranks", action="append", help="repeatable; e.g. --keep-ranks 1 --keep-ranks 1,2")
    i.set_defaults(func=cmd_inspect_attention)
    return p


def _limit_threads():
    n = os.environ.get("TRIPLESUMM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (OperationalError, OSError, RecordFormatError, CheckpointError, TrainingDiverged,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
