"""Experiment driver: ``fnctr gen-data | train | evaluate | report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .core import (
    ConfigError,
    ContractError,
    DataError,
    ImpressionEvent,
    SparseVector,
    TrainingExample,
    make_batch,
    to_csr,
)
from .metrics import evaluate, naive_baseline, welch_t_test
from .models import CrossSpec, load_snapshot, save_snapshot
from .stream import (
    CriteoSchema,
    GroundTruth,
    StreamEvent,
    criteo_snapshot_dataset,
    criteo_features,
    derive_criteo_fn_dataset,
    downsample_negatives,
    gen_synthetic,
    read_criteo,
    snapshot_label,
    to_fake_negative_stream,
)
from .trainer import (
    DivergenceError,
    TrainerState,
    build_model,
    init_delay_from_data,
    predict_snapshot,
    train_offline,
    train_pass,
)

log = logging.getLogger("fnctr")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


# ---------------------------------------------------------------------------
# file helpers

def _write_lines(path: Path, lines) -> None:
    buf = io.StringIO()
    for line in lines:
        buf.write(line)
        buf.write("\n")
    path.write_text(buf.getvalue())


def _read_lines(path: Path):
    if not path.exists():
        raise ConfigError(f"missing data file {path}")
    with open(path) as fh:
        return [line for line in fh if line.strip()]


def _format_impression(imp: ImpressionEvent) -> str:
    delay = "" if imp.delay is None else repr(imp.delay)
    return f"{imp.impression_id}\t{imp.impression_time!r}\t{int(imp.converts)}\t{delay}\t{imp.features.format()}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen-data

def synthetic_ground_truth(spec: dict, seed) -> GroundTruth:
    """Ground truth from a synthetic spec.

    Either ``pattern_ctrs`` (+ ``pattern_rates``) for a single field with one
    pattern per entry, or ``cardinalities`` with explicit ``ctr_weights`` /
    ``delay_weights`` per field or random ones around ``ctr_mean`` and
    ``delay_mean_seconds``.
    """
    horizon = float(spec.get("horizon", 86400.0))
    if "pattern_ctrs" in spec:
        ctrs = spec["pattern_ctrs"]
        rates = spec.get("pattern_rates") or [1.0 / spec.get("delay_mean_seconds", 1800.0)] * len(ctrs)
        if len(rates) != len(ctrs):
            raise ConfigError("pattern_rates must match pattern_ctrs")
        return GroundTruth.from_pattern_table(ctrs, rates, horizon)
    cards = spec.get("cardinalities")
    if not cards:
        raise ConfigError("synthetic spec needs cardinalities or pattern_ctrs")
    rng = np.random.default_rng(seed)
    n_fields = len(cards)
    if "ctr_weights" in spec:
        w = np.concatenate([np.asarray(v, dtype=float) for v in spec["ctr_weights"]])
    else:
        w = rng.normal(spec.get("ctr_mean", -1.2) / n_fields, spec.get("ctr_scale", 0.7), sum(cards))
    if "delay_weights" in spec:
        wd = np.concatenate([np.asarray(v, dtype=float) for v in spec["delay_weights"]])
    else:
        mean_log_rate = -np.log(spec.get("delay_mean_seconds", 1800.0))
        wd = rng.normal(mean_log_rate / n_fields, spec.get("delay_scale", 0.3), sum(cards))
    return GroundTruth(w, wd, tuple(cards), spec.get("field_probs"), horizon)


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> Path:
    data = cfg["data"]
    out.mkdir(parents=True, exist_ok=True)
    window = cfg["eval"].get("window")
    meta = {"config": cfg.raw, "version": __version__}
    if "synthetic" in data:
        spec = data["synthetic"]
        gt_seq, train_seq, eval_seq = np.random.SeedSequence(cfg["seed"]).spawn(3)
        gt = synthetic_ground_truth(spec, gt_seq)
        n_train = int(spec.get("n_train", 10000))
        n_eval = int(spec.get("n_eval", 5000))
        train = gen_synthetic(gt, n_train, train_seq)
        held = gen_synthetic(gt, n_eval, eval_seq, start_id=n_train)
        stream = to_fake_negative_stream(train)
        until = spec.get("stream_until", gt.horizon)
        if until is not None:
            # conversions after the last training instant have not been observed yet
            stream = [ev for ev in stream if ev.emit_time <= until]
        train_snap = snapshot_label(train, gt.horizon, window=None)
        snap_time = cfg["eval"].get("snapshot_time")
        if snap_time is None:
            snap_time = gt.horizon + (window or 0.0)
        eval_examples = snapshot_label(held, snap_time, window)
        _write_lines(out / "impressions.tsv", map(_format_impression, train))
        gt_info = gt.to_dict()
        gt_info["field_ranges"] = gt.field_ranges()
        _dump_json(out / "ground_truth.json", gt_info)
        meta["n_features"] = gt.n_features
    elif "criteo" in data:
        spec = data["criteo"]
        n_features = int(spec.get("n_features", 2 ** 18))
        schema = CriteoSchema(**spec.get("schema", {}))
        records = sorted(read_criteo(spec["path"], schema), key=lambda r: r.click_time)
        n_eval = int(round(len(records) * float(spec.get("eval_fraction", 0.2))))
        train_recs, eval_recs = records[:len(records) - n_eval], records[len(records) - n_eval:]
        if not train_recs or not eval_recs:
            raise DataError("criteo file too small for a train/eval split")
        stream = derive_criteo_fn_dataset(train_recs, n_features)
        train_snap = criteo_snapshot_dataset(train_recs, n_features)
        limit = float("inf") if window is None else window
        eval_examples = [
            TrainingExample(criteo_features(r, n_features),
                            int(r.converts and r.conversion_time - r.click_time <= limit))
            for r in eval_recs
        ]
        meta["n_features"] = n_features
    else:
        raise ConfigError("config data section needs a synthetic or criteo spec")
    _write_lines(out / "stream.tsv", (ev.format() for ev in stream))
    _write_lines(out / "train_snapshot.tsv", (ex.format() for ex in train_snap))
    _write_lines(out / "eval.tsv", (ex.format() for ex in eval_examples))
    meta["counts"] = {"stream": len(stream), "train_snapshot": len(train_snap),
                      "eval": len(eval_examples)}
    _dump_json(out / "data.json", meta)
    return out


# ---------------------------------------------------------------------------
# train

def _data_meta(data_dir: Path) -> dict:
    p = data_dir / "data.json"
    if not p.exists():
        raise ConfigError(f"{data_dir} has no data.json; run gen-data first")
    return json.loads(p.read_text())


def load_training_examples(cfg: ExperimentConfig, data_dir: Path):
    if cfg.train_source == "stream":
        name = "stream.tsv"
        examples = [StreamEvent.parse(line).example for line in _read_lines(data_dir / name)]
    else:
        name = "train_snapshot.tsv"
        examples = [TrainingExample.parse(line) for line in _read_lines(data_dir / name)]
    if cfg["data"].get("downsample_negatives"):
        h = cfg.hyper
        examples = downsample_negatives(examples, h.negative_downsample_rate, h.seed)
    if not examples:
        raise DataError("no training examples")
    return examples, data_dir / name


def cmd_train(cfg: ExperimentConfig, data_dir: Path, run_dir: Path) -> Path:
    meta = _data_meta(data_dir)
    n_features = int(meta["n_features"])
    examples, source = load_training_examples(cfg, data_dir)
    batch = make_batch(examples, n_features)
    hyper = cfg.hyper
    mo = cfg["model_options"]
    model = build_model(cfg["model"], n_features, hyper, mo.get("embedding_dim", 16),
                        CrossSpec.from_dict(mo.get("cross_spec")), mo.get("pooling", "sum"),
                        mo.get("leaky_slope", 0.01))
    state = TrainerState(model, hyper, cfg["loss"])
    if state.loss == "delayed_feedback":
        init_delay_from_data(state, batch)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.raw, "version": __version__, "seed": cfg["seed"], "loss": cfg["loss"],
        "model": cfg["model"], "mode": cfg["mode"], "data_dir": str(data_dir),
        "train_file": source.name, "train_sha256": _sha256(source),
        "n_train": len(batch), "train_ctr": naive_baseline(batch.y, batch.weight),
    }
    snaps = []
    try:
        if cfg["mode"] == "offline":
            snaps.append(state.snapshot())
            for _ in range(int(cfg["epochs"])):
                train_offline(state, batch, 1)
                snaps.append(state.snapshot())
        else:
            snaps = train_pass(state, batch, int(cfg["snapshot_every"]))
            if not snaps or snaps[-1].step != state.step:
                snaps.append(state.snapshot())
    except DivergenceError as exc:
        manifest.update(steps=exc.step, diverged_at_step=exc.step, snapshots=[])
        _dump_json(run_dir / "manifest.json", manifest)
        raise
    entries = []
    for snap in snaps:
        fname = f"snapshot_{snap.version}.ckpt"
        save_snapshot(run_dir / fname, snap)
        entries.append({"version": snap.version, "step": snap.step, "file": fname})
    _write_lines(run_dir / "trace.tsv", (f"{s}\t{v!r}" for s, v in state.trace))
    manifest.update(steps=state.step, snapshots=entries)
    _dump_json(run_dir / "manifest.json", manifest)
    return run_dir


# ---------------------------------------------------------------------------
# evaluate / report

def _load_manifest(run_dir: Path) -> dict:
    p = run_dir / "manifest.json"
    if not p.exists():
        raise ConfigError(f"{run_dir} has no manifest.json")
    m = json.loads(p.read_text())
    if not m.get("snapshots"):
        raise ConfigError(f"{run_dir} has no snapshots")
    return m


SUMMARY_FIELDS = ("model_id", "model", "loss", "ce", "rce", "pr_auc")


def cmd_evaluate(cfg: ExperimentConfig, data_dir: Path, run_dirs, out: Path,
                 all_snapshots: bool = False, include_naive: bool = False,
                 patterns: bool = False) -> list:
    meta = _data_meta(data_dir)
    n_features = int(meta["n_features"])
    eval_path = data_dir / "eval.tsv"
    if not eval_path.exists():
        raise ConfigError(f"missing eval data {eval_path}")
    examples = [TrainingExample.parse(line) for line in _read_lines(eval_path)]
    batch = make_batch(examples, n_features)
    baseline = naive_baseline(batch.y, batch.weight)
    n_bins = int(cfg["eval"].get("n_bins", 20))
    reports, models = [], []
    if include_naive:
        preds = np.full(len(batch), baseline)
        r = evaluate(preds, batch.y, batch.weight, baseline=baseline, model_id="naive",
                     loss="naive", n_bins=n_bins)
        r.model = "constant"
        reports.append(r)
    for run_dir in map(Path, run_dirs):
        m = _load_manifest(run_dir)
        chosen = m["snapshots"] if all_snapshots else m["snapshots"][-1:]
        for entry in chosen:
            snap = load_snapshot(run_dir / entry["file"])
            preds = predict_snapshot(snap, batch.X)
            r = evaluate(preds, batch.y, batch.weight, baseline=baseline,
                         model_id=f"{run_dir.name}@v{entry['version']}", loss=m["loss"],
                         n_bins=n_bins)
            r.model = m["model"]
            reports.append(r)
            models.append((r.model_id, snap))
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "metrics.jsonl", (r.to_json() for r in reports))
    ranked = sorted(reports, key=lambda r: (-r.rce, r.model_id))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in ranked:
        w.writerow([r.model_id, r.model, r.loss, repr(r.ce), repr(r.rce), repr(r.pr_auc)])
    (out / "summary.csv").write_text(buf.getvalue())
    gt_path = data_dir / "ground_truth.json"
    if patterns and gt_path.exists():
        _write_pattern_table(GroundTruth.from_dict(json.loads(gt_path.read_text())), models,
                             out / "calibration.csv")
    return reports


def _write_pattern_table(gt: GroundTruth, models, path: Path) -> None:
    pats = gt.patterns()
    X = to_csr([SparseVector(tuple(int(i) for i in row), (1.0,) * len(row)) for row in pats],
               gt.n_features)
    truth = gt.ctr(pats)
    cols = {mid: predict_snapshot(snap, X) for mid, snap in models}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pattern", "p_true", "b_biased", *cols])
    for k, row in enumerate(pats):
        w.writerow([" ".join(map(str, row)), repr(float(truth[k])),
                    repr(float(truth[k] / (1 + truth[k]))), *(repr(float(c[k])) for c in cols.values())])
    path.write_text(buf.getvalue())


def cmd_report(metrics_files, out: Path = None) -> list:
    """Median metrics per (model, loss) over reruns, plus a Welch test of the top two by RCE."""
    groups: dict = {}
    for f in metrics_files:
        for line in _read_lines(Path(f)):
            d = json.loads(line)
            groups.setdefault((d.get("model", ""), d["loss"]), []).append(d)
    rows = []
    for (model, loss), ds in groups.items():
        rows.append({"model": model, "loss": loss, "n_runs": len(ds),
                     "ce": statistics.median(d["ce"] for d in ds),
                     "rce": statistics.median(d["rce"] for d in ds),
                     "pr_auc": statistics.median(d["pr_auc"] for d in ds),
                     "_rces": [d["rce"] for d in ds]})
    rows.sort(key=lambda r: (r["model"], -r["rce"], r["loss"]))
    for model in {r["model"] for r in rows}:
        mine = [r for r in rows if r["model"] == model]
        for r in mine:
            r["p_vs_next"] = ""
        if (len(mine) >= 2 and len(mine[0]["_rces"]) > 1 and len(mine[1]["_rces"]) > 1
                and statistics.variance(mine[0]["_rces"]) + statistics.variance(mine[1]["_rces"]) > 0):
            mine[0]["p_vs_next"] = repr(welch_t_test(mine[0]["_rces"], mine[1]["_rces"])[1])
    fields = ["model", "loss", "n_runs", "ce", "rce", "pr_auc", "p_vs_next"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in fields])
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(buf.getvalue())
    return [{k: r[k] for k in fields} for r in rows]


def _print_table(rows) -> None:
    if not rows:
        return
    keys = list(rows[0])
    cells = [[k for k in keys]] + [[f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k])
                                    for k in keys] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(keys))]
    for c in cells:
        print("  ".join(s.ljust(wd) for s, wd in zip(c, widths)))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fnctr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config (or a run manifest)")
        p.add_argument("--seed", type=int)
        p.add_argument("--loss")
        p.add_argument("--model")
        p.add_argument("--mode", choices=("offline", "continuous"))
        p.add_argument("--name")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="write synthetic or Criteo-derived datasets")
    common(p)
    p = sub.add_parser("train", help="train one model and write snapshots")
    common(p)
    p.add_argument("--data", help="dataset directory (default: config data.dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p = sub.add_parser("evaluate", help="score runs on the shared eval set")
    common(p)
    p.add_argument("--data")
    p.add_argument("--run", action="append", required=True, dest="runs")
    p.add_argument("--all-snapshots", action="store_true")
    p.add_argument("--include-naive", action="store_true")
    p.add_argument("--patterns", action="store_true",
                   help="write per-pattern predictions against the ground truth")
    p = sub.add_parser("report", help="aggregate metrics.jsonl files over reruns")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out")
    return parser


def _flags(args) -> dict:
    keys = ("seed", "loss", "model", "mode", "name", "epochs", "snapshot_every")
    return {k: getattr(args, k, None) for k in keys}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            rows = cmd_report(args.metrics, Path(args.out) if args.out else None)
            _print_table(rows)
            return 0
        cfg = load_config(args.config, _flags(args))
        data_dir = Path(getattr(args, "data", None) or cfg["data"].get("dir", "data"))
        if args.command == "gen-data":
            cmd_gen_data(cfg, Path(args.out) if args.out else data_dir)
        elif args.command == "train":
            run_dir = Path(args.out) if args.out else Path("runs") / cfg["name"]
            cmd_train(cfg, data_dir, run_dir)
        elif args.command == "evaluate":
            out = Path(args.out) if args.out else Path(args.runs[0])
            reports = cmd_evaluate(cfg, data_dir, args.runs, out, args.all_snapshots,
                                   args.include_naive, args.patterns)
            _print_table([{"model_id": r.model_id, "loss": r.loss, "ce": r.ce, "rce": r.rce,
                           "pr_auc": r.pr_auc} for r in sorted(reports, key=lambda r: -r.rce)])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
