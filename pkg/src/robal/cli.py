"""Command-line experiment runner: ``robal {synth,train,finetune,eval,sweep,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

import robal
from robal.config import ConfigError, ExperimentConfig, load_config, parse_config
from robal.data import (ImbalanceProfile, LabeledDataset, load_binary, make_longtail_counts,
                        save_binary, synth_gaussians)
from robal.errors import FormatError
from robal.evaluate import (EvalReport, evaluate, feature_norm_stats, kappa_sweep, read_jsonl,
                            resolve_threads, weight_norm_profile, write_jsonl)
from robal.heads import ClassStats
from robal.models import Classifier, Network
from robal.trainer import (Checkpoint, TrainingDiverged, derive_seed, finetune_one_epoch,
                           load_checkpoint, save_checkpoint, train)

EVENTS = "events.jsonl"


class UsageError(Exception):
    """Bad invocation or refused overwrite; exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _guard(paths, force: bool) -> None:
    for p in paths:
        if Path(p).exists() and not force:
            raise UsageError(f"{p} exists; pass --force to overwrite")


def _manifest(out: Path, cfg: ExperimentConfig, command: str) -> None:
    info = {"command": command, "config": cfg.to_dict(), "config_sha256": cfg.sha256(),
            "seed": cfg.seed,
            "versions": {"robal": robal.__version__, "numpy": np.__version__,
                         "python": platform.python_version()}}
    (out / f"manifest-{command}.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    (out / "config.yaml").write_text(cfg.dump())


def synth_datasets(cfg: ExperimentConfig, imbalance_ratio: float | None = None
                   ) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.source == "file":
        return load_binary(d.train_path), load_binary(d.test_path)
    ir = d.imbalance_ratio if imbalance_ratio is None else imbalance_ratio
    counts = make_longtail_counts(ImbalanceProfile(d.num_classes, d.n_max, ir))
    train_ds = synth_gaussians(d.num_classes, d.dim, d.spread, counts,
                               derive_seed(cfg.seed, 1), d.layout)
    test_ds = synth_gaussians(d.num_classes, d.dim, d.spread, [d.test_per_class] * d.num_classes,
                              derive_seed(cfg.seed, 2), d.layout)
    return train_ds, test_ds


def build_network(cfg: ExperimentConfig, data: LabeledDataset) -> Network:
    m = cfg.model
    return Network.create(m.backbone(data.sample_shape), m.head_config(), data.num_classes,
                          derive_seed(cfg.seed, 3))


def _check_architecture(cfg: ExperimentConfig, ckpt: Checkpoint, data: LabeledDataset) -> None:
    expected = build_network(cfg, data).descriptor()
    if expected != ckpt.descriptor:
        raise UsageError("checkpoint architecture does not match the config: "
                         f"{ckpt.descriptor} != {expected}")


def build_classifier(cfg: ExperimentConfig, ckpt: Checkpoint, rule_overrides: dict | None = None
                     ) -> Classifier:
    net = ckpt.build_network()
    direction = None
    if ckpt.tde_direction is not None:
        n = np.linalg.norm(ckpt.tde_direction)
        direction = ckpt.tde_direction / n if n > 0 else None
    scales = ckpt.arrays.get("head.scales")
    rule = cfg.posthoc_rule(direction=direction, scales=scales)
    if rule_overrides:
        rule = replace(rule, **rule_overrides)
    return Classifier(net, ClassStats(ckpt.class_counts), rule)


def eval_event(report: EvalReport, **extra) -> dict:
    return {"event": "eval", **report.summary(), **extra}


def _train_run(cfg: ExperimentConfig, out: Path | None, train_ds: LabeledDataset):
    """Train per config; with ``out`` set, log epochs and keep a last-good checkpoint."""
    net = build_network(cfg, train_ds)
    stats = ClassStats(train_ds.class_counts)
    at = cfg.at_config()
    meta = {"seed": cfg.seed, "config_sha256": cfg.sha256()}

    def on_epoch(es, state):
        if out is None:
            return
        write_jsonl(out / EVENTS, [{"event": "epoch", "epoch": es.epoch, "lr": es.lr,
                                    "loss": es.loss, "clean_accuracy": es.clean_accuracy}])
        ck = Checkpoint.from_network(net, train_ds.class_counts, state.tde_direction,
                                     {**meta, "epoch": es.epoch + 1})
        save_checkpoint(out / "model.rbck", ck)

    state = train(net, train_ds, at, stats, on_epoch_end=on_epoch)
    ck = Checkpoint.from_network(net, train_ds.class_counts, state.tde_direction,
                                 {**meta, "epoch": at.epochs})
    return net, ck


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out: Path, force: bool = False) -> list[int]:
    if cfg.dataset.source != "synth":
        raise UsageError("synth needs dataset.source: synth")
    paths = [out / "train.rblt", out / "test.rblt"]
    _guard(paths, force)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = synth_datasets(cfg)
    save_binary(train_ds, paths[0])
    save_binary(test_ds, paths[1])
    _manifest(out, cfg, "synth")
    counts = train_ds.class_counts.tolist()
    print("class counts:", " ".join(str(c) for c in counts))
    return counts


def cmd_train(cfg: ExperimentConfig, out: Path, force: bool = False) -> Path:
    path = out / "model.rbck"
    _guard([path, out / EVENTS], force)
    out.mkdir(parents=True, exist_ok=True)
    (out / EVENTS).write_text("")
    _manifest(out, cfg, "train")
    train_ds, _ = synth_datasets(cfg)
    try:
        _, ck = _train_run(cfg, out, train_ds)
    except TrainingDiverged as exc:
        write_jsonl(out / EVENTS, [{"event": "diverged", "message": str(exc)}])
        raise
    save_checkpoint(path, ck)
    print(f"wrote {path}")
    return path


def cmd_finetune(cfg: ExperimentConfig, out: Path, checkpoint: Path, method: str | None = None,
                 force: bool = False) -> Path:
    method = method or cfg.training.finetune
    if method == "none":
        raise UsageError("no fine-tuning method: set training.finetune or pass --method")
    path = out / f"finetuned-{method}.rbck"
    _guard([path], force)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    train_ds, _ = synth_datasets(cfg)
    _check_architecture(cfg, ck, train_ds)
    net = ck.build_network()
    at = replace(cfg.at_config(), seed=derive_seed(cfg.seed, 4))
    es = finetune_one_epoch(net, train_ds, method, at, ClassStats(ck.class_counts),
                            lr=cfg.training.finetune_lr)
    write_jsonl(out / EVENTS, [{"event": "finetune", "method": method, "loss": es.loss,
                                "clean_accuracy": es.clean_accuracy}])
    new = Checkpoint.from_network(net, ck.class_counts, ck.tde_direction,
                                  {**ck.metadata, "finetune": method})
    save_checkpoint(path, new)
    _manifest(out, cfg, "finetune")
    print(f"wrote {path}")
    return path


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint: Path, threads: int | None = None,
             force: bool = False, diagnostics: bool = False) -> EvalReport:
    _guard([out / "accuracy.csv", out / "recall.csv"], force)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    _, test_ds = synth_datasets(cfg)
    _check_architecture(cfg, ck, test_ds)
    clf = build_classifier(cfg, ck)
    report = evaluate(clf, test_ds, cfg.attack_list(), seed=cfg.seed, threads=threads)
    report.write_csv(out)
    events = [eval_event(report, checkpoint=str(checkpoint), posthoc=cfg.posthoc.kind,
                         label=cfg.preset or "run")]
    if diagnostics:
        attack = cfg.attacks[0]
        ns = feature_norm_stats(clf, test_ds, attack.name.split(":")[0], attack.budget(),
                                seed=cfg.seed, threads=threads)
        edges = ns.robust.bin_edges.tolist()
        events.append({"event": "norms", "attack": attack.name, "bin_edges": edges,
                       "robust_counts": ns.robust.bin_counts.tolist(),
                       "broken_counts": ns.broken.bin_counts.tolist(),
                       "robust_mean": ns.robust.mean, "broken_mean": ns.broken.mean})
        events.append({"event": "weight_norms",
                       "norms": weight_norm_profile(clf.network.head).tolist(),
                       "class_counts": ck.class_counts.tolist()})
    write_jsonl(out / EVENTS, events)
    _manifest(out, cfg, "eval")
    print(f"A_nat {report.a_nat:.4f}")
    for k, v in report.a_rob.items():
        print(f"A_rob[{k}] {v:.4f}  R_bdy {report.r_bdy[k]:.4f}")
    return report


TRAINING_AXES = ("m0", "tau-diff", "tau_m", "ir")


def _axis_config(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    m = cfg.model
    if axis == "m0":
        return replace(cfg, model=replace(m, m0=value))
    if axis == "tau-diff":
        return replace(cfg, model=replace(m, tau_b=m.tau_m + value))
    if axis == "tau_m":
        return replace(cfg, model=replace(m, tau_m=value, tau_b=value + (m.tau_b - m.tau_m)))
    if axis == "ir":
        return replace(cfg, dataset=replace(cfg.dataset, imbalance_ratio=value))
    raise ValueError(axis)


def cmd_sweep(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None,
              threads: int | None = None, force: bool = False) -> list[dict]:
    axis, values = cfg.sweep.axis, cfg.sweep.values
    path = out / f"sweep-{axis}.csv"
    _guard([path], force)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    if axis not in TRAINING_AXES and checkpoint is None:
        raise UsageError(f"sweep axis {axis!r} evaluates a trained model; pass --checkpoint")
    if axis == "kappa":
        ck = load_checkpoint(checkpoint)
        _, test_ds = synth_datasets(cfg)
        _check_architecture(cfg, ck, test_ds)
        budget = cfg.attacks[0].budget()
        ks = kappa_sweep(build_classifier(cfg, ck), test_ds, values, budget, cfg.seed, threads)
        rows = [p.as_dict() for p in ks.points]
        write_jsonl(out / EVENTS, ks.events())
    else:
        for value in values:
            row = {axis: value}
            try:
                if axis in TRAINING_AXES:
                    run_cfg = _axis_config(cfg, axis, value).validate()
                    train_ds, test_ds = synth_datasets(run_cfg)
                    _, ck = _train_run(run_cfg, None, train_ds)
                    clf = build_classifier(run_cfg, ck)
                    attacks = run_cfg.attack_list()
                else:
                    ck = load_checkpoint(checkpoint)
                    _, test_ds = synth_datasets(cfg)
                    if axis == "tau_p":
                        clf = build_classifier(cfg, ck, {"kind": "robal-bias", "tau": value})
                        attacks = cfg.attack_list()
                    else:  # pgd-steps
                        clf = build_classifier(cfg, ck)
                        attacks = [(n, replace(b, steps=int(value))) for n, b in cfg.attack_list()]
                report = evaluate(clf, test_ds, attacks, seed=cfg.seed, threads=threads)
                row.update({"status": "ok", "clean": report.a_nat, **report.a_rob})
                write_jsonl(out / EVENTS, [eval_event(report, label=f"{axis}={value}",
                                                      axis=axis, value=value)])
            except (TrainingDiverged, ValueError, FormatError) as exc:
                row.update({"status": f"error: {exc}"})
                write_jsonl(out / EVENTS, [{"event": "sweep_error", "axis": axis, "value": value,
                                            "message": str(exc)}])
            rows.append(row)
    columns: list[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    _manifest(out, cfg, f"sweep-{axis}")
    print(f"wrote {path}")
    return rows


def cmd_report(run_dir: Path, out: Path | None = None, force: bool = False) -> Path:
    """Collect every ``events.jsonl`` under ``run_dir`` into plot-ready CSVs and a summary."""
    out = out or run_dir
    summary = out / "summary.md"
    _guard([summary], force)
    out.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    evals, kappas, norms, wnorms = [], [], [], []
    files = sorted(run_dir.rglob(EVENTS)) if run_dir.is_dir() else []
    if not files:
        warnings.append(f"no {EVENTS} found under {run_dir}")
    for f in files:
        run = str(f.parent.relative_to(run_dir)) or "."
        try:
            events = read_jsonl(f)
        except json.JSONDecodeError as exc:
            warnings.append(f"{f}: unreadable ({exc})")
            continue
        for ev in events:
            kind = ev.get("event")
            if kind == "eval":
                evals.append((run, ev))
            elif kind == "kappa":
                kappas.append((run, ev))
            elif kind == "norms":
                norms.append((run, ev))
            elif kind == "weight_norms":
                wnorms.append((run, ev))
    for name, items in (("eval", evals), ("kappa", kappas), ("norms", norms)):
        if files and not items:
            warnings.append(f"no {name} events found")

    attacks: list[str] = []
    for _, ev in evals:
        attacks += [a for a in ev["a_rob"] if a not in attacks]
    with (out / "accuracy_grid.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "label", "clean", *attacks])
        for run, ev in evals:
            w.writerow([run, ev.get("label", ""), ev["a_nat"],
                        *[ev["a_rob"].get(a, "") for a in attacks]])
    with (out / "recall_bars.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "label", "class", "count", "clean", *attacks])
        for run, ev in evals:
            rec = ev["recall"]
            for c, n in enumerate(ev["class_counts"]):
                w.writerow([run, ev.get("label", ""), c, n, rec["clean"][c],
                            *[rec[a][c] if a in rec else "" for a in attacks]])
    with (out / "kappa_curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["kappa", "a_nat", "pgd", "ensemble", "zero_grad_ratio", "zero_grad_ratio_correct",
                "underflow_ratio"]
        w.writerow(["run", *cols])
        for run, ev in kappas:
            w.writerow([run, *[ev.get(c, "") for c in cols]])
    with (out / "norm_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "group", "bin_lo", "bin_hi", "count"])
        for run, ev in norms:
            edges = ev["bin_edges"]
            for group in ("robust", "broken"):
                for i, n in enumerate(ev[f"{group}_counts"]):
                    w.writerow([run, group, edges[i], edges[i + 1], n])
    with (out / "weight_norms.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "class", "count", "norm"])
        for run, ev in wnorms:
            for c, (n, v) in enumerate(zip(ev["class_counts"], ev["norms"])):
                w.writerow([run, c, n, v])

    lines = ["# Run summary", ""]
    if evals:
        lines += ["| run | label | clean | " + " | ".join(attacks) + " |",
                  "|---|---|---|" + "---|" * len(attacks)]
        for run, ev in evals:
            cells = [f"{100 * ev['a_rob'][a]:.2f}" if a in ev["a_rob"] else "" for a in attacks]
            lines.append(f"| {run} | {ev.get('label', '')} | {100 * ev['a_nat']:.2f} | "
                         + " | ".join(cells) + " |")
    else:
        lines.append("No evaluation results.")
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    summary.write_text("\n".join(lines) + "\n")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {summary}")
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", type=Path, default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d,
                        help="evaluation worker threads (default: $ROBAL_THREADS or 1)")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="overwrite existing outputs")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robal", description=__doc__)
    _common(parser, suppress=False)
    parser.add_argument("--preset", default=None, help="named preset used when no config is given")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "finetune", "eval", "sweep", "report"):
        p = sub.add_parser(name)
        _common(p, suppress=True)
        if name in ("finetune", "eval", "sweep"):
            p.add_argument("--checkpoint", type=Path, default=None)
        if name == "finetune":
            p.add_argument("--method", choices=("resample", "reweight", "lws"), default=None)
        if name == "eval":
            p.add_argument("--diagnostics", action="store_true",
                           help="also emit feature-norm and weight-norm statistics")
        if name == "report":
            p.add_argument("run_dir", type=Path)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({"preset": args.preset} if args.preset else {})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        threads = resolve_threads(args.threads)
        with threadpool_limits(limits=1):
            if args.command == "report":
                cmd_report(args.run_dir, args.out, args.force)
                return 0
            cfg = _resolve_config(args)
            out = args.out or Path("runs") / (cfg.preset or "run")
            checkpoint = getattr(args, "checkpoint", None)
            if args.command in ("finetune", "eval") and checkpoint is None:
                checkpoint = out / "model.rbck"
            if args.command == "sweep" and checkpoint is None and (out / "model.rbck").is_file():
                checkpoint = out / "model.rbck"
            if args.command == "synth":
                cmd_synth(cfg, out, args.force)
            elif args.command == "train":
                cmd_train(cfg, out, args.force)
            elif args.command == "finetune":
                cmd_finetune(cfg, out, checkpoint, args.method, args.force)
            elif args.command == "eval":
                cmd_eval(cfg, out, checkpoint, threads, args.force, args.diagnostics)
            elif args.command == "sweep":
                cmd_sweep(cfg, out, checkpoint, threads, args.force)
    except (UsageError, ConfigError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
