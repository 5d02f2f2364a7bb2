"""Command-line entry point: ``gapadapt <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import plotting
from .config import ConfigError, RunConfig
from .datasets import (
    ArrayDataset,
    DatasetFormatError,
    SyntheticShiftSpec,
    generate_synthetic_pair,
    image_transforms,
    load_image_list,
)
from .engine import Adapter, AdaptationAborted, TargetData
from .evaluation import evaluate_predictions, mmd_trajectory
from .models import (
    ClipTeacher,
    MockTeacher,
    TargetModel,
    TeacherUnavailable,
    model_hash,
    predict_logits,
    pretrain_source,
)

log = logging.getLogger("gapadapt")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---- manifest -------------------------------------------------------------


def version_stamp() -> str:
    try:
        version = metadata.version("gapadapt")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+g{rev}" if rev else version


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    config: dict
    output_dir: str
    version: str
    seed: int

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def write_manifest(command: str, args, cfg: RunConfig, out_dir: Path) -> Path:
    return RunManifest(
        command=command,
        config_path=str(args.config) if args.config else None,
        config=cfg.provenance_table(),
        output_dir=str(out_dir),
        version=version_stamp(),
        seed=cfg["seed"],
    ).write(out_dir)


# ---- data and checkpoints -------------------------------------------------


def synthetic_spec(cfg: RunConfig) -> SyntheticShiftSpec:
    try:
        return SyntheticShiftSpec(
            num_classes=cfg["num_classes"],
            samples_per_class=cfg["samples_per_class"],
            dim=cfg["synthetic_dim"],
            radius=cfg["radius"],
            cluster_std=cfg["cluster_std"],
            rotation_deg=cfg["rotation_deg"],
            translation=cfg["translation"],
            scale=cfg["scale"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_domain(cfg: RunConfig, domain: str, train: bool = False):
    """Dataset for ``domain`` ('source' or 'target') as configured."""
    if cfg["dataset"] == "synthetic":
        source, target = generate_synthetic_pair(synthetic_spec(cfg))
        return source if domain == "source" else target
    if cfg["dataset"] != "image_list":
        raise UsageError(f"unknown dataset kind {cfg['dataset']!r} (synthetic | image_list)")
    list_file = cfg[f"{domain}_list"]
    if not list_file or not Path(list_file).is_file():
        raise UsageError(f"{domain}_list: dataset list file {list_file!r} not found")
    try:
        ds = load_image_list(list_file, cfg["data_root"], image_transforms(train), cfg["num_classes"])
    except (FileNotFoundError, DatasetFormatError) as exc:
        raise UsageError(str(exc)) from None
    missing = ds.missing_paths()
    if missing:
        raise UsageError(f"{len(missing)} listed images are missing, first: {missing[0]}")
    return ds


def domain_tensors(ds) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(ds, ArrayDataset):
        return ds.features, ds.labels
    return torch.stack([ds[i][0] for i in range(len(ds))]), ds.labels


def input_shape(cfg: RunConfig):
    return cfg["synthetic_dim"] if cfg["dataset"] == "synthetic" else (3, 224, 224)


def class_names(cfg: RunConfig) -> list[str]:
    names = [s.strip() for s in cfg["class_names"].split(",") if s.strip()]
    if names and len(names) != cfg["num_classes"]:
        raise UsageError(f"class_names lists {len(names)} names for num_classes={cfg['num_classes']}")
    return names or [f"class_{c}" for c in range(cfg["num_classes"])]


def save_model(path: Path, model: TargetModel, spec: dict) -> None:
    torch.save({"format_version": 1, "model": spec, "state_dict": model.state_dict()}, path)


def load_model(path) -> tuple[TargetModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    blob = torch.load(path, weights_only=False)
    model = TargetModel(**blob["model"])
    model.load_state_dict(blob["state_dict"])
    return model, blob["model"]


def model_spec(cfg: RunConfig) -> dict:
    return {
        "in_dim": input_shape(cfg),
        "num_classes": cfg["num_classes"],
        "backbone": cfg["backbone"],
        "hidden": cfg["hidden"],
        "bottleneck_dim": cfg["bottleneck_dim"],
    }


def build_teacher(kind: str, cfg: RunConfig, target):
    if kind == "mock":
        if cfg["dataset"] != "synthetic":
            raise UsageError("the mock teacher needs class prototypes and only runs on the synthetic dataset")
        return MockTeacher.from_prototypes(
            torch.tensor(synthetic_spec(cfg).class_means()),
            embed_dim=cfg["teacher_embed_dim"],
            seed=cfg["seed"],
            omega=cfg["teacher_omega"],
            labels=target.labels,
            class_names=class_names(cfg),
        )
    if not cfg["teacher_path"]:
        raise UsageError("teacher_path is not set; the clip-adapter teacher needs a local CLIP-style model")
    try:
        return ClipTeacher.from_pretrained(cfg["teacher_path"], class_names(cfg))
    except TeacherUnavailable as exc:
        raise UsageError(f"clip-adapter teacher unavailable: {exc}") from None


# ---- commands -------------------------------------------------------------


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    source = load_domain(cfg, "source", train=True)
    write_manifest("pretrain-source", args, cfg, out)
    x, y = domain_tensors(source)
    torch.manual_seed(cfg["seed"])
    spec = model_spec(cfg)
    model = TargetModel(**spec)
    model, acc = pretrain_source(
        model, x, y, epochs=cfg["pretrain_epochs"], lr=cfg["pretrain_lr"], seed=cfg["seed"]
    )
    save_model(out / "source_model.pt", model, spec)
    (out / "config.txt").write_text(cfg.dump())
    report = {"source_train_accuracy": acc, "model_hash": model_hash(model)}
    (out / "pretrain.json").write_text(json.dumps(report, indent=2))
    print(f"source_train_accuracy,{acc:.6f}")
    print(f"checkpoint,{out / 'source_model.pt'}")
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    model, spec = load_model(args.source)
    target = load_domain(cfg, "target")
    teacher = build_teacher(args.teacher, cfg, target)
    acfg = cfg.adaptation
    eval_labels = target.labels if not args.no_eval_labels else None
    train_tf = image_transforms(True) if cfg["dataset"] == "image_list" else None
    data = TargetData(target, acfg.train_noise, train_tf)
    write_manifest("adapt", args, cfg, out)
    adapter = Adapter(acfg, model, teacher, data, run_dir=out, eval_labels=eval_labels)
    if args.resume:
        ckpt = adapter.resume_latest()
        print(f"resumed,{ckpt if ckpt else 'none'}")
    adapter.adapt()
    save_model(out / "adapted_model.pt", adapter.state.model, spec)
    hist = adapter.state.history
    if hist.get("target_accuracy"):
        print(f"final_accuracy,{hist['target_accuracy'][-1]:.6f}")
    print(f"run_dir,{out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = load_model(args.checkpoint)
    ds = load_domain(cfg, args.domain)
    x, y = domain_tensors(ds)
    probs = predict_logits(model, x).softmax(1)
    report = evaluate_predictions(probs, y, hc_quantile=cfg["hc_quantile"])
    text = report.to_json(args.out)
    print(text)
    return EXIT_OK


def _read_metrics(path: Path) -> dict[int, dict[str, float]]:
    """Per-epoch means of the Stage II loss columns plus the Stage I loss."""
    cols = ["loss_s1", "loss_pc", "loss_cac", "loss_rc", "loss_s2"]
    acc: dict[int, dict[str, list[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            e = int(row["epoch"])
            bucket = acc.setdefault(e, {c: [] for c in cols})
            for c in cols:
                if row[c]:
                    bucket[c].append(float(row[c]))
    return {e: {c: float(np.mean(v)) if v else float("nan") for c, v in b.items()} for e, b in sorted(acc.items())}


def cmd_analyze(args, cfg: Optional[RunConfig] = None) -> int:
    run = Path(args.run_dir)
    summary_path, metrics_path = run / "summary.json", run / "metrics.csv"
    if not run.is_dir() or not summary_path.is_file() or not metrics_path.is_file():
        raise UsageError(f"{run} is not a completed run directory (needs summary.json and metrics.csv)")
    out = Path(args.out) if args.out else run / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    hist = json.loads(summary_path.read_text())["per_epoch"]
    epochs = hist.get("epoch", [])
    if not epochs:
        raise UsageError(f"{run} has no completed epochs")
    losses = _read_metrics(metrics_path)

    fields = ["epoch", "loss_s1", "loss_pc", "loss_cac", "loss_rc", "loss_s2", "gap_fraction",
              "mean_uncertainty", "target_accuracy", "teacher_accuracy"]
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for i, e in enumerate(epochs):
            row = [e] + [repr(losses[e][c]) for c in fields[1:6]]
            row += [repr(hist[c][i]) if c in hist else "" for c in fields[6:]]
            w.writerow(row)
    plotting.loss_curves(
        out / "loss_curves.png", epochs, {c: [losses[e][c] for e in epochs] for c in fields[1:6]}
    )
    plotting.line_plot(out / "gap_fraction.png", epochs, {"gap fraction": hist["gap_fraction"]},
                       "epoch", "gap fraction")
    if "target_accuracy" in hist:
        plotting.line_plot(
            out / "accuracy.png",
            epochs,
            {"target": hist["target_accuracy"], "teacher": hist["teacher_accuracy"]},
            "epoch",
            "accuracy",
        )
    ref_path = Path(args.reference) if args.reference else run / "reference_logits.npy"
    snap_path = run / "snapshots.npz"
    if ref_path.is_file() and snap_path.is_file():
        ref = np.load(ref_path)
        with np.load(snap_path) as z:
            idx = z["indices"]
            traj = mmd_trajectory(list(z["target_logits"]), ref[idx], list(z["teacher_logprobs"]),
                                  seed=args.seed)
        traj.to_csv(out / "mmd_trajectory.csv")
        traj.plot(out / "mmd_trajectory.png")
        print(f"mmd_first,{traj.target_mid[0]:.6f}")
        print(f"mmd_last,{traj.target_mid[-1]:.6f}")
    elif args.reference:
        raise UsageError(f"reference logits {ref_path} or snapshots missing")
    for p in sorted(out.iterdir()):
        print(f"wrote,{p}")
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    from .bench import build_synthetic, criteria_lines, run_benchmark

    out = Path(args.out)
    write_manifest("bench-synthetic", args, cfg, out)
    setup = build_synthetic(
        synthetic_spec(cfg),
        seed=cfg["seed"],
        hidden=cfg["hidden"],
        bottleneck_dim=cfg["bottleneck_dim"],
        pretrain_epochs=cfg["pretrain_epochs"],
        pretrain_lr=cfg["pretrain_lr"],
        omega=cfg["teacher_omega"],
        embed_dim=cfg["teacher_embed_dim"],
    )
    report = run_benchmark(out, cfg.adaptation, setup, compare_metrics=not args.skip_comparison)
    print("check,result,detail")
    for name, ok, detail in criteria_lines(report):
        print(f"{name},{'PASS' if ok else 'FAIL'},{detail}")
    return EXIT_OK


# ---- argument parsing -----------------------------------------------------


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("pretrain-source", help="train the source model with labels")
    common(p, "runs/source")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt a source checkpoint to the target domain")
    common(p, "runs/adapt")
    p.add_argument("--source", required=True, help="source checkpoint from pretrain-source")
    p.add_argument("--teacher", choices=["mock", "clip-adapter"], default=None)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.add_argument("--no-eval-labels", action="store_true", help="skip per-epoch accuracy logging")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a configured domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="render curves and the MMD trajectory of a run")
    p.add_argument("run_dir")
    p.add_argument("--reference", default=None, help="reference logits .npy (default: run_dir/reference_logits.npy)")
    p.add_argument("--out", default=None, help="output directory (default: run_dir/analysis)")
    p.add_argument("--seed", type=int, default=0, help="subsampling seed for the MMD estimate")
    p.set_defaults(func=cmd_analyze, config=None, set=[])

    p = sub.add_parser("bench-synthetic", help="run the desk-scale synthetic benchmark")
    common(p, "runs/bench")
    p.add_argument("--skip-comparison", action="store_true", help="skip the uncertainty-metric comparison")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command != "analyze":
            cfg = RunConfig.resolve(args.config, _parse_sets(args.set))
            if args.command == "adapt" and args.teacher is None:
                args.teacher = cfg["teacher"]
            if args.command == "adapt" and args.teacher not in ("mock", "clip-adapter"):
                raise UsageError(f"unknown teacher {args.teacher!r}")
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdaptationAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
