"""Desk-scale synthetic benchmark: baseline, full adaptation, ablations, MMD trajectory."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import plotting
from .datasets import ArrayDataset, SyntheticShiftSpec, generate_synthetic_pair
from .engine import AdaptationConfig, TargetData, adapt
from .evaluation import compare_uncertainty_metrics, mmd_trajectory
from .models import MockTeacher, TargetModel, accuracy, predict_logits, pretrain_source

log = logging.getLogger(__name__)


@dataclass
class SyntheticSetup:
    spec: SyntheticShiftSpec
    source: ArrayDataset
    target: ArrayDataset
    source_model: TargetModel
    source_train_acc: float
    baseline_acc: float
    omega: float = 0.6
    embed_dim: int = 32
    seed: int = 0

    def teacher(self) -> MockTeacher:
        """A fresh mock teacher; its projection depends only on the seed."""
        return MockTeacher.from_prototypes(
            torch.tensor(self.spec.class_means()),
            embed_dim=self.embed_dim,
            seed=self.seed,
            omega=self.omega,
            labels=self.target.labels,
        )

    def target_data(self, config: AdaptationConfig) -> TargetData:
        return TargetData(self.target, config.train_noise)


def build_synthetic(
    spec: Optional[SyntheticShiftSpec] = None,
    seed: int = 0,
    hidden: int = 128,
    bottleneck_dim: int = 64,
    pretrain_epochs: int = 30,
    pretrain_lr: float = 1e-2,
    omega: float = 0.6,
    embed_dim: int = 32,
) -> SyntheticSetup:
    spec = spec or SyntheticShiftSpec(seed=seed)
    source, target = generate_synthetic_pair(spec)
    torch.manual_seed(seed)
    model = TargetModel(spec.dim, spec.num_classes, hidden=hidden, bottleneck_dim=bottleneck_dim)
    model, train_acc = pretrain_source(
        model, source.features, source.labels, epochs=pretrain_epochs, lr=pretrain_lr, seed=seed
    )
    baseline = accuracy(model, target.features, target.labels)
    return SyntheticSetup(spec, source, target, model, train_acc, baseline, omega, embed_dim, seed)


def oracle_reference_logits(setup: SyntheticSetup, epochs: int = 30) -> np.ndarray:
    """Target logits of a model trained with labels on source and target together.

    Plain cross-entropy (no label smoothing): a smoothed oracle caps its own
    confidence, and its logit space then sits closer to the unadapted model.
    """
    torch.manual_seed(setup.seed + 7)
    x = torch.cat([setup.source.features, setup.target.features])
    y = torch.cat([setup.source.labels, setup.target.labels])
    m = TargetModel(setup.spec.dim, setup.spec.num_classes)
    pretrain_source(m, x, y, epochs=epochs, label_smoothing=0.0, seed=setup.seed + 7)
    return predict_logits(m, setup.target.features).numpy()


def run_arm(setup: SyntheticSetup, config: AdaptationConfig, run_dir: Optional[Path] = None) -> dict:
    _, history = adapt(
        config,
        setup.source_model,
        setup.target_data(config),
        setup.teacher(),
        run_dir=run_dir,
        eval_labels=setup.target.labels,
    )
    return history


ABLATIONS = {
    "full": {},
    "no_cac": {"beta": 0.0},
    "no_pc": {"use_pc": False},
}


def run_benchmark(
    out_dir: Path,
    config: Optional[AdaptationConfig] = None,
    setup: Optional[SyntheticSetup] = None,
    compare_metrics: bool = True,
) -> dict:
    """Run the whole desk-scale pipeline and write report files under ``out_dir``.

    Returns the report dict (also written to ``bench_report.json``).
    """
    t0 = time.time()
    config = config or AdaptationConfig()
    setup = setup or build_synthetic(seed=config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    histories = {}
    for name, overrides in ABLATIONS.items():
        run_dir = out_dir / "run_full" if name == "full" else None
        histories[name] = run_arm(setup, replace(config, **overrides), run_dir)
        log.info("arm %s final accuracy %.4f", name, histories[name]["target_accuracy"][-1])
    full = histories["full"]

    ref = oracle_reference_logits(setup)
    np.save(out_dir / "run_full" / "reference_logits.npy", ref)
    with np.load(out_dir / "run_full" / "snapshots.npz") as z:
        idx = z["indices"]
        traj = mmd_trajectory(list(z["target_logits"]), ref[idx], list(z["teacher_logprobs"]), seed=config.seed)
    traj.to_csv(out_dir / "mmd_trajectory.csv")
    traj.plot(out_dir / "mmd_trajectory.png")

    epochs = full["epoch"]
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "epoch", "target_accuracy", "mean_uncertainty", "gap_fraction"])
        for name, h in histories.items():
            for i, e in enumerate(h["epoch"]):
                w.writerow([name, e, repr(h["target_accuracy"][i]), repr(h["mean_uncertainty"][i]),
                            repr(h["gap_fraction"][i])])
    plotting.line_plot(
        out_dir / "ablation_accuracy.png",
        epochs,
        {name: h["target_accuracy"] for name, h in histories.items()},
        "epoch",
        "target accuracy",
    )

    comparison = None
    if compare_metrics:
        comparison = compare_uncertainty_metrics(
            config, lambda cfg: run_arm(setup, cfg), out_dir=out_dir
        )

    finals = {name: h["target_accuracy"][-1] for name, h in histories.items()}
    report = {
        "config": asdict(config),
        "synthetic": asdict(setup.spec),
        "teacher_omega": setup.omega,
        "source_train_accuracy": setup.source_train_acc,
        "baseline_accuracy": setup.baseline_acc,
        "final_accuracy": finals,
        "improvement_points": 100 * (finals["full"] - setup.baseline_acc),
        "mean_uncertainty_first": full["mean_uncertainty"][0],
        "mean_uncertainty_last": full["mean_uncertainty"][-1],
        "teacher_accuracy": full["teacher_accuracy"],
        "mmd_target_first": traj.target_mid[0],
        "mmd_target_last": traj.target_mid[-1],
        "uncertainty_comparison": comparison,
        "wall_time_sec": time.time() - t0,
    }
    (out_dir / "bench_report.json").write_text(json.dumps(report, indent=2))
    return report


def criteria_lines(report: dict) -> list[tuple[str, bool, str]]:
    """(name, passed, detail) for the end-to-end checks the report can decide."""
    fin = report["final_accuracy"]
    base = report["baseline_accuracy"]
    u1, uk = report["mean_uncertainty_first"], report["mean_uncertainty_last"]
    m1, mk = report["mmd_target_first"], report["mmd_target_last"]
    return [
        ("end-to-end improvement >= 15 points", report["improvement_points"] >= 15.0,
         f"baseline={base:.4f} adapted={fin['full']:.4f} (+{report['improvement_points']:.1f})"),
        ("mean uncertainty epoch K < epoch 1", uk < u1, f"U1={u1:.4f} UK={uk:.4f}"),
        ("ablation: no cac degrades", fin["no_cac"] < fin["full"],
         f"full={fin['full']:.4f} no_cac={fin['no_cac']:.4f}"),
        ("ablation: no pc degrades", fin["no_pc"] < fin["full"],
         f"full={fin['full']:.4f} no_pc={fin['no_pc']:.4f}"),
        ("MMD last < 0.95 * first", mk < 0.95 * m1, f"first={m1:.5f} last={mk:.5f}"),
    ]
