"""Accuracy reports, pseudo-label quality, MMD trajectories and metric comparisons."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import plotting
from .core_math import median_bandwidths, mmd_distance


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float]
    mean_class_accuracy: float
    pl_acc: float
    hc_acc: float
    n: int
    num_classes: int
    hc_quantile: float = 0.3

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate_predictions(
    probs,
    labels,
    pseudo_labels=None,
    hc_quantile: float = 0.3,
) -> EvalReport:
    """Score argmax predictions against labels.

    ``pl_acc`` scores ``pseudo_labels`` (defaults to the argmax predictions);
    ``hc_acc`` is the accuracy on the ``hc_quantile`` most confident samples.
    Classes absent from ``labels`` get per-class accuracy NaN and are left out
    of the class mean.
    """
    probs = torch.as_tensor(probs, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    n, C = probs.shape
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    conf, pred = probs.max(1)
    correct = (pred == labels).double()
    per_class = []
    for c in range(C):
        mask = labels == c
        per_class.append(correct[mask].mean().item() if mask.any() else float("nan"))
    present = [a for a in per_class if not np.isnan(a)]
    pl = pred if pseudo_labels is None else torch.as_tensor(pseudo_labels, dtype=torch.long)
    k = max(1, int(round(hc_quantile * n)))
    # stable descending sort: ties resolve by sample index
    top = torch.sort(-conf, stable=True).indices[:k]
    return EvalReport(
        accuracy=correct.mean().item(),
        per_class_accuracy=per_class,
        mean_class_accuracy=float(np.mean(present)),
        pl_acc=(pl == labels).double().mean().item(),
        hc_acc=correct[top].mean().item(),
        n=n,
        num_classes=C,
        hc_quantile=hc_quantile,
    )


@torch.no_grad()
def evaluate(model, features, labels, hc_quantile: float = 0.3, pseudo_labels=None) -> EvalReport:
    from .models import predict_logits

    probs = predict_logits(model, torch.as_tensor(features)).softmax(1)
    return evaluate_predictions(probs, labels, pseudo_labels, hc_quantile)


@dataclass
class MmdTrajectory:
    epochs: list[int]
    target_mid: list[float]
    teacher_trim: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mmd_target_mid", "mmd_teacher_trim"])
            for i, e in enumerate(self.epochs):
                teacher = repr(self.teacher_trim[i]) if self.teacher_trim else ""
                w.writerow([e, repr(self.target_mid[i]), teacher])

    def plot(self, path) -> Path:
        series = {"target-mid": self.target_mid}
        if self.teacher_trim:
            series["teacher-trim"] = self.teacher_trim
        return plotting.line_plot(path, self.epochs, series, "epoch", "MMD$^2$ to reference")


def mmd_trajectory(
    logit_snapshots,
    reference_logits,
    teacher_snapshots=None,
    max_points: int = 500,
    seed: int = 0,
) -> MmdTrajectory:
    """Per-epoch MMD between snapshot logit sets and a reference logit set.

    Snapshots and reference are subsampled to the same ``max_points`` rows;
    kernel bandwidths come from the reference alone so epochs are comparable.
    """
    ref = torch.as_tensor(np.asarray(reference_logits), dtype=torch.float64)
    snaps = [torch.as_tensor(np.asarray(s), dtype=torch.float64) for s in logit_snapshots]
    teach = [torch.as_tensor(np.asarray(s), dtype=torch.float64) for s in (teacher_snapshots or [])]
    for s in snaps + teach:
        if s.shape[1] != ref.shape[1]:
            raise ValueError(f"snapshot dim {s.shape[1]} != reference dim {ref.shape[1]}")
    rng = np.random.default_rng(seed)
    n = len(ref)
    sel = torch.as_tensor(np.sort(rng.permutation(n)[:max_points])) if n > max_points else torch.arange(n)
    ref_s = ref[sel]
    bw = median_bandwidths(ref_s, ref_s)

    def run(sets):
        return [mmd_distance(s[sel] if len(s) == n else s, ref_s, bw) for s in sets]

    return MmdTrajectory(list(range(1, len(snaps) + 1)), run(snaps), run(teach))


def compare_uncertainty_metrics(
    config,
    run_arm: Callable,
    metrics=("referenced", "entropy"),
    out_dir: Optional[Path] = None,
) -> dict:
    """Run otherwise-identical adaptations that differ only in the uncertainty metric.

    ``run_arm(config)`` must perform one adaptation and return its per-epoch
    history (with ``target_accuracy``). Returns ``{metric: accuracy curve}``
    plus ``"final_delta"`` (first arm minus second, in accuracy points).
    """
    curves = {}
    for metric in metrics:
        hist = run_arm(replace(copy.deepcopy(config), uncertainty_metric=metric))
        curves[metric] = list(hist["target_accuracy"])
    first, second = metrics[0], metrics[-1]
    result = dict(curves)
    result["final_delta"] = 100 * (curves[first][-1] - curves[second][-1])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "uncertainty_comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "epoch", "target_accuracy"])
            for metric in metrics:
                for e, acc in enumerate(curves[metric], 1):
                    w.writerow([metric, e, repr(acc)])
        epochs = list(range(1, len(curves[first]) + 1))
        plotting.line_plot(
            out_dir / "uncertainty_comparison.png",
            epochs,
            {m: curves[m] for m in metrics},
            "epoch",
            "target accuracy",
        )
    return result
