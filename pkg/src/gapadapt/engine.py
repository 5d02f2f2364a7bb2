"""Epoch loop alternating prompt customization and gap-region distillation."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import struct
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .bank import PredictionBank, create_bank, fuse, sample_fusion_weight, top_n_categories
from .core_math import entropy
from .datasets import ArrayDataset, ImageListDataset
from .models import PromptContext, TargetModel, Teacher, predict_logits
from .objectives import LossBreakdown, balance_loss, cac_loss, pc_loss, stage1_loss, stage2_loss
from .uncertainty import (
    CurriculumSchedule,
    ReferenceState,
    detect_gap_region,
    init_reference,
    threshold,
    update_reference,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METRICS_HEADER = [
    "epoch", "iter", "stage", "loss_s1", "loss_pc", "loss_cac", "loss_rc",
    "loss_balance", "loss_s2", "gap_fraction", "lr",
]


@dataclass
class AdaptationConfig:
    alpha: float = 1.0
    beta: float = 0.4
    eta: float = 0.05
    lambda_rate: float = 10.0
    iota: float = 0.1
    top_n: int = 2
    epsilon: float = 0.01
    gamma: float = 1.01
    delta: float = 0.1
    epochs: int = 15
    batch_size: int = 64
    momentum: float = 0.9
    lr_target: float = 1e-3
    lr_backbone: float = 1e-3
    lr_prompt: float = 3e-3
    weight_decay: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    pc_scope: str = "all"
    reference_mode: str = "ema"
    uncertainty_metric: str = "referenced"
    use_pc: bool = True
    cac_literal: bool = False
    cac_detach_scale: bool = False
    per_class_context: bool = True
    train_noise: float = 0.0
    snapshot_max: int = 2000

    def __post_init__(self):
        if self.pc_scope not in ("gap", "all"):
            raise ValueError(f"pc_scope must be 'gap' or 'all', got {self.pc_scope!r}")
        if self.reference_mode not in ("ema", "additive"):
            raise ValueError(f"reference_mode must be 'ema' or 'additive', got {self.reference_mode!r}")
        if self.uncertainty_metric not in ("referenced", "entropy"):
            raise ValueError(f"unknown uncertainty_metric {self.uncertainty_metric!r}")
        if self.epochs < 0 or self.batch_size < 2 or self.top_n < 1:
            raise ValueError("epochs >= 0, batch_size >= 2 and top_n >= 1 required")
        CurriculumSchedule(self.epsilon, self.gamma)

    @property
    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.epsilon, self.gamma)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# where each default comes from; everything not listed is a derived default
PAPER_DEFAULTS = {
    "alpha", "beta", "eta", "lambda_rate", "iota", "top_n", "epsilon", "gamma",
    "epochs", "batch_size", "momentum", "per_class_context",
}


def provenance(key: str) -> str:
    return "paper" if key in PAPER_DEFAULTS else "derived-default"


class AdaptationAborted(RuntimeError):
    pass


class TargetData:
    """Index-addressable unlabeled target inputs.

    Labels, when present, are only read by evaluation hooks.
    """

    def __init__(self, dataset, train_noise: float = 0.0, train_transform=None):
        self.dataset = dataset
        self.train_noise = train_noise
        self.train_transform = train_transform

    @property
    def n(self) -> int:
        return len(self.dataset)

    @property
    def labels(self) -> Optional[torch.Tensor]:
        return getattr(self.dataset, "labels", None)

    def inputs(self, idx: torch.Tensor, train: bool = False, generator=None) -> torch.Tensor:
        ds = self.dataset
        if isinstance(ds, ArrayDataset):
            x = ds.features[idx]
            if train and self.train_noise > 0:
                x = x + self.train_noise * torch.randn(x.shape, generator=generator)
            return x
        if isinstance(ds, ImageListDataset) and train and self.train_transform is not None:
            saved, ds.transform = ds.transform, self.train_transform
            try:
                return torch.stack([ds[i][0] for i in idx.tolist()])
            finally:
                ds.transform = saved
        return torch.stack([ds[i][0] for i in idx.tolist()])

    def chunks(self, size: int = 512):
        for start in range(0, self.n, size):
            idx = torch.arange(start, min(start + size, self.n))
            yield idx, self.inputs(idx)


def _batches(n: int, batch_size: int, generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    out = list(perm.split(batch_size))
    if len(out) > 1 and len(out[-1]) < 2:
        # batch-norm cannot train on a single sample
        out[-2] = torch.cat([out[-2], out.pop()])
    return out


@torch.no_grad()
def target_probs(model: TargetModel, data: TargetData) -> torch.Tensor:
    return torch.cat([predict_logits(model, x).softmax(1) for _, x in data.chunks()]).double()


@torch.no_grad()
def teacher_probs(teacher: Teacher, context: PromptContext, data: TargetData) -> torch.Tensor:
    out = [teacher.predict(x, context, index=idx) for idx, x in data.chunks()]
    return torch.cat(out).double()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class RunState:
    model: TargetModel
    context: PromptContext
    bank: PredictionBank
    reference: ReferenceState
    opt_target: torch.optim.Optimizer
    opt_prompt: torch.optim.Optimizer
    generator: torch.Generator
    rng: np.random.Generator
    epoch: int = 0  # number of completed epochs
    history: dict = field(default_factory=dict)


class Adapter:
    """Runs the two-stage adaptation for a target model against a frozen teacher.

    ``run_dir`` (optional) receives ``metrics.csv``, per-epoch checkpoint
    archives, ``snapshots.npz`` and ``summary.json``.
    """

    def __init__(
        self,
        config: AdaptationConfig,
        model: TargetModel,
        teacher: Teacher,
        data: TargetData,
        run_dir: Optional[Path] = None,
        eval_labels: Optional[torch.Tensor] = None,
    ):
        self.config = config
        self.teacher = teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.data = data
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.eval_labels = eval_labels
        self.metrics_rows: list[list[str]] = []
        self._csv = None
        torch.manual_seed(config.seed)

        cfg = config
        context = teacher.make_context(per_class=cfg.per_class_context)
        head = list(model.bottleneck.parameters()) + list(model.classifier.parameters())
        opt_target = torch.optim.SGD(
            [
                {"params": list(model.backbone.parameters()), "lr": cfg.lr_backbone},
                {"params": head, "lr": cfg.lr_target},
            ],
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        opt_prompt = torch.optim.SGD([context.context], lr=cfg.lr_prompt, momentum=cfg.momentum)

        source = target_probs(model, data)
        vil = teacher_probs(teacher, context, data)
        self.state = RunState(
            model=model,
            context=context,
            bank=create_bank(data.n, source.shape[1], source, vil),
            reference=init_reference(source, delta=cfg.delta, mode=cfg.reference_mode),
            opt_target=opt_target,
            opt_prompt=opt_prompt,
            generator=torch.Generator().manual_seed(cfg.seed),
            rng=np.random.default_rng(cfg.seed),
        )
        self.snapshot_idx = self._snapshot_indices()
        self.snapshots: dict[str, list[np.ndarray]] = {"target_logits": [], "teacher_logprobs": []}

    def _snapshot_indices(self) -> torch.Tensor:
        n = self.data.n
        if n <= self.config.snapshot_max:
            return torch.arange(n)
        g = torch.Generator().manual_seed(self.config.seed + 1)
        return torch.randperm(n, generator=g)[: self.config.snapshot_max].sort().values

    # ---- logging -------------------------------------------------------

    def _log_row(self, epoch, it, stage, bd: LossBreakdown, lr):
        row = [
            str(epoch), str(it), stage,
            _fmt(bd.stage1), _fmt(bd.pc), _fmt(bd.cac), _fmt(bd.rc),
            _fmt(bd.balance), _fmt(bd.stage2), _fmt(bd.gap_fraction), _fmt(lr),
        ]
        self.metrics_rows.append(row)
        if self._csv is not None:
            csv.writer(self._csv).writerow(row)
            self._csv.flush()

    def _open_metrics(self, keep_epochs: int = 0):
        if self.run_dir is None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "metrics.csv"
        rows = []
        if keep_epochs and path.exists():
            with open(path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) <= keep_epochs]
        self._csv = open(path, "w", newline="")
        w = csv.writer(self._csv)
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
        self._csv.flush()

    # ---- stages --------------------------------------------------------

    def _check_finite(self, loss: torch.Tensor, where: str):
        if not torch.isfinite(loss):
            raise AdaptationAborted(
                f"non-finite loss during {where} at epoch {self.state.epoch + 1}: {loss.item()}"
            )

    def run_stage1(self, epoch_k: int) -> None:
        """Customize the prompt context; the target model is only read."""
        st, cfg = self.state, self.config
        st.model.eval()
        lr = st.opt_prompt.param_groups[0]["lr"]
        for it, idx in enumerate(_batches(self.data.n, cfg.batch_size, st.generator), 1):
            x = self.data.inputs(idx, train=True, generator=st.generator)
            with torch.no_grad():
                p_t = st.model(x).softmax(1).double()
            p_v = self.teacher.predict(x, st.context, index=idx).double()
            loss = stage1_loss(p_t, p_v)
            self._check_finite(loss, "stage I")
            st.opt_prompt.zero_grad()
            loss.backward()
            st.opt_prompt.step()
            self._log_row(epoch_k + 1, it, "S1", LossBreakdown(stage1=loss.item()), lr)

    def _uncertainty(self, probs: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        h = entropy(probs, validate=False)
        if self.config.uncertainty_metric == "entropy":
            return h
        return h - self.state.reference.rho[idx].to(h.dtype)

    def run_stage2(self, epoch_k: int) -> None:
        """Gap-region discovery, labeling and reduction for one epoch."""
        st, cfg = self.state, self.config
        m_k = threshold(epoch_k, cfg.schedule)
        if epoch_k > 0:
            st.reference = update_reference(st.reference, entropy(st.bank.target_preds, validate=False))
        lr = st.opt_target.param_groups[-1]["lr"]
        u_sum = 0.0
        for it, idx in enumerate(_batches(self.data.n, cfg.batch_size, st.generator), 1):
            x = self.data.inputs(idx, train=True, generator=st.generator)
            with torch.no_grad():
                p_v = self.teacher.predict(x, st.context, index=idx).double()
            st.model.train()
            logits = st.model(x)
            probs = logits.softmax(1).double()
            u = self._uncertainty(probs, idx)
            gap = detect_gap_region(u.detach(), m_k)
            u_sum += u.detach().sum().item()
            gap_fraction = gap.numel() / len(idx)

            tau = sample_fusion_weight(cfg.lambda_rate, st.rng, size=gap.numel())
            p_prime, p_dprime = st.bank.fetch(idx[gap])
            p_bar = fuse(p_prime, p_dprime, tau)
            top = top_n_categories(p_bar, cfg.top_n)

            pc_rows = gap if cfg.pc_scope == "gap" else torch.arange(len(idx))
            if cfg.use_pc:
                pc = pc_loss(probs[pc_rows], p_v[pc_rows], cfg.alpha)
                bal = balance_loss(probs[pc_rows]).item()
            else:
                pc, bal = torch.zeros((), dtype=torch.float64), 0.0
            cac = cac_loss(
                logits[gap], top, cfg.iota, literal=cfg.cac_literal, detach_scale=cfg.cac_detach_scale
            )
            rc = u[gap].mean() if gap.numel() else torch.zeros((), dtype=torch.float64)
            bd = stage2_loss(pc, cac, rc, cfg.beta, cfg.eta, balance=bal, gap_fraction=gap_fraction)
            self._check_finite(bd.total, "stage II")
            if bd.total.requires_grad:
                st.opt_target.zero_grad()
                bd.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(st.model.parameters(), cfg.grad_clip)
                st.opt_target.step()
            fresh = predict_logits(st.model, self.data.inputs(idx)).softmax(1).double()
            st.bank.update_target_rows(idx, fresh)
            self._log_row(epoch_k + 1, it, "S2", bd, lr)
        # every sample is visited once per pass, so this is a dataset mean
        self._pass_uncertainty = u_sum / self.data.n

    # ---- epoch loop ----------------------------------------------------

    @torch.no_grad()
    def _epoch_hook(self, epoch_k: int) -> None:
        st = self.state
        logits = torch.cat([predict_logits(st.model, x) for _, x in self.data.chunks()])
        probs = logits.softmax(1).double()
        t_probs = st.bank.vil_preds
        v_now = teacher_probs(self.teacher, st.context, self.data)
        u = entropy(probs, validate=False)
        if self.config.uncertainty_metric == "referenced":
            u = u - st.reference.rho
        rows = [r for r in self.metrics_rows if r[0] == str(epoch_k + 1) and r[2] == "S2"]
        hist = st.history
        hist.setdefault("epoch", []).append(epoch_k + 1)
        hist.setdefault("mean_uncertainty", []).append(self._pass_uncertainty)
        hist.setdefault("mean_uncertainty_eval", []).append(u.mean().item())
        hist.setdefault("gap_fraction", []).append(
            float(np.mean([float(r[9]) for r in rows])) if rows else 0.0
        )
        hist.setdefault("loss_s2", []).append(float(np.mean([float(r[8]) for r in rows])) if rows else 0.0)
        if self.eval_labels is not None:
            y = torch.as_tensor(self.eval_labels)
            hist.setdefault("target_accuracy", []).append((probs.argmax(1) == y).double().mean().item())
            hist.setdefault("teacher_accuracy", []).append((v_now.argmax(1) == y).double().mean().item())
            hist.setdefault("bank_teacher_accuracy", []).append((t_probs.argmax(1) == y).double().mean().item())
        sel = self.snapshot_idx
        self.snapshots["target_logits"].append(logits[sel].float().numpy())
        self.snapshots["teacher_logprobs"].append(v_now[sel].clamp_min(1e-8).log().float().numpy())

    def run_epoch(self) -> None:
        st = self.state
        k = st.epoch
        vil = teacher_probs(self.teacher, st.context, self.data)
        if not torch.isfinite(vil).all():
            raise AdaptationAborted(f"non-finite teacher predictions at epoch {k + 1}")
        st.bank.refresh_vil_all(vil)
        self.run_stage1(k)
        self.run_stage2(k)
        st.epoch += 1
        self._epoch_hook(k)
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / f"ckpt_epoch{st.epoch:03d}.zip")
            self._write_snapshots()

    def adapt(self, epochs: Optional[int] = None) -> TargetModel:
        total = self.config.epochs if epochs is None else epochs
        t0 = time.time()
        if self._csv is None:
            self._open_metrics(keep_epochs=self.state.epoch)
        status = "completed"
        try:
            while self.state.epoch < total:
                self.run_epoch()
                log.info("epoch %d/%d %s", self.state.epoch, total, self._epoch_summary())
        except AdaptationAborted:
            status = "aborted"
            raise
        finally:
            if self._csv is not None:
                self._csv.close()
                self._csv = None
            if self.run_dir is not None:
                self.write_summary(time.time() - t0, status)
        return self.state.model

    def _epoch_summary(self) -> str:
        h = self.state.history
        parts = [f"gap={h['gap_fraction'][-1]:.3f}", f"U={h['mean_uncertainty'][-1]:.4f}"]
        if "target_accuracy" in h:
            parts.append(f"acc={h['target_accuracy'][-1]:.4f}")
            parts.append(f"teacher={h['teacher_accuracy'][-1]:.4f}")
        return " ".join(parts)

    def write_summary(self, wall_time: float, status: str = "completed") -> None:
        h = self.state.history
        summary = {
            "status": status,
            "config": asdict(self.config),
            "epochs_completed": self.state.epoch,
            "per_epoch": h,
            "final_accuracy": h["target_accuracy"][-1] if h.get("target_accuracy") else None,
            "wall_time_sec": wall_time,
        }
        (self.run_dir / "summary.json").write_text(json.dumps(summary, indent=2))

    def _write_snapshots(self) -> None:
        np.savez(
            self.run_dir / "snapshots.npz",
            indices=self.snapshot_idx.numpy(),
            target_logits=np.stack(self.snapshots["target_logits"]),
            teacher_logprobs=np.stack(self.snapshots["teacher_logprobs"]),
        )

    # ---- checkpoints ---------------------------------------------------

    def save_checkpoint(self, path: Path) -> None:
        st = self.state
        members: dict[str, bytes] = {}

        def put_torch(name, obj):
            buf = io.BytesIO()
            torch.save(obj, buf)
            members[name] = buf.getvalue()

        put_torch("target_model.pt", st.model.state_dict())
        put_torch("prompt_context.pt", st.context.state_dict())
        put_torch("optimizer.pt", {"target": st.opt_target.state_dict(), "prompt": st.opt_prompt.state_dict()})
        put_torch("rng.pt", {"torch": st.generator.get_state(), "numpy": st.rng.bit_generator.state})
        members["reference.bin"] = dump_reference(st.reference)
        buf = io.BytesIO()
        st.bank.dump(buf)
        members["bank.bin"] = buf.getvalue()
        manifest = {
            "format_version": FORMAT_VERSION,
            "epoch": st.epoch,
            "config": asdict(self.config),
            "history": st.history,
            "components": {
                "target_model.pt": {k: list(v.shape) for k, v in st.model.state_dict().items()},
                "prompt_context.pt": {"context": list(st.context.context.shape)},
                "optimizer.pt": {"groups": ["target", "prompt"]},
                "rng.pt": {"streams": ["torch", "numpy"]},
                "reference.bin": {"rho": [st.reference.n], "mode": st.reference.mode},
                "bank.bin": {"target_preds": [st.bank.n, st.bank.num_classes],
                             "vil_preds": [st.bank.n, st.bank.num_classes]},
            },
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for name, data in members.items():
                zf.writestr(name, data)

    def load_checkpoint(self, path: Path) -> None:
        st = self.state
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")

            def get_torch(name):
                return torch.load(io.BytesIO(zf.read(name)), weights_only=False)

            st.model.load_state_dict(get_torch("target_model.pt"))
            st.context.load_state_dict(get_torch("prompt_context.pt"))
            opt = get_torch("optimizer.pt")
            st.opt_target.load_state_dict(opt["target"])
            st.opt_prompt.load_state_dict(opt["prompt"])
            rng = get_torch("rng.pt")
            st.generator.set_state(rng["torch"])
            st.rng.bit_generator.state = rng["numpy"]
            st.reference = load_reference(zf.read("reference.bin"), delta=self.config.delta)
            st.bank = PredictionBank.load(io.BytesIO(zf.read("bank.bin")))
        st.epoch = manifest["epoch"]
        st.history = manifest["history"]
        snap = self.run_dir / "snapshots.npz" if self.run_dir else None
        if snap is not None and snap.exists():
            with np.load(snap) as z:
                self.snapshots = {k: list(z[k][: st.epoch]) for k in ("target_logits", "teacher_logprobs")}

    def resume_latest(self) -> Optional[Path]:
        if self.run_dir is None:
            return None
        ckpts = sorted(self.run_dir.glob("ckpt_epoch*.zip"))
        if not ckpts:
            return None
        self.load_checkpoint(ckpts[-1])
        return ckpts[-1]


_REF_HEADER = struct.Struct("<4sIQQ8s")


def dump_reference(ref: ReferenceState) -> bytes:
    """Flat float64 rho preceded by magic, version, epoch, n and an 8-byte mode tag."""
    head = _REF_HEADER.pack(b"RREF", FORMAT_VERSION, ref.epoch, ref.n, ref.mode.encode().ljust(8, b"\0"))
    return head + ref.rho.double().numpy().astype("<f8").tobytes()


def load_reference(blob: bytes, delta: float) -> ReferenceState:
    magic, version, epoch, n, mode = _REF_HEADER.unpack(blob[: _REF_HEADER.size])
    if magic != b"RREF":
        raise ValueError("not a reference-state section")
    rho = np.frombuffer(blob[_REF_HEADER.size :], dtype="<f8", count=n).copy()
    return ReferenceState(torch.from_numpy(rho), epoch=epoch, delta=delta, mode=mode.rstrip(b"\0").decode())


def adapt(
    config: AdaptationConfig,
    source_model: TargetModel,
    target_data: TargetData,
    teacher: Teacher,
    run_dir: Optional[Path] = None,
    eval_labels: Optional[torch.Tensor] = None,
) -> tuple[TargetModel, dict]:
    """Adapt a copy of ``source_model``; returns the adapted model and per-epoch history."""
    model = copy.deepcopy(source_model)
    adapter = Adapter(config, model, teacher, target_data, run_dir=run_dir, eval_labels=eval_labels)
    adapter.adapt()
    return adapter.state.model, adapter.state.history
