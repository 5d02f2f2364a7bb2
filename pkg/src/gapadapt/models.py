"""Target classifier, prompt context, teachers and source pretraining."""

from __future__ import annotations

import hashlib
import logging
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

log = logging.getLogger(__name__)


class TargetModel(nn.Module):
    """Backbone -> (linear + batch-norm) bottleneck -> weight-normalized linear head."""

    def __init__(
        self,
        in_dim: int | Sequence[int],
        num_classes: int,
        backbone: str = "mlp",
        hidden: int = 128,
        bottleneck_dim: int = 64,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.backbone_name = backbone
        if backbone == "mlp":
            self.backbone = nn.Sequential(
                nn.Flatten(),
                nn.Linear(int(np.prod(in_dim)), hidden),
                nn.ReLU(),
                nn.Linear(hidden, hidden),
                nn.ReLU(),
            )
            feat = hidden
        elif backbone == "conv":
            channels = in_dim[0] if isinstance(in_dim, Sequence) else 3
            self.backbone = nn.Sequential(
                nn.Conv2d(channels, 32, 3, padding=1),
                nn.BatchNorm2d(32),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Conv2d(32, 64, 3, padding=1),
                nn.BatchNorm2d(64),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Conv2d(64, hidden, 3, padding=1),
                nn.ReLU(),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
            feat = hidden
        elif backbone in ("resnet50", "resnet101"):
            import torchvision

            net = getattr(torchvision.models, backbone)(weights="DEFAULT")
            feat = net.fc.in_features
            net.fc = nn.Identity()
            self.backbone = net
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.bottleneck = nn.Sequential(nn.Linear(feat, bottleneck_dim), nn.BatchNorm1d(bottleneck_dim))
        self.classifier = weight_norm(nn.Linear(bottleneck_dim, num_classes), dim=0)

    @property
    def pretrained_backbone(self) -> bool:
        return self.backbone_name.startswith("resnet")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.bottleneck(self.backbone(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


def state_hash(tensors) -> str:
    """SHA-256 over the raw bytes of an iterable of tensors."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def model_hash(module: nn.Module) -> str:
    return state_hash(module.state_dict().values())


def pretrain_source(
    model: TargetModel,
    x: torch.Tensor,
    y: torch.Tensor,
    epochs: int = 30,
    lr: float = 1e-2,
    batch_size: int = 64,
    label_smoothing: float = 0.1,
    seed: int = 0,
) -> tuple[TargetModel, float]:
    """Supervised training on the labeled source domain.

    Returns the model (trained in place) and its final accuracy on ``(x, y)``.
    """
    if len(x) == 0:
        raise ValueError("empty source dataset")
    y = torch.as_tensor(y, dtype=torch.long)
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("source labels outside [0, C)")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4)
    n = len(x)
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            if len(idx) < 2:
                continue  # batch-norm needs two samples
            loss = F.cross_entropy(model(x[idx]), y[idx], label_smoothing=label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
    acc = accuracy(model, x, y)
    log.info("source pretraining: %d epochs, train accuracy %.4f", epochs, acc)
    return model, acc


@torch.no_grad()
def predict_logits(model: nn.Module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    pred = predict_logits(model, x).argmax(1)
    return (pred == torch.as_tensor(y)).double().mean().item()


class PromptContext(nn.Module):
    """Learnable context tokens; the only trainable piece of a teacher.

    ``context`` is ``(n_ctx, dim)`` when shared across classes and
    ``(C, n_ctx, dim)`` when per-class.
    """

    def __init__(self, class_names: Sequence[str], init: torch.Tensor, per_class: bool = False):
        super().__init__()
        self.class_names = list(class_names)
        self.per_class = per_class
        init = init.detach().clone().float()
        if init.ndim == 1:
            init = init[None]
        if per_class and init.ndim == 2:
            init = init[None].repeat(len(self.class_names), 1, 1)
        self.context = nn.Parameter(init)

    @property
    def dim(self) -> int:
        return self.context.shape[-1]

    def per_class_offsets(self) -> torch.Tensor:
        """Mean context vector per class, shape ``(C, dim)``."""
        if self.per_class:
            return self.context.mean(1)
        return self.context.mean(0, keepdim=True).expand(len(self.class_names), -1)


class Teacher(nn.Module):
    """Frozen prompt-conditioned classifier producing class probabilities."""

    def predict(self, x: torch.Tensor, context: PromptContext, index: Optional[torch.Tensor] = None):
        raise NotImplementedError

    def make_context(self, per_class: bool = False) -> PromptContext:
        raise NotImplementedError

    def frozen_hash(self) -> str:
        return state_hash(self.state_dict().values())


class TeacherUnavailable(RuntimeError):
    pass


class MockTeacher(Teacher):
    """Deterministic stand-in for a vision-language teacher.

    Inputs go through a fixed random projection; classes are scored by cosine
    similarity against ``class_embedding + context`` at temperature 0.07.
    With ``omega < 1`` and ground-truth labels available for the queried
    sample indices, the similarity softmax is mixed with the true one-hot:
    ``omega * softmax + (1 - omega) * onehot``. With omega = 0.6 the teacher is
    right on roughly three quarters of the default synthetic target domain.
    """

    def __init__(
        self,
        projection: torch.Tensor,
        class_embeddings: torch.Tensor,
        class_names: Optional[Sequence[str]] = None,
        temperature: float = 0.07,
        omega: float = 1.0,
        labels: Optional[torch.Tensor] = None,
    ):
        super().__init__()
        if projection.shape[1] != class_embeddings.shape[1]:
            raise ValueError("projection and class embeddings disagree on embedding dim")
        if not 0.0 <= omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        self.register_buffer("projection", projection.detach().clone().float())
        self.register_buffer("class_embeddings", class_embeddings.detach().clone().float())
        self.temperature = temperature
        self.omega = omega
        self.labels = None if labels is None else torch.as_tensor(labels, dtype=torch.long)
        C = class_embeddings.shape[0]
        self.class_names = list(class_names) if class_names else [f"class_{c}" for c in range(C)]

    @classmethod
    def from_prototypes(
        cls,
        prototypes: torch.Tensor,
        embed_dim: int = 32,
        seed: int = 0,
        **kwargs,
    ) -> "MockTeacher":
        """Build a teacher whose class embeddings are projected class prototypes."""
        gen = torch.Generator().manual_seed(seed)
        prototypes = torch.as_tensor(prototypes, dtype=torch.float32)
        proj = torch.randn(prototypes.shape[1], embed_dim, generator=gen) / embed_dim**0.5
        return cls(proj, prototypes @ proj, **kwargs)

    @property
    def embed_dim(self) -> int:
        return self.class_embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def make_context(self, per_class: bool = False) -> PromptContext:
        return PromptContext(self.class_names, torch.zeros(1, self.embed_dim), per_class=per_class)

    def similarity_logits(self, x: torch.Tensor, context: PromptContext) -> torch.Tensor:
        if context.dim != self.embed_dim:
            raise ValueError(f"context dim {context.dim} != teacher embed dim {self.embed_dim}")
        img = F.normalize(x.flatten(1).float() @ self.projection, dim=1)
        txt = F.normalize(self.class_embeddings + context.per_class_offsets(), dim=1)
        return img @ txt.T / self.temperature

    def predict(self, x, context, index=None):
        probs = self.similarity_logits(x, context).softmax(1)
        if self.omega < 1 and self.labels is not None and index is not None:
            onehot = F.one_hot(self.labels[index], self.num_classes).to(probs.dtype)
            probs = self.omega * probs + (1 - self.omega) * onehot
        return probs


class ClipTeacher(Teacher):
    """Prompt-learning adapter around a CLIP-style dual encoder.

    Learned context tokens replace the template's leading word embeddings; the
    class-name tokens follow. Works with a Hugging Face ``CLIPModel`` plus a
    tokenizer callable mapping a list of strings to padded ``input_ids``.
    """

    def __init__(
        self,
        clip_model,
        tokenizer: Callable,
        class_names: Sequence[str],
        ctx_init: str = "a photo of a",
        context_length: int = 77,
    ):
        super().__init__()
        self.clip = clip_model.eval()
        for p in self.clip.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.class_names = list(class_names)
        self.ctx_init = ctx_init
        prompts = [f"{ctx_init} {name}." for name in self.class_names]
        ids = self._tokenize(prompts, context_length)
        self.register_buffer("prompt_ids", ids, persistent=False)
        self.n_ctx = len(self._tokenize([ctx_init], context_length)[0].nonzero()) - 2
        eos = self.clip.config.text_config.eos_token_id
        if eos == 2:  # legacy configs: eos is the largest id in each row
            self.eos_pos = ids.argmax(1)
        else:
            self.eos_pos = (ids == eos).int().argmax(1)

    @classmethod
    def from_pretrained(cls, path: str, class_names: Sequence[str]) -> "ClipTeacher":
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise TeacherUnavailable("transformers is not installed") from exc
        try:
            model = CLIPModel.from_pretrained(path)
            tok = CLIPTokenizer.from_pretrained(path)
        except (OSError, ValueError) as exc:
            raise TeacherUnavailable(f"no CLIP-style model at {path!r}: {exc}") from exc

        def tokenize(texts, length):
            return tok(texts, padding="max_length", max_length=length, return_tensors="pt").input_ids

        return cls(model, tokenize, class_names)

    def _tokenize(self, texts, length) -> torch.Tensor:
        try:
            return torch.as_tensor(self.tokenizer(texts, length), dtype=torch.long)
        except Exception as exc:
            raise ValueError(f"tokenization failed for {texts!r}: {exc}") from exc

    def make_context(self, per_class: bool = False) -> PromptContext:
        with torch.no_grad():
            emb = self.clip.text_model.embeddings.token_embedding(self.prompt_ids[0])
        return PromptContext(self.class_names, emb[1 : 1 + self.n_ctx], per_class=per_class)

    def text_features(self, context: PromptContext) -> torch.Tensor:
        text = self.clip.text_model
        tok = text.embeddings.token_embedding(self.prompt_ids)
        C = tok.shape[0]
        ctx = context.context if context.per_class else context.context[None].expand(C, -1, -1)
        embeds = torch.cat([tok[:, :1], ctx.to(tok.dtype), tok[:, 1 + self.n_ctx :]], 1)
        hidden = text.embeddings(inputs_embeds=embeds)
        L = hidden.shape[1]
        mask = torch.full((L, L), torch.finfo(hidden.dtype).min, dtype=hidden.dtype).triu(1)
        hidden = text.encoder(inputs_embeds=hidden, attention_mask=mask[None, None]).last_hidden_state
        hidden = text.final_layer_norm(hidden)
        pooled = hidden[torch.arange(C), self.eos_pos]
        return self.clip.text_projection(pooled)

    def predict(self, x, context, index=None):
        out = self.clip.get_image_features(pixel_values=x)
        img = out if isinstance(out, torch.Tensor) else out.pooler_output
        img = F.normalize(img, dim=1)
        txt = F.normalize(self.text_features(context), dim=1)
        return (self.clip.logit_scale.exp() * img @ txt.T).softmax(1)
