"""Target/source data: image-list files and a synthetic domain-shift generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch.utils.data import Dataset

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetFormatError(ValueError):
    pass


class ImageListDataset(Dataset):
    """Samples listed as ``relative/path label`` lines; index = line order.

    ``__getitem__`` returns ``(image, label, index)``.
    """

    def __init__(self, root, entries, transform=None):
        self.root = Path(root)
        self.entries = list(entries)
        self.transform = transform

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> torch.Tensor:
        return torch.tensor([lab for _, lab in self.entries], dtype=torch.long)

    def missing_paths(self) -> list[str]:
        return [p for p, _ in self.entries if not (self.root / p).exists()]

    def __getitem__(self, i):
        from PIL import Image

        path, label = self.entries[i]
        with Image.open(self.root / path) as im:
            img = im.convert("RGB")
        if self.transform is not None:
            img = self.transform(img)
        return img, label, i


def load_image_list(list_file, root, transform=None, num_classes: Optional[int] = None) -> ImageListDataset:
    list_file = Path(list_file)
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image root {root} is not a readable directory")
    entries = []
    with open(list_file) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise DatasetFormatError(f"{list_file}:{lineno}: expected 'path label'")
            try:
                label = int(parts[1])
            except ValueError:
                raise DatasetFormatError(f"{list_file}:{lineno}: label {parts[1]!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetFormatError(f"{list_file}:{lineno}: label {label} out of range")
            entries.append((parts[0], label))
    return ImageListDataset(root, entries, transform)


def image_transforms(train: bool, resize: int = 256, crop: int = 224):
    from torchvision import transforms as T

    norm = T.Normalize(IMAGENET_MEAN, IMAGENET_STD)
    if train:
        return T.Compose([T.Resize((resize, resize)), T.RandomCrop(crop), T.RandomHorizontalFlip(), T.ToTensor(), norm])
    return T.Compose([T.Resize((resize, resize)), T.CenterCrop(crop), T.ToTensor(), norm])


class ArrayDataset(Dataset):
    """In-memory features and labels; ``__getitem__`` returns ``(x, label, index)``."""

    def __init__(self, features: torch.Tensor, labels: torch.Tensor):
        if len(features) != len(labels):
            raise ValueError("features and labels differ in length")
        self.features = torch.as_tensor(features, dtype=torch.float32)
        self.labels = torch.as_tensor(labels, dtype=torch.long)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.features[i], int(self.labels[i]), i

    def to_csv(self, features_path, labels_path) -> None:
        np.savetxt(features_path, self.features.numpy(), delimiter=",", fmt="%.8g")
        with open(labels_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label"])
            w.writerows(enumerate(self.labels.tolist()))

    @classmethod
    def from_csv(cls, features_path, labels_path) -> "ArrayDataset":
        feats = np.loadtxt(features_path, delimiter=",", ndmin=2)
        with open(labels_path) as fh:
            rows = list(csv.DictReader(fh))
        return cls(torch.tensor(feats), torch.tensor([int(r["label"]) for r in rows]))


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """Gaussian class clusters; the target domain is a rotated/translated/scaled copy.

    Class means sit evenly on a circle of ``radius`` in the first two
    coordinates (further coordinates carry isotropic noise only).
    """

    num_classes: int = 4
    samples_per_class: int = 500
    dim: int = 2
    radius: float = 3.0
    cluster_std: float = 1.0
    rotation_deg: float = 35.0
    translation: float = 0.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.dim <= 16:
            raise ValueError("synthetic dim must lie in [2, 16]")
        if self.cluster_std <= 0 or self.scale <= 0:
            raise ValueError("degenerate covariance: cluster_std and scale must be positive")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ValueError("need at least two classes and one sample per class")

    def class_means(self) -> np.ndarray:
        ang = 2 * math.pi * np.arange(self.num_classes) / self.num_classes
        means = np.zeros((self.num_classes, self.dim))
        means[:, 0] = self.radius * np.cos(ang)
        means[:, 1] = self.radius * np.sin(ang)
        return means

    def shift(self, x: np.ndarray) -> np.ndarray:
        t = math.radians(self.rotation_deg)
        rot = np.eye(self.dim)
        rot[:2, :2] = [[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]
        return self.scale * x @ rot.T + self.translation


def _draw(spec: SyntheticShiftSpec, rng: np.random.Generator):
    means = spec.class_means()
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    x = means[labels] + spec.cluster_std * rng.standard_normal((len(labels), spec.dim))
    order = rng.permutation(len(labels))
    return x[order], labels[order]


def generate_synthetic_pair(spec: SyntheticShiftSpec) -> tuple[ArrayDataset, ArrayDataset]:
    rng = np.random.default_rng(spec.seed)
    xs, ys = _draw(spec, rng)
    xt, yt = _draw(spec, rng)
    xt = spec.shift(xt)
    return (
        ArrayDataset(torch.tensor(xs, dtype=torch.float32), torch.tensor(ys)),
        ArrayDataset(torch.tensor(xt, dtype=torch.float32), torch.tensor(yt)),
    )


def split(ds: ArrayDataset, frac: float, seed: int = 0) -> tuple[ArrayDataset, ArrayDataset]:
    perm = torch.randperm(len(ds), generator=torch.Generator().manual_seed(seed))
    cut = int(len(ds) * frac)
    a, b = perm[:cut], perm[cut:]
    return ArrayDataset(ds.features[a], ds.labels[a]), ArrayDataset(ds.features[b], ds.labels[b])
