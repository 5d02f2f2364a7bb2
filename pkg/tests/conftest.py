import numpy as np
import pytest
import torch

from gapadapt.datasets import SyntheticShiftSpec, generate_synthetic_pair
from gapadapt.engine import AdaptationConfig, TargetData
from gapadapt.models import MockTeacher, TargetModel, pretrain_source


def random_simplex(rng: np.random.Generator, b: int, c: int, sharp: float = 1.0) -> torch.Tensor:
    """Rows drawn from a Dirichlet; small ``sharp`` gives peaked rows."""
    return torch.tensor(rng.dirichlet(np.full(c, sharp), size=b))


def finite_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(f, x: torch.Tensor) -> float:
    x = x.clone().double().requires_grad_(True)
    f(x).backward()
    analytic = x.grad.detach()
    numeric = finite_difference(f, x.detach().clone())
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_problem():
    """A 4-class shifted pair small enough for multi-epoch tests in about a second."""
    spec = SyntheticShiftSpec(samples_per_class=60, seed=3)
    source, target = generate_synthetic_pair(spec)
    torch.manual_seed(3)
    model = TargetModel(2, 4, hidden=32, bottleneck_dim=16)
    pretrain_source(model, source.features, source.labels, epochs=10, seed=3)
    return spec, source, target, model


@pytest.fixture
def small_teacher(small_problem):
    spec, _, target, _ = small_problem
    return MockTeacher.from_prototypes(
        torch.tensor(spec.class_means()), seed=3, omega=0.6, labels=target.labels
    )


@pytest.fixture
def small_config():
    return AdaptationConfig(epochs=2, batch_size=32, seed=5)


@pytest.fixture
def small_data(small_problem):
    return TargetData(small_problem[2])
