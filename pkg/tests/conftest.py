import hypothesis
import numpy as np
import pytest

from linewise.geometry import LineSegment2D, gt_correspondences, project_line
from linewise.model import DescriptorMap
from linewise.tensor import Tensor, backward, numeric_grad
from linewise.training import TrainingPair

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.load_profile("default")


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def gradcheck(build, inputs: list[Tensor], h: float = 1e-4) -> float:
    """Relative error between autodiff and central differences.

    ``build`` maps the input tensors to a scalar Tensor. The error is taken
    jointly over all inputs, scaled by the largest gradient entry, so that
    analytically-zero gradients (e.g. softmax-invariant key biases) do not
    turn rounding noise into a failure.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(build(*inputs))
    analytic, numeric = [], []
    for t in inputs:
        analytic.append(t.grad.reshape(-1).copy())
        numeric.append(numeric_grad(lambda: float(build(*inputs).data), t.data, h).reshape(-1))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_pair(dim: int = 8, seed: int = 0) -> TrainingPair:
    """Three 3-token lines per view under a small translation."""
    rng = np.random.default_rng(seed)
    lines1 = [
        LineSegment2D(40, 40, 60, 40, 0),
        LineSegment2D(150, 60, 150, 80, 1),
        LineSegment2D(220, 150, 234, 164, 2),
    ]
    H = np.array([[1, 0, 6.0], [0, 1, -4.0], [0, 0, 1]])
    lines2 = [project_line(H, l) for l in lines1]
    grids = rng.normal(size=(2, 30, 40, dim))
    grids /= np.linalg.norm(grids, axis=-1, keepdims=True)
    return TrainingPair(
        lines1, lines2, DescriptorMap(grids[0], 8), DescriptorMap(grids[1], 8), H, gt_correspondences(lines1, lines2, H)
    )


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
