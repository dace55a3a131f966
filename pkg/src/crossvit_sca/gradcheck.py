"""Central finite-difference check of every parameter gradient of a model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import CrossViT
from .rng import make_rng
from .train import cross_entropy


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple[str, str]
    checked: int
    seconds: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol


def model_loss(model: CrossViT, images, labels) -> T.Tensor:
    """Inference-mode cross-entropy; deterministic, so finite differences are meaningful."""
    return cross_entropy(model.forward(images, training=False), labels)


def gradcheck_model(
    model: CrossViT,
    images: np.ndarray,
    labels,
    *,
    coords_per_tensor: int | None = 48,
    step: float = 1e-5,
    floor: float = 1e-7,
    seed: int = 0,
) -> GradcheckReport:
    """Compare backward() against central differences for every parameter tensor.

    Each tensor is checked on ``coords_per_tensor`` sampled coordinates (all of them
    when the tensor is that small or the argument is None; the coordinate with
    the largest analytic gradient is always included) and along one random
    unit direction spanning the whole tensor.
    """
    t0 = time.perf_counter()
    rng = make_rng(seed, 7)
    model.zero_grad()
    T.backward(model_loss(model, images, labels))
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in model.params.items()}

    def loss_at() -> float:
        with T.no_grad():
            return float(model_loss(model, images, labels).data)

    worst, worst_at, checked = 0.0, ("", ""), 0
    per_tensor = {}
    for name, p in model.params.items():
        g = grads[name].reshape(-1)
        flat = p.data.reshape(-1)
        if coords_per_tensor is None or flat.size <= coords_per_tensor:
            coords = np.arange(flat.size)
        else:
            pick = rng.choice(flat.size, size=coords_per_tensor - 1, replace=False)
            coords = np.unique(np.r_[pick, np.argmax(np.abs(g))])
        tensor_worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = loss_at()
            flat[c] = orig - step
            down = loss_at()
            flat[c] = orig
            err = relative_error(g[c], (up - down) / (2 * step), floor)
            checked += 1
            if err > tensor_worst:
                tensor_worst = err
            if err > worst:
                worst, worst_at = err, (name, str(tuple(int(i) for i in np.unravel_index(c, p.shape))))
        direction = rng.standard_normal(flat.size)
        direction /= np.linalg.norm(direction)
        orig = flat.copy()
        flat[:] = orig + step * direction
        up = loss_at()
        flat[:] = orig - step * direction
        down = loss_at()
        flat[:] = orig
        err = relative_error(float(g @ direction), (up - down) / (2 * step), floor)
        checked += 1
        tensor_worst = max(tensor_worst, err)
        if err > worst:
            worst, worst_at = err, (name, "random direction")
        per_tensor[name] = tensor_worst
    model.zero_grad()
    return GradcheckReport(worst, worst_at, checked, time.perf_counter() - t0, per_tensor)
