"""Iterative competitor attacks and the noise / smoothing controls.

All attacks work on [0,1] pixels and project every iterate into the epsilon
ball and the valid range. ``model`` is anything mapping (N,3,H,W) to logits;
feature attacks need a :class:`~bia.models.Classifier` and a tap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .generator import AttackBudget, project

DIM_SCALE_RANGE = (0.875, 1.0)


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class IterConfig:
    epsilon: AttackBudget = field(default_factory=AttackBudget)
    step_8bit: float = 4.0
    iterations: int = 100
    momentum_decay: float = 1.0
    transform_prob: float = 0.7
    random_start: bool = True

    def __post_init__(self):
        if self.step_8bit <= 0:
            raise ValueError("step must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.transform_prob <= 1.0:
            raise ValueError("transform_prob must be in [0,1]")

    @property
    def eps(self) -> float:
        return self.epsilon.epsilon

    @property
    def step(self) -> float:
        return self.step_8bit / 255.0


def _grad(loss_fn, x_adv: torch.Tensor) -> torch.Tensor:
    x_adv = x_adv.detach().requires_grad_(True)
    loss = loss_fn(x_adv)
    (g,) = torch.autograd.grad(loss, x_adv)
    if not torch.isfinite(g).all():
        raise AttackError("non-finite gradient")
    return g


def _start(x: torch.Tensor, cfg: IterConfig, generator: torch.Generator | None) -> torch.Tensor:
    if not cfg.random_start or cfg.eps == 0:
        return x.clone()
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
    return project(x + cfg.eps * noise, x, cfg.eps)


def pgd_attack(model, x: torch.Tensor, labels: torch.Tensor, cfg: IterConfig,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Signed-gradient ascent on cross-entropy from a random start in the ball."""
    x = x.detach()
    x_adv = _start(x, cfg, generator)
    for _ in range(cfg.iterations):
        g = _grad(lambda z: F.cross_entropy(model(z), labels), x_adv)
        x_adv = project(x_adv + cfg.step * g.sign(), x, cfg.eps)
    return x_adv.detach()


def diverse_input(x: torch.Tensor, rng: np.random.Generator, prob: float) -> torch.Tensor:
    """With probability ``prob``: shrink to a random side in [0.875, 1] and zero-pad back at a random offset."""
    if rng.random() >= prob:
        return x
    h, w = x.shape[2:]
    side = int(rng.integers(math.floor(DIM_SCALE_RANGE[0] * h), h + 1))
    side_w = max(1, round(side * w / h))
    small = F.interpolate(x, size=(side, side_w), mode="nearest")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side_w + 1))
    return F.pad(small, (left, w - side_w - left, top, h - side - top))


def _l1_normalize(g: torch.Tensor) -> torch.Tensor:
    norm = g.abs().flatten(1).sum(1).view(-1, *([1] * (g.dim() - 1)))
    return g / norm.clamp_min(torch.finfo(g.dtype).tiny)


def dim_attack(model, x: torch.Tensor, labels: torch.Tensor, cfg: IterConfig,
               rng: np.random.Generator | None = None) -> torch.Tensor:
    """Momentum iterative FGSM on randomly resized-and-padded inputs (zero start)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = x.detach()
    x_adv = x.clone()
    momentum = torch.zeros_like(x)
    for _ in range(cfg.iterations):
        g = _grad(lambda z: F.cross_entropy(model(diverse_input(z, rng, cfg.transform_prob)), labels), x_adv)
        momentum = cfg.momentum_decay * momentum + _l1_normalize(g)
        x_adv = project(x_adv + cfg.step * momentum.sign(), x, cfg.eps)
    return x_adv.detach()


def feature_std(model, tap: str, x: torch.Tensor) -> torch.Tensor:
    """Per-sample standard deviation of the tapped activation, averaged over the batch."""
    f = model.features(x, tap).flatten(1)
    return f.std(dim=1).mean()


def dr_attack(model, tap: str, x: torch.Tensor, cfg: IterConfig, history: list | None = None) -> torch.Tensor:
    """Dispersion reduction: signed descent on the std of the tapped features."""
    x = x.detach()
    x_adv = x.clone()
    for _ in range(cfg.iterations):
        g = _grad(lambda z: feature_std(model, tap, z), x_adv)
        x_adv = project(x_adv - cfg.step * g.sign(), x, cfg.eps)
        if history is not None:
            with torch.no_grad():
                history.append(float(feature_std(model, tap, x_adv)))
    return x_adv.detach()


def feature_distance(model, tap: str, x_adv: torch.Tensor, f_clean: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the Euclidean distance between tapped features."""
    d = (model.features(x_adv, tap) - f_clean).flatten(1)
    return d.norm(dim=1).mean()


def ssp_attack(model, tap: str, x: torch.Tensor, cfg: IterConfig, generator: torch.Generator | None = None,
               history: list | None = None) -> torch.Tensor:
    """Feature-distance maximization.

    The distance has no usable gradient at ``x_adv == x``, so the default
    starts from a random point in the ball like PGD.
    """
    x = x.detach()
    with torch.no_grad():
        f_clean = model.features(x, tap)
    x_adv = _start(x, cfg, generator)
    for _ in range(cfg.iterations):
        g = _grad(lambda z: feature_distance(model, tap, z, f_clean), x_adv)
        x_adv = project(x_adv + cfg.step * g.sign(), x, cfg.eps)
        if history is not None:
            with torch.no_grad():
                history.append(float(feature_distance(model, tap, x_adv, f_clean)))
    return x_adv.detach()


def gaussian_noise_control(x: torch.Tensor, budget: AttackBudget, rng: np.random.Generator,
                           std: float | None = None) -> torch.Tensor:
    """``x`` plus Gaussian noise (default std = epsilon), clipped to the ball and range."""
    eps = budget.epsilon
    std = eps if std is None else std
    noise = torch.from_numpy(rng.normal(0.0, 1.0, tuple(x.shape))).to(x.dtype) * std
    return project(x + noise.clamp(-eps, eps), x, eps)


GAUSS_KERNEL_1D = (1.0, 2.0, 1.0)


def gaussian_kernel(dtype=torch.float32) -> torch.Tensor:
    k = torch.tensor(GAUSS_KERNEL_1D, dtype=dtype)
    return torch.outer(k, k) / 16.0


def gaussian_smooth(x: torch.Tensor) -> torch.Tensor:
    """Depthwise 3x3 binomial blur with reflect padding."""
    c = x.shape[1]
    weight = gaussian_kernel(x.dtype).to(x.device).expand(c, 1, 3, 3).contiguous()
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), weight, groups=c)
