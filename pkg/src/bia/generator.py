"""Fully convolutional perturbation generator and the l_inf projection."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import derive_seed, torch_seeded


@dataclass(frozen=True)
class GeneratorSpec:
    down_blocks: int = 2
    residual_blocks: int = 6
    up_blocks: int = 2
    base_channels: int = 16

    def __post_init__(self):
        if self.down_blocks < 1 or self.down_blocks != self.up_blocks:
            raise ValueError("down_blocks must be >= 1 and equal up_blocks")
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @property
    def stride_product(self) -> int:
        return 2 ** self.down_blocks

    def as_metadata(self) -> dict[str, int]:
        return {f"spec.{k}": getattr(self, k) for k in
                ("down_blocks", "residual_blocks", "up_blocks", "base_channels")}


@dataclass(frozen=True)
class AttackBudget:
    epsilon_8bit: float = 10

    def __post_init__(self):
        if not 0 <= self.epsilon_8bit <= 255:
            raise ValueError(f"epsilon_8bit must lie in [0,255], got {self.epsilon_8bit}")

    @property
    def epsilon(self) -> float:
        return self.epsilon_8bit / 255.0


def _norm(c: int) -> nn.Module:
    return nn.InstanceNorm2d(c, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect", bias=False), _norm(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1, padding_mode="reflect", bias=False), _norm(c),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Downsampling, residual and upsampling blocks, then a bounded output map.

    The output activation is ``(tanh(z) + 1) / 2`` so raw candidates are
    always valid images; the epsilon ball is enforced by :func:`project`.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ngf = spec.base_channels
        down: list[nn.Module] = [nn.ReflectionPad2d(3), nn.Conv2d(3, ngf, 7, bias=False), _norm(ngf), nn.ReLU(inplace=True)]
        c = ngf
        for _ in range(spec.down_blocks):
            down += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, padding_mode="reflect", bias=False),
                     _norm(2 * c), nn.ReLU(inplace=True)]
            c *= 2
        self.down = nn.Sequential(*down)
        self.residual = nn.ModuleList(ResidualBlock(c) for _ in range(spec.residual_blocks))
        up: list[nn.Module] = []
        for _ in range(spec.up_blocks):
            up += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1, bias=False),
                   _norm(c // 2), nn.ReLU(inplace=True)]
            c //= 2
        self.up = nn.Sequential(*up)
        self.final = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7))

    @property
    def block_ids(self) -> list[str]:
        return ["down", *(f"residual_{k + 1}" for k in range(len(self.residual))), "up"]

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) input, got {tuple(x.shape)}")
        s = self.spec.stride_product
        if x.shape[2] % s or x.shape[3] % s:
            raise ValueError(f"resolution not divisible by stride product {s}: {tuple(x.shape[2:])}")

    def blocks(self, x: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        self._check(x)
        out = OrderedDict()
        h = out["down"] = self.down(x)
        for k, block in enumerate(self.residual):
            h = out[f"residual_{k + 1}"] = block(h)
        out["up"] = self.up(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        h = self.down(x)
        for block in self.residual:
            h = block(h)
        return (torch.tanh(self.final(self.up(h))) + 1) / 2


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> Generator:
    with torch_seeded(derive_seed(seed, "generator-init")):
        return Generator(spec)


def _pad_amounts(size: int, stride: int) -> tuple[int, int]:
    extra = (-size) % stride
    return extra // 2, extra - extra // 2


def generate(G: Generator, x: torch.Tensor, pad: bool = False) -> torch.Tensor:
    """Raw candidate ``G(x)``.

    With ``pad=True`` inputs whose size is not a multiple of the stride
    product are reflect-padded up to one, processed, and center-cropped back.
    """
    if not pad:
        return G(x)
    s = G.spec.stride_product
    top, bottom = _pad_amounts(x.shape[2], s)
    left, right = _pad_amounts(x.shape[3], s)
    if top == bottom == left == right == 0:
        return G(x)
    padded = F.pad(x, (left, right, top, bottom), mode="reflect")
    out = G(padded)
    return out[:, :, top:top + x.shape[2], left:left + x.shape[3]]


def project(candidate: torch.Tensor, x: torch.Tensor, budget: AttackBudget | float) -> torch.Tensor:
    """Clamp ``candidate`` into the epsilon ball around ``x``, then into [0,1]."""
    if candidate.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(candidate.shape)} vs {tuple(x.shape)}")
    eps = budget.epsilon if isinstance(budget, AttackBudget) else float(budget)
    return torch.min(torch.max(candidate, x - eps), x + eps).clamp(0.0, 1.0)


def tap_generator_block(G: Generator, block_id: str, x: torch.Tensor) -> torch.Tensor:
    if block_id not in G.block_ids:
        raise KeyError(f"unknown generator block {block_id!r}; available: {G.block_ids}")
    return G.blocks(x)[block_id]


def channel_pool(h: torch.Tensor) -> torch.Tensor:
    """``|sum over channels| / C`` as a (N,1,H,W) map."""
    return h.sum(dim=1, keepdim=True).abs() / h.shape[1]
