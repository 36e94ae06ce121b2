"""Feature-disruption losses: plain cosine, random normalization, attention, and ensembles.

All losses are the batch-mean of a per-sample cosine similarity and are
*minimized* by the generator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .data import NormStats
from .models import Classifier

MAX_SIGMA_REDRAWS = 100
SIGMA_FLOOR = 0.05


class ObjectiveError(ValueError):
    pass


class Variant(str, enum.Enum):
    BIA = "bia"
    BIA_RN = "bia_rn"
    BIA_DA = "bia_da"
    BIA_RN_DA = "bia_rn_da"

    @property
    def uses_rn(self) -> bool:
        return self in (Variant.BIA_RN, Variant.BIA_RN_DA)

    @property
    def uses_da(self) -> bool:
        return self in (Variant.BIA_DA, Variant.BIA_RN_DA)


@dataclass(frozen=True)
class RNParams:
    mu_mean: float = 0.50
    mu_std: float = 0.08
    sigma_mean: float = 0.75
    sigma_std: float = 0.08
    per_image: bool = False
    sample: tuple | None = field(default=None, compare=False)

    def draw(self, rng: np.random.Generator, n: int = 1) -> "RNParams":
        """Return a copy holding one ``(mu', sigma')`` draw (``n`` draws if per_image)."""
        count = n if self.per_image else 1
        mus = rng.normal(self.mu_mean, self.mu_std, count)
        sigmas = rng.normal(self.sigma_mean, self.sigma_std, count)
        for i in range(count):
            tries = 0
            while sigmas[i] <= SIGMA_FLOOR:
                tries += 1
                if tries > MAX_SIGMA_REDRAWS:
                    raise ObjectiveError(f"sigma' stayed <= {SIGMA_FLOOR} after {MAX_SIGMA_REDRAWS} redraws")
                sigmas[i] = rng.normal(self.sigma_mean, self.sigma_std)
        if self.per_image:
            return replace(self, sample=(mus, sigmas))
        return replace(self, sample=(float(mus[0]), float(sigmas[0])))


@dataclass(frozen=True)
class ObjectiveKind:
    variant: Variant = Variant.BIA
    tap: str = "stage2"
    rn: RNParams | None = None
    # DA weights from RN-applied clean features when both modules are on.
    attention_after_rn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant.uses_rn and self.rn is None:
            object.__setattr__(self, "rn", RNParams())
        if not self.variant.uses_rn and self.rn is not None:
            raise ObjectiveError(f"{self.variant.value} does not take RN parameters")

    @classmethod
    def parse(cls, name: str, tap: str = "stage2", rn: RNParams | None = None, **kw) -> "ObjectiveKind":
        variant = Variant(name)
        return cls(variant, tap, rn if variant.uses_rn else None, **kw)


def cosine_feature_loss(f_adv: torch.Tensor, f_clean: torch.Tensor) -> torch.Tensor:
    if f_adv.shape != f_clean.shape:
        raise ObjectiveError(f"feature shapes differ: {tuple(f_adv.shape)} vs {tuple(f_clean.shape)}")
    a = f_adv.flatten(1)
    b = f_clean.flatten(1)
    aa = (a * a).sum(1)
    bb = (b * b).sum(1)
    if bool((bb == 0).any()):
        raise ObjectiveError("degenerate feature: clean feature is all zero for some sample")
    # sqrt(aa * bb) rather than |a||b|: gives exactly +-1 for a = +-b.
    denom = torch.sqrt(aa * bb).clamp_min(torch.finfo(a.dtype).tiny)
    cos = (a * b).sum(1) / denom
    return cos.clamp(-1.0, 1.0).mean()


def random_normalize(x: torch.Tensor, stats: NormStats, rn: RNParams,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """``std_c * (x - mu') / sigma' + mean_c`` per channel.

    Uses ``rn.sample`` when present, otherwise draws once from ``rng``.
    """
    if rn.sample is None:
        if rng is None:
            raise ObjectiveError("random_normalize needs rn.sample or an rng")
        rn = rn.draw(rng, x.shape[0])
    mu, sigma = rn.sample
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    # affine form x * k + b; k == 1 and b == 0 exactly when (mu', sigma') equal the stats
    k = np.asarray(stats.std) / sigma
    b = np.asarray(stats.mean) - mu * k
    k = torch.as_tensor(k, dtype=x.dtype, device=x.device).view(-1, 3, 1, 1)
    b = torch.as_tensor(b, dtype=x.dtype, device=x.device).view(-1, 3, 1, 1)
    return x * k + b


def attention_map(f_clean: torch.Tensor) -> torch.Tensor:
    """Cross-channel pooled ``|sum_c f_c| / C``, detached from the graph."""
    f = f_clean.detach()
    return f.sum(dim=1, keepdim=True).abs() / f.shape[1]


def attended_loss(f_adv: torch.Tensor, f_clean: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    flat = A.reshape(A.shape[0], -1)
    if bool((flat.abs().sum(1) == 0).any()):
        raise ObjectiveError("attention collapsed: all-zero attention map for some sample")
    return cosine_feature_loss(A * f_adv, A * f_clean)


def combined_loss(x_adv: torch.Tensor, x_clean: torch.Tensor, model: Classifier, tap: str,
                  stats: NormStats | None, rn: RNParams, rng: np.random.Generator | None = None,
                  attention_after_rn: bool = True) -> torch.Tensor:
    """RN on both inputs with one shared draw, attention from the clean features."""
    stats = stats or model.preprocess
    if rn.sample is None:
        rn = rn.draw(rng, x_clean.shape[0])
    f_adv = model.features(random_normalize(x_adv, stats, rn), tap)
    with torch.no_grad():
        f_clean = model.features(random_normalize(x_clean, stats, rn), tap)
        A = attention_map(f_clean if attention_after_rn else model.features(x_clean, tap))
    return attended_loss(f_adv, f_clean, A)


def objective_loss(kind: ObjectiveKind, model: Classifier, x_adv: torch.Tensor, x_clean: torch.Tensor,
                   rng: np.random.Generator | None = None, stats: NormStats | None = None) -> torch.Tensor:
    """Evaluate one objective variant against one substitute.

    ``kind.rn.sample`` (if set) fixes the RN draw; otherwise one draw is
    taken from ``rng`` and shared by the clean and adversarial passes.
    """
    v = kind.variant
    if v is Variant.BIA_RN_DA:
        return combined_loss(x_adv, x_clean, model, kind.tap, stats, kind.rn, rng, kind.attention_after_rn)
    if v.uses_rn:
        rn = kind.rn if kind.rn.sample is not None else kind.rn.draw(rng, x_clean.shape[0])
        stats = stats or model.preprocess
        x_adv = random_normalize(x_adv, stats, rn)
        x_clean = random_normalize(x_clean, stats, rn)
    f_adv = model.features(x_adv, kind.tap)
    with torch.no_grad():
        f_clean = model.features(x_clean, kind.tap)
    if v.uses_da:
        return attended_loss(f_adv, f_clean, attention_map(f_clean))
    return cosine_feature_loss(f_adv, f_clean)


def ensemble_loss(models: Sequence[tuple[Classifier, str]], objective: ObjectiveKind, x_adv: torch.Tensor,
                  x_clean: torch.Tensor, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Unweighted mean of the per-model objective; one RN draw shared by all members."""
    if not models:
        raise ObjectiveError("ensemble needs at least one model")
    if objective.variant.uses_rn and objective.rn.sample is None:
        objective = replace(objective, rn=objective.rn.draw(rng, x_clean.shape[0]))
    losses = [objective_loss(replace(objective, tap=tap), m, x_adv, x_clean) for m, tap in models]
    return torch.stack(losses).mean()
