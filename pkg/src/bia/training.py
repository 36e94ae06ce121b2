"""Generator training loop, generator checkpoints and loss-trace output."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import ContainerError, read_container, state_to_arrays, write_container
from .data import AugmentPolicy, DatasetHandle, augment, iter_batches
from .generator import AttackBudget, Generator, GeneratorSpec, build_generator, project
from .models import Classifier, TrainingError
from .objectives import ObjectiveKind, ensemble_loss
from .seeding import Streams, seed_everything

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "train_generator", "save_checkpoint", "load_checkpoint",
    "seed_everything", "write_loss_csv", "TrainingError",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    moment_decays: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    objective: ObjectiveKind = field(default_factory=ObjectiveKind)
    budget: AttackBudget = field(default_factory=AttackBudget)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    grad_clip: float | None = None
    max_steps: int | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _as_members(substitutes, tap: str) -> list[tuple[Classifier, str]]:
    if isinstance(substitutes, Classifier):
        return [(substitutes, tap)]
    members = []
    for item in substitutes:
        members.append(item if isinstance(item, tuple) else (item, tap))
    return members


def train_generator(G: Generator, substitutes: Classifier | Sequence, dataset: DatasetHandle,
                    cfg: TrainConfig, metadata: dict | None = None) -> tuple[Generator, list[float]]:
    """Minimize the configured feature objective over ``dataset``.

    ``substitutes`` is one classifier (tapped at ``cfg.objective.tap``) or a
    list of classifiers / ``(classifier, tap)`` pairs for an ensemble. The
    substitutes are never updated.
    """
    members = _as_members(substitutes, cfg.objective.tap)
    streams = Streams(cfg.seed)
    batch_rng, rn_rng, aug_rng = streams.numpy("batches"), streams.numpy("rn"), streams.numpy("augment")
    frozen = []
    for model, _ in members:
        frozen.append((model, model.training, [p.requires_grad for p in model.parameters()]))
        model.eval()
        model.requires_grad_(False)

    opt = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=cfg.moment_decays)
    G.train()
    losses: list[float] = []
    step = 0
    try:
        for _ in range(cfg.epochs):
            for x, _labels in iter_batches(dataset, cfg.batch_size, batch_rng):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                x = augment(x, cfg.augment, aug_rng)
                x_adv = project(G(x), x, cfg.budget)
                loss = ensemble_loss(members, cfg.objective, x_adv, x, rn_rng)
                value = loss.item()
                if not torch.isfinite(loss):
                    where = f"; last checkpoint kept at {cfg.checkpoint_path}" if cfg.checkpoint_path else ""
                    raise TrainingError(f"non-finite loss {value} at step {step}{where}")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(G.parameters(), cfg.grad_clip)
                opt.step()
                losses.append(value)
                step += 1
                if cfg.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(G, cfg.checkpoint_path, _run_metadata(cfg, members, metadata))
                if step % 100 == 0:
                    log.info("step %d loss %.4f", step, value)
    finally:
        for model, training, flags in frozen:
            model.train(training)
            for p, flag in zip(model.parameters(), flags):
                p.requires_grad_(flag)
    G.eval()
    if cfg.checkpoint_path:
        save_checkpoint(G, cfg.checkpoint_path, _run_metadata(cfg, members, metadata))
    return G, losses


def _run_metadata(cfg: TrainConfig, members, extra: dict | None) -> dict:
    meta = {
        "objective": cfg.objective.variant.value,
        "source_arch": "+".join(m.arch_id for m, _ in members),
        "tap": "+".join(t for _, t in members),
        "seed": cfg.seed,
        "epsilon_8bit": cfg.budget.epsilon_8bit,
    }
    meta.update(extra or {})
    return meta


def save_checkpoint(G: Generator, path: str | Path, metadata: dict) -> None:
    meta = {"kind": "generator", **G.spec.as_metadata(), **metadata}
    write_container(path, state_to_arrays(G.state_dict()), meta)


def load_checkpoint(path: str | Path, spec: GeneratorSpec | None = None) -> tuple[Generator, dict[str, str]]:
    """Rebuild the generator stored at ``path``.

    If ``spec`` is given it must match the stored ``spec.*`` metadata.
    """
    arrays, meta = read_container(path)
    if meta.get("kind") != "generator":
        raise ContainerError(f"{path} is not a generator checkpoint")
    try:
        stored = GeneratorSpec(**{k[5:]: int(v) for k, v in meta.items() if k.startswith("spec.")})
    except TypeError as exc:
        raise ContainerError(f"bad generator spec metadata: {exc}") from exc
    if spec is not None and spec != stored:
        diffs = [f"{k}: stored {getattr(stored, k)} != expected {getattr(spec, k)}"
                 for k in ("down_blocks", "residual_blocks", "up_blocks", "base_channels")
                 if getattr(stored, k) != getattr(spec, k)]
        raise ContainerError("generator spec mismatch: " + "; ".join(diffs))
    G = build_generator(stored)
    G.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return G.eval(), meta


def write_loss_csv(losses: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
