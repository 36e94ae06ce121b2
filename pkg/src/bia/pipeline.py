"""Glue between a :class:`RunConfig` and the library: datasets, models, generators, reports."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .baselines import IterConfig
from .config import RunConfig
from .data import HALF_STATS, IMAGENET_STATS, AugmentPolicy, DatasetHandle, DatasetSpec, load_dataset
from .evalsuite import (Attack, EvalReport, GeneratorAttack, IdentityAttack, IterativeAttack, NoiseAttack,
                        evaluate_attack, multi_seed)
from .generator import AttackBudget, Generator, GeneratorSpec, build_generator
from .models import Classifier, build_classifier, load_classifier, train_classifier
from .objectives import ObjectiveKind, RNParams, Variant
from .training import TrainConfig, load_checkpoint, train_generator

log = logging.getLogger(__name__)

STATS = {"imagenet": IMAGENET_STATS, "half": HALF_STATS}
GENERATOR_ATTACKS = {v.value for v in Variant}
ITERATIVE_ATTACKS = {"pgd", "dim", "dr", "ssp"}


@dataclass
class Setup:
    source_train: DatasetHandle
    source_test: DatasetHandle
    target_train: DatasetHandle
    target_test: DatasetHandle
    substitutes: list[Classifier]
    target: Classifier
    accuracies: dict[str, float]

    @property
    def substitute(self) -> Classifier:
        return self.substitutes[0]

    @property
    def eval_targets(self) -> list[tuple[Classifier, DatasetHandle]]:
        """White-box substitute on the source test split, then the black-box target."""
        return [(self.substitute, self.source_test), (self.target, self.target_test)]


def _dataset(kind: str, root: str, split: str, size: int, seed: int, res: int) -> DatasetHandle:
    if kind == "folder":
        return load_dataset(DatasetSpec("folder", split, root=str(Path(root) / split), resolution=(res, res)))
    return load_dataset(DatasetSpec(kind, split, size=size, seed=seed, resolution=(res, res)))


def load_domains(cfg: RunConfig) -> tuple[DatasetHandle, ...]:
    d = cfg.data
    return (
        _dataset(d.source, d.source_root, "train", d.source_train_size, d.seed, d.resolution),
        _dataset(d.source, d.source_root, "test", d.source_test_size, d.seed, d.resolution),
        _dataset(d.target, d.target_root, "train", d.target_train_size, d.seed + 1, d.resolution),
        _dataset(d.target, d.target_root, "test", d.target_test_size, d.seed + 1, d.resolution),
    )


def train_substitute(cfg: RunConfig, arch: str, train: DatasetHandle, test: DatasetHandle
                     ) -> tuple[Classifier, float]:
    m = cfg.model
    res = (cfg.data.resolution, cfg.data.resolution)
    model = build_classifier(arch, train.class_count, res, IMAGENET_STATS, m.seed, m.width)
    return train_classifier(model, train, test, m.epochs, m.lr, m.seed, m.batch_size)


def prepare(cfg: RunConfig) -> Setup:
    """Load both domains and train (or load) the substitute(s) and the target classifier."""
    src_tr, src_te, tgt_tr, tgt_te = load_domains(cfg)
    m = cfg.model
    res = (cfg.data.resolution, cfg.data.resolution)
    acc = {}
    substitutes = []
    for k, arch in enumerate(m.substitute):
        if k == 0 and m.substitute_checkpoint:
            model = load_classifier(m.substitute_checkpoint)
        else:
            model, acc[f"substitute:{arch}"] = train_substitute(cfg, arch, src_tr, src_te)
        substitutes.append(model)
    if m.target_checkpoint:
        target = load_classifier(m.target_checkpoint)
    else:
        target = build_classifier(m.target, tgt_tr.class_count, res, STATS[m.target_stats], m.seed, m.width)
        target, acc[f"target:{m.target}"] = train_classifier(target, tgt_tr, tgt_te, m.epochs, m.lr, m.seed,
                                                             m.batch_size)
    for name, value in acc.items():
        log.info("%s clean test accuracy %.4f", name, value)
    return Setup(src_tr, src_te, tgt_tr, tgt_te, substitutes, target, acc)


def generator_spec(cfg: RunConfig) -> GeneratorSpec:
    g = cfg.generator
    return GeneratorSpec(g.down_blocks, g.residual_blocks, g.up_blocks, g.base_channels)


def objective_kind(cfg: RunConfig, variant: str | None = None) -> ObjectiveKind:
    o = cfg.objective
    rn = RNParams(o.mu_mean, o.mu_std, o.sigma_mean, o.sigma_std, o.per_image)
    return ObjectiveKind.parse(variant or o.variant, o.tap, rn, attention_after_rn=o.attention_after_rn)


def train_config(cfg: RunConfig, seed: int | None = None, variant: str | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lr=t.lr, moment_decays=(t.beta1, t.beta2), batch_size=t.batch_size, epochs=t.epochs,
        seed=t.seed if seed is None else seed, objective=objective_kind(cfg, variant),
        budget=AttackBudget(t.epsilon), augment=AugmentPolicy(enabled=t.augment),
        grad_clip=t.grad_clip or None, max_steps=t.max_steps or None,
    )


def train_run(cfg: RunConfig, setup: Setup, variant: str | None = None, seed: int | None = None,
              substitutes: list[Classifier] | None = None, checkpoint_path: str | None = None
              ) -> tuple[Generator, list[float]]:
    tcfg = train_config(cfg, seed, variant)
    if checkpoint_path:
        tcfg = replace(tcfg, checkpoint_path=str(checkpoint_path))
    G = build_generator(generator_spec(cfg), tcfg.seed)
    subs = substitutes if substitutes is not None else setup.substitutes
    return train_generator(G, subs if len(subs) > 1 else subs[0], setup.source_train, tcfg)


def iter_config(cfg: RunConfig) -> IterConfig:
    e = cfg.eval
    return IterConfig(AttackBudget(cfg.train.epsilon), e.step, e.iterations, e.momentum, e.transform_prob)


def make_attack(name: str, cfg: RunConfig, setup: Setup, seed: int) -> Attack:
    """Resolve an attack name: ``identity``, ``noise``, ``pgd|dim|dr|ssp``, ``checkpoint``,
    or a generator variant (``bia``, ``bia_rn``, ``bia_da``, ``bia_rn_da``); ``+gs`` adds smoothing."""
    base, _, suffix = name.partition("+")
    smooth = suffix == "gs"
    if suffix and not smooth:
        raise ValueError(f"unknown attack suffix in {name!r}")
    budget = AttackBudget(cfg.train.epsilon)
    arch = "+".join(m.arch_id for m in setup.substitutes)
    if base == "identity":
        return IdentityAttack()
    if base == "noise":
        return NoiseAttack(budget)
    if base in ITERATIVE_ATTACKS:
        return IterativeAttack(base, setup.substitute, iter_config(cfg), cfg.objective.tap)
    if base == "checkpoint":
        G, meta = load_checkpoint(cfg.eval.checkpoint, generator_spec(cfg))
        return GeneratorAttack(G, budget, name, meta.get("source_arch", arch), smooth)
    if base in GENERATOR_ATTACKS:
        G, _ = train_run(cfg, setup, base, seed)
        return GeneratorAttack(G, budget, name, arch, smooth)
    raise ValueError(f"unknown attack {name!r}")


def run_eval(cfg: RunConfig, setup: Setup, attacks: tuple[str, ...] | None = None,
             seeds: tuple[int, ...] | None = None) -> EvalReport:
    attacks = attacks or cfg.eval.attacks
    seeds = seeds or cfg.eval.seeds
    budget = AttackBudget(cfg.train.epsilon)

    def one_seed(seed: int) -> EvalReport:
        report = EvalReport()
        for name in attacks:
            attack = make_attack(name, cfg, setup, seed)
            report.extend(evaluate_attack(attack, setup.eval_targets, budget, seed, cfg.eval.batch_size))
        return report

    return multi_seed(one_seed, seeds)


# Desk-scale transfer experiment: 8k-image synthetic source, disjoint synthetic target,
# shallow tap and two epochs so a 16-channel generator converges on one CPU.
DESK_SCALE = {
    "objective.tap": "stage1",
    "train.epochs": "2",
    "eval.attacks": "bia,bia_rn,bia_da,noise",
    "eval.seeds": "1,2,3",
}


def desk_scale_config(overrides: dict[str, str] | None = None) -> RunConfig:
    return RunConfig().with_overrides({**DESK_SCALE, **(overrides or {})})


@dataclass
class TransferResult:
    setup: Setup
    report: EvalReport
    ensemble_report: EvalReport | None
    seconds: float
    ensemble_seconds: float


def transfer_experiment(cfg: RunConfig, ensemble_arch: str | None = None) -> TransferResult:
    """Single-substitute report over all configured attacks and seeds.

    With ``ensemble_arch`` a second substitute is trained on the source domain
    and the first configured variant is retrained against both.
    """
    start = time.perf_counter()
    setup = prepare(cfg)
    report = run_eval(cfg, setup)
    seconds = time.perf_counter() - start
    ensemble_report, ens_seconds = None, 0.0
    if ensemble_arch:
        start = time.perf_counter()
        extra, acc = train_substitute(cfg, ensemble_arch, setup.source_train, setup.source_test)
        setup.accuracies[f"substitute:{ensemble_arch}"] = acc
        ens_setup = replace(setup, substitutes=[setup.substitute, extra])
        variant = next(a for a in cfg.eval.attacks if a in GENERATOR_ATTACKS)
        ensemble_report = run_eval(cfg, ens_setup, attacks=(variant,))
        ens_seconds = time.perf_counter() - start
    return TransferResult(setup, report, ensemble_report, seconds, ens_seconds)
