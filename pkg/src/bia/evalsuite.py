"""Transferability evaluation, ablation sweeps, multi-seed statistics and generator visualization."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from . import baselines
from .data import AugmentPolicy, DatasetHandle, iter_batches
from .generator import AttackBudget, Generator, GeneratorSpec, build_generator, channel_pool, generate, project
from .models import Classifier, predict
from .objectives import ObjectiveKind, RNParams, Variant
from .seeding import Streams
from .training import TrainConfig, train_generator

AUDIT_TOL = 1e-6


class AuditError(AssertionError):
    pass


# --- reports -----------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    attack_id: str
    source_arch: str
    target_model: str
    dataset: str
    clean_top1: float
    attacked_top1: float
    seed: int
    flip_rate: float = 0.0

    def __post_init__(self):
        for name in ("clean_top1", "attacked_top1", "flip_rate"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} outside [0,100]: {getattr(self, name)}")

    @property
    def group(self) -> tuple[str, str, str, str]:
        return (self.attack_id, self.source_arch, self.target_model, self.dataset)


@dataclass(frozen=True)
class Aggregate:
    attack_id: str
    source_arch: str
    target_model: str
    dataset: str
    n: int
    clean_mean: float
    attacked_mean: float
    attacked_std: float | None
    seeds: tuple[int, ...]

    def cell(self, digits: int = 2) -> str:
        return format_mean_std(self.attacked_mean, self.attacked_std, digits)


def sample_std(values: Sequence[float]) -> float | None:
    """Sample (n-1) standard deviation; ``None`` when fewer than two values."""
    if len(values) < 2:
        return None
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def format_mean_std(mean: float, std: float | None, digits: int = 2) -> str:
    if std is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def select(self, **match) -> "EvalReport":
        return EvalReport([r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())])

    def aggregates(self) -> list[Aggregate]:
        groups: dict[tuple, list[EvalRow]] = {}
        for row in self.rows:
            groups.setdefault(row.group, []).append(row)
        out = []
        for key, rows in groups.items():
            attacked = [r.attacked_top1 for r in rows]
            out.append(Aggregate(*key, n=len(rows),
                                 clean_mean=float(np.mean([r.clean_top1 for r in rows])),
                                 attacked_mean=float(np.mean(attacked)),
                                 attacked_std=sample_std(attacked),
                                 seeds=tuple(r.seed for r in rows)))
        return out

    def aggregate(self, **match) -> Aggregate:
        found = [a for a in self.aggregates() if all(getattr(a, k) == v for k, v in match.items())]
        if len(found) != 1:
            raise KeyError(f"{len(found)} aggregates match {match}")
        return found[0]

    def to_json(self) -> str:
        doc = {
            "rows": [asdict(r) for r in self.rows],
            "aggregates": [{**asdict(a), "seeds": list(a.seeds), "cell": a.cell()} for a in self.aggregates()],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls([EvalRow(**r) for r in json.loads(text)["rows"]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(EvalRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])
        return buf.getvalue()

    def table(self, digits: int = 2) -> str:
        """One line per group, e.g. ``smallres / digits / bia (smallconv) -> 52.70±0.42``."""
        lines = []
        for a in self.aggregates():
            lines.append(f"{a.target_model} / {a.dataset} / {a.attack_id} ({a.source_arch}) "
                         f"→ {a.cell(digits)}  [clean {a.clean_mean:.{digits}f}, n={a.n}]")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.txt").write_text(self.table(), encoding="utf-8")


# --- attacks -----------------------------------------------------------------

class Attack:
    """Maps a clean batch to an adversarial batch; ``rng`` is the per-cell stream."""

    attack_id = "attack"
    source_arch = "-"

    def __call__(self, x: torch.Tensor, streams: Streams) -> torch.Tensor:
        raise NotImplementedError


class IdentityAttack(Attack):
    attack_id = "identity"

    def __call__(self, x, streams):
        return x.clone()


@dataclass
class GeneratorAttack(Attack):
    G: Generator
    budget: AttackBudget
    attack_id: str = "bia"
    source_arch: str = "-"
    smooth: bool = False

    def __call__(self, x, streams):
        with torch.no_grad():
            candidate = generate(self.G, x, pad=True)
            if self.smooth:
                candidate = baselines.gaussian_smooth(candidate)
            return project(candidate, x, self.budget)


@dataclass
class NoiseAttack(Attack):
    budget: AttackBudget
    std: float | None = None
    attack_id: str = "noise"

    def __call__(self, x, streams):
        return baselines.gaussian_noise_control(x, self.budget, streams.numpy("noise"), self.std)


@dataclass
class IterativeAttack(Attack):
    """pgd / dim / dr / ssp crafted on a substitute; label-based attacks use its own predictions."""

    name: str
    substitute: Classifier
    cfg: baselines.IterConfig
    tap: str = "stage2"

    @property
    def attack_id(self):
        return self.name

    @property
    def source_arch(self):
        return self.substitute.arch_id

    def __call__(self, x, streams):
        m = self.substitute.eval()
        if self.name == "pgd":
            return baselines.pgd_attack(m, x, predict(m, x), self.cfg, streams.torch("baselines"))
        if self.name == "dim":
            return baselines.dim_attack(m, x, predict(m, x), self.cfg, streams.numpy("baselines"))
        if self.name == "dr":
            return baselines.dr_attack(m, self.tap, x, self.cfg)
        if self.name == "ssp":
            return baselines.ssp_attack(m, self.tap, x, self.cfg, streams.torch("baselines"))
        raise KeyError(f"unknown iterative attack {self.name!r}")


def audit(x_adv: torch.Tensor, x: torch.Tensor, eps: float, tol: float = AUDIT_TOL) -> float:
    """Independent l_inf / range check; returns the observed max deviation."""
    dev = float((x_adv.double() - x.double()).abs().max()) if x.numel() else 0.0
    if dev > eps + tol:
        raise AuditError(f"perturbation {dev:.8f} exceeds epsilon {eps:.8f}")
    if x_adv.numel() and (float(x_adv.min()) < 0.0 or float(x_adv.max()) > 1.0):
        raise AuditError("adversarial image outside [0,1]")
    return dev


def evaluate_attack(attack: Attack | Callable, targets: Sequence[tuple[Classifier, DatasetHandle]],
                    budget: AttackBudget, seed: int = 0, batch_size: int = 250) -> EvalReport:
    """Top-1 accuracy of each target on its full test split, before and after the attack."""
    attack_id = getattr(attack, "attack_id", "attack")
    source_arch = getattr(attack, "source_arch", "-")
    report = EvalReport()
    for model, handle in targets:
        if model.class_count != handle.class_count:
            raise ValueError(f"{model.arch_id} has {model.class_count} classes but "
                             f"{handle.name} has {handle.class_count}")
        streams = Streams(seed).child(f"{attack_id}|{model.arch_id}|{handle.name}")
        model.eval()
        clean_ok = adv_ok = flipped = 0
        for x, y in iter_batches(handle, batch_size):
            x_adv = attack(x, streams)
            audit(x_adv, x, budget.epsilon)
            p_clean = predict(model, x)
            p_adv = predict(model, x_adv)
            clean_ok += int((p_clean == y).sum())
            adv_ok += int((p_adv == y).sum())
            flipped += int((p_adv != p_clean).sum())
        n = len(handle)
        report.rows.append(EvalRow(attack_id, source_arch, model.arch_id, handle.name,
                                   100.0 * clean_ok / n, 100.0 * adv_ok / n, seed, 100.0 * flipped / n))
    return report


def multi_seed(run: Callable[[int], EvalReport], seeds: Sequence[int]) -> EvalReport:
    """Concatenate per-seed reports; aggregates give mean and sample std per group."""
    report = EvalReport()
    for s in seeds:
        part = run(s)
        report.extend(EvalReport([replace(r, seed=s) for r in part.rows]))
    return report


# --- sweeps --------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    axes: dict[str, tuple]

    def __post_init__(self):
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ValueError("sweep axes must be non-empty")


def _train_and_attack(substitute, source: DatasetHandle, cfg: TrainConfig, spec: GeneratorSpec,
                      attack_id: str) -> GeneratorAttack:
    G = build_generator(spec, cfg.seed)
    G, _ = train_generator(G, substitute, source, cfg)
    arch = substitute.arch_id if isinstance(substitute, Classifier) else \
        "+".join((m[0] if isinstance(m, tuple) else m).arch_id for m in substitute)
    return GeneratorAttack(G, cfg.budget, attack_id, arch)


def layer_sweep(substitute: Classifier, taps: Sequence[str], source: DatasetHandle,
                targets: Sequence[tuple[Classifier, DatasetHandle]], cfg: TrainConfig,
                spec: GeneratorSpec = GeneratorSpec()) -> EvalReport:
    """One generator per tap, identical seeds; attack ids are ``<variant>@<tap>``."""
    if not taps:
        raise ValueError("layer_sweep needs at least one tap")
    report = EvalReport()
    for tap in taps:
        tcfg = replace(cfg, objective=replace(cfg.objective, tap=tap))
        attack = _train_and_attack(substitute, source, tcfg, spec, f"{cfg.objective.variant.value}@{tap}")
        report.extend(evaluate_attack(attack, targets, cfg.budget, cfg.seed))
    return report


def rank_attacks(report: EvalReport, dataset: str | None = None) -> list[tuple[str, float]]:
    """Attack ids ordered by mean attacked top-1 (strongest first)."""
    rows = [r for r in report.rows if dataset is None or r.dataset == dataset]
    by_attack: dict[str, list[float]] = {}
    for r in rows:
        by_attack.setdefault(r.attack_id, []).append(r.attacked_top1)
    ranked = [(k, float(np.mean(v))) for k, v in by_attack.items()]
    return sorted(ranked, key=lambda kv: (kv[1], kv[0]))


@dataclass
class Heatmap:
    row_axis: str
    col_axis: str
    row_values: tuple
    col_values: tuple
    cells: np.ndarray
    report: EvalReport

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"{self.row_axis}\\{self.col_axis}", *self.col_values])
        for rv, row in zip(self.row_values, self.cells):
            w.writerow([rv, *(f"{v:.4f}" for v in row)])
        return buf.getvalue()


def rn_cell_id(mu_mean: float, sigma_mean: float) -> str:
    return f"bia_rn[mu={mu_mean:g},sigma={sigma_mean:g}]"


def rn_param_sweep(grid: SweepGrid, substitute: Classifier, source: DatasetHandle,
                   targets: Sequence[tuple[Classifier, DatasetHandle]], cfg: TrainConfig,
                   spec: GeneratorSpec = GeneratorSpec(), seeds: Sequence[int] | None = None,
                   rn_std: float = 0.08) -> Heatmap:
    """Average attacked top-1 for each (mu_mean, sigma_mean) pair, std fixed at ``rn_std``."""
    if set(grid.axes) != {"mu_mean", "sigma_mean"}:
        raise ValueError("rn sweep axes must be mu_mean and sigma_mean")
    mus, sigmas = tuple(grid.axes["mu_mean"]), tuple(grid.axes["sigma_mean"])
    seeds = tuple(seeds) if seeds else (cfg.seed,)
    report = EvalReport()
    cells = np.zeros((len(mus), len(sigmas)))
    for i, mu in enumerate(mus):
        for j, sigma in enumerate(sigmas):
            rn = RNParams(mu, rn_std, sigma, rn_std)
            cell_id = rn_cell_id(mu, sigma)
            for s in seeds:
                ccfg = replace(cfg, seed=s, objective=ObjectiveKind(Variant.BIA_RN, cfg.objective.tap, rn))
                attack = _train_and_attack(substitute, source, ccfg, spec, cell_id)
                report.extend(evaluate_attack(attack, targets, cfg.budget, s))
            cells[i, j] = float(np.mean([r.attacked_top1 for r in report.rows if r.attack_id == cell_id]))
    return Heatmap("mu_mean", "sigma_mean", mus, sigmas, cells, report)


def augmentation_comparison(substitute: Classifier, source: DatasetHandle,
                            targets: Sequence[tuple[Classifier, DatasetHandle]], cfg: TrainConfig,
                            spec: GeneratorSpec = GeneratorSpec(),
                            policy: AugmentPolicy = AugmentPolicy(enabled=True)) -> EvalReport:
    """Vanilla, augmented and RN arms trained under the same seed."""
    tap = cfg.objective.tap
    arms = {
        "bia": replace(cfg, objective=ObjectiveKind(Variant.BIA, tap), augment=AugmentPolicy()),
        "bia_aug": replace(cfg, objective=ObjectiveKind(Variant.BIA, tap), augment=replace(policy, enabled=True)),
        "bia_rn": replace(cfg, objective=ObjectiveKind(Variant.BIA_RN, tap, cfg.objective.rn or RNParams()),
                          augment=AugmentPolicy()),
    }
    report = EvalReport()
    for name, acfg in arms.items():
        attack = _train_and_attack(substitute, source, acfg, spec, name)
        report.extend(evaluate_attack(attack, targets, cfg.budget, cfg.seed))
    return report


# --- generator inspection ----------------------------------------------------------

def block_diff_map(G_a: Generator, G_b: Generator, x: torch.Tensor) -> torch.Tensor:
    """1 where the pooled downsampling output of ``G_a`` exceeds that of ``G_b``, else 0."""
    if G_a.spec != G_b.spec:
        raise ValueError(f"generator specs differ: {G_a.spec} vs {G_b.spec}")
    with torch.no_grad():
        a = channel_pool(G_a.blocks(x)["down"])
        b = channel_pool(G_b.blocks(x)["down"])
    return (a - b > 0).to(x.dtype)


def to_gray8(m: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D map to uint8; constant maps become mid gray."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def visualize_blocks(G: Generator, x: torch.Tensor, out_dir: str | Path, prefix: str = "") -> list[Path]:
    """One grayscale PNG per generator block (pooled over channels) for the first image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        blocks = G.blocks(x[:1])
    paths = []
    for k, (name, h) in enumerate(blocks.items()):
        img = to_gray8(channel_pool(h)[0, 0].double().numpy())
        path = out / f"{prefix}{k:02d}_{name}.png"
        Image.fromarray(img).save(path)
        paths.append(path)
    return paths


def save_map_png(m: torch.Tensor, path: str | Path) -> None:
    Image.fromarray((m.squeeze().numpy() * 255).astype(np.uint8)).save(path)
