"""Command line: ``bia {train,attack,eval,sweep,viz}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .data import IMAGE_SUFFIXES, iter_batches
from .evalsuite import (SweepGrid, augmentation_comparison, block_diff_map, layer_sweep,
                        rank_attacks, rn_param_sweep, save_map_png, visualize_blocks)
from .generator import AttackBudget, build_generator, generate, project
from .models import save_classifier
from .training import load_checkpoint, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("bia")


def _setup_logging(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _parse_overrides(sets: list[str], extra: list[str]) -> dict[str, str]:
    overrides = {}
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
        overrides[key] = value
    return overrides


def _config(args, extra) -> RunConfig:
    return load_config(args.config, _parse_overrides(args.set or [], extra))


def cmd_train(cfg: RunConfig, out: Path) -> int:
    setup = pipeline.prepare(cfg)
    for model in setup.substitutes:
        save_classifier(model, out / f"substitute_{model.arch_id}.biaf", cfg.model.seed)
    save_classifier(setup.target, out / f"target_{setup.target.arch_id}.biaf", cfg.model.seed)
    ckpt = out / "generator.biaf"
    _, losses = pipeline.train_run(cfg, setup, checkpoint_path=str(ckpt))
    write_loss_csv(losses, out / "loss.csv")
    (out / "config.txt").write_text(cfg.dump())
    print(ckpt)
    return EXIT_OK


def _audit_8bit(adv: np.ndarray, src: np.ndarray, eps_8bit: float) -> bool:
    return int(np.abs(adv.astype(np.int16) - src.astype(np.int16)).max(initial=0)) <= eps_8bit + 1e-9


def cmd_attack(checkpoint: str, input_dir: str, output_dir: str, epsilon: float) -> int:
    """Write ``<stem>.png`` adversarial copies of every image under ``input_dir``."""
    G, _ = load_checkpoint(checkpoint)
    budget = AttackBudget(epsilon)
    src_dir, dst_dir = Path(input_dir), Path(output_dir)
    if not src_dir.is_dir():
        raise FileNotFoundError(f"input directory not found: {src_dir}")
    dst_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    written = failed = 0
    for path in files:
        with Image.open(path) as im:
            src = np.array(im.convert("RGB"), dtype=np.uint8)
        x = torch.from_numpy(src).permute(2, 0, 1).unsqueeze(0).float() / 255.0
        with torch.no_grad():
            x_adv = project(generate(G, x, pad=True), x, budget)
        adv = np.round(x_adv[0].permute(1, 2, 0).numpy() * 255).clip(0, 255).astype(np.uint8)
        if not _audit_8bit(adv, src, epsilon):
            failed += 1
            log.error("audit failed for %s; file skipped", path.name)
            continue
        Image.fromarray(adv).save(dst_dir / f"{path.stem}.png")
        written += 1
    print(f"wrote {written} images, {failed} audit failures")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    setup = pipeline.prepare(cfg)
    report = pipeline.run_eval(cfg, setup)
    report.write(out)
    print(report.table(), end="")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    setup = pipeline.prepare(cfg)
    tcfg = pipeline.train_config(cfg)
    spec = pipeline.generator_spec(cfg)
    s = cfg.sweep
    if s.kind == "rn":
        heat = rn_param_sweep(SweepGrid({"mu_mean": s.mu_means, "sigma_mean": s.sigma_means}),
                              setup.substitute, setup.source_train, setup.eval_targets, tcfg, spec,
                              cfg.eval.seeds, s.rn_std)
        out.mkdir(parents=True, exist_ok=True)
        (out / "heatmap.csv").write_text(heat.to_csv())
        report = heat.report
    elif s.kind == "layer":
        report = layer_sweep(setup.substitute, s.taps, setup.source_train, setup.eval_targets, tcfg, spec)
        ranking = rank_attacks(report, setup.target_test.name)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ranking.csv").write_text("attack_id,target_attacked_top1\n" +
                                         "".join(f"{k},{v!r}\n" for k, v in ranking))
    elif s.kind == "aug":
        report = augmentation_comparison(setup.substitute, setup.source_train, setup.eval_targets, tcfg, spec)
    else:
        raise ConfigError(f"unknown sweep.kind {s.kind!r}")
    report.write(out)
    print(report.table(), end="")
    return EXIT_OK


def cmd_viz(cfg: RunConfig, out: Path) -> int:
    spec = pipeline.generator_spec(cfg)
    if cfg.eval.checkpoint:
        G, _ = load_checkpoint(cfg.eval.checkpoint, spec)
    else:
        G = build_generator(spec, cfg.train.seed).eval()
    source = pipeline.load_domains(cfg)[1]
    x, _ = next(iter_batches(source, 1))
    paths = visualize_blocks(G, x, out / "blocks")
    if cfg.eval.compare_checkpoint:
        G_b, _ = load_checkpoint(cfg.eval.compare_checkpoint, spec)
        save_map_png(block_diff_map(G, G_b, x)[0], out / "diff_map.png")
    print(f"wrote {len(paths)} block images to {out / 'blocks'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bia", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sweep", "viz"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file of 'section.key = value' lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--out", default="runs/" + name, help="output directory")
    p = sub.add_parser("attack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of .png/.jpg images")
    p.add_argument("--output", required=True)
    p.add_argument("--epsilon", type=float, default=10.0, help="budget on the 0-255 scale")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    handler = None
    try:
        if args.command == "attack":
            if extra:
                raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_attack(args.checkpoint, args.input, args.output, args.epsilon)
        cfg = _config(args, extra)
        out = Path(args.out)
        handler = _setup_logging(out)
        log.info("command %s started at %s", args.command, time.strftime("%Y-%m-%d %H:%M:%S"))
        return {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "viz": cmd_viz}[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every module error maps to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
