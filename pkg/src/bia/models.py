"""Small classifiers with named feature taps.

These are desk-scale stand-ins for the VGG / ResNet / DenseNet substitutes and
targets. Every architecture has three downsampling stages (stride 2 each)
followed by a global-pool linear head, so a stage-k activation of a 32x32
input is ``32 / 2**k`` pixels wide.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_container, state_to_arrays, write_container, ContainerError
from .data import DatasetHandle, IMAGENET_STATS, NormStats, iter_batches
from .seeding import derive_seed, torch_seeded

log = logging.getLogger(__name__)

STRIDE_PRODUCT = 8


class TrainingError(RuntimeError):
    pass


class Classifier(nn.Module):
    """Normalize-then-stages-then-head classifier.

    Preprocessing is part of ``forward``: callers always pass pixels in [0,1].
    """

    def __init__(self, arch_id: str, stages: "OrderedDict[str, nn.Module]", head: nn.Module,
                 class_count: int, preprocess: NormStats = IMAGENET_STATS):
        super().__init__()
        if "head" in stages:
            raise ValueError("'head' is reserved")
        self.arch_id = arch_id
        self.class_count = class_count
        self.preprocess = preprocess
        self.stages = nn.ModuleDict(stages)
        self.head = head
        self.register_buffer("_mean", torch.tensor(preprocess.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("_std", torch.tensor(preprocess.std).view(1, 3, 1, 1), persistent=False)

    @property
    def taps(self) -> list[str]:
        return list(self.stages.keys())

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self._mean) / self._std

    def features(self, x: torch.Tensor, tap: str) -> torch.Tensor:
        if tap not in self.stages:
            raise KeyError(f"unknown tap {tap!r}; available: {self.taps}")
        h = self.normalize(x)
        for name, stage in self.stages.items():
            h = stage(h)
            if name == tap:
                return h
        raise AssertionError("unreachable")

    def run_from(self, tap: str, h: torch.Tensor) -> torch.Tensor:
        """Finish the forward pass from the activation at ``tap``."""
        if tap not in self.stages:
            raise KeyError(f"unknown tap {tap!r}; available: {self.taps}")
        names = self.taps
        for name in names[names.index(tap) + 1:]:
            h = self.stages[name](h)
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.normalize(x)
        for stage in self.stages.values():
            h = stage(h)
        return self.head(h)


def _conv_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True)]


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class DenseLayer(nn.Module):
    def __init__(self, cin: int, growth: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(cin)
        self.conv = nn.Conv2d(cin, growth, 3, padding=1, bias=False)

    def forward(self, x):
        return torch.cat([x, self.conv(F.relu(self.bn(x)))], dim=1)


def _dense_stage(cin: int, cout: int, growth: int, layers: int, stem: bool = False) -> nn.Sequential:
    mods: list[nn.Module] = []
    if stem:
        mods.append(nn.Conv2d(3, cin, 3, padding=1, bias=False))
    c = cin
    for _ in range(layers):
        mods.append(DenseLayer(c, growth))
        c += growth
    mods += [nn.BatchNorm2d(c), nn.ReLU(inplace=True), nn.Conv2d(c, cout, 1, bias=False), nn.AvgPool2d(2)]
    return nn.Sequential(*mods)


def _head(channels: int, class_count: int) -> nn.Module:
    return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels, class_count))


def _smallconv(class_count: int, width: int) -> tuple[OrderedDict, nn.Module]:
    w1, w2, w3 = width, 2 * width, 4 * width
    stages = OrderedDict(
        stage1=nn.Sequential(*_conv_relu(3, w1), *_conv_relu(w1, w1), nn.MaxPool2d(2)),
        stage2=nn.Sequential(*_conv_relu(w1, w2), *_conv_relu(w2, w2), nn.MaxPool2d(2)),
        stage3=nn.Sequential(*_conv_relu(w2, w3), *_conv_relu(w3, w3), nn.MaxPool2d(2)),
    )
    return stages, _head(w3, class_count)


def _smallres(class_count: int, width: int) -> tuple[OrderedDict, nn.Module]:
    w1, w2, w3 = width, 2 * width, 4 * width
    stages = OrderedDict(
        stage1=nn.Sequential(nn.Conv2d(3, w1, 3, padding=1, bias=False), nn.BatchNorm2d(w1),
                             nn.ReLU(inplace=True), BasicBlock(w1, w1, 2)),
        stage2=BasicBlock(w1, w2, 2),
        stage3=BasicBlock(w2, w3, 2),
    )
    return stages, _head(w3, class_count)


def _smalldense(class_count: int, width: int) -> tuple[OrderedDict, nn.Module]:
    g = max(4, width // 2)
    stages = OrderedDict(
        stage1=_dense_stage(width, width, g, 2, stem=True),
        stage2=_dense_stage(width, 2 * width, g, 2),
        stage3=_dense_stage(2 * width, 4 * width, g, 2),
    )
    return stages, nn.Sequential(nn.BatchNorm2d(4 * width), nn.ReLU(), _head(4 * width, class_count))


REGISTRY = {
    "smallconv": _smallconv,
    "smallres": _smallres,
    "smalldense": _smalldense,
}


def build_classifier(arch_id: str, class_count: int, input_resolution: tuple[int, int] = (32, 32),
                     preprocess: NormStats = IMAGENET_STATS, seed: int = 0, width: int = 16) -> Classifier:
    if arch_id not in REGISTRY:
        raise KeyError(f"unknown arch_id {arch_id!r}; registered: {sorted(REGISTRY)}")
    h, w = input_resolution
    if h % STRIDE_PRODUCT or w % STRIDE_PRODUCT:
        raise ValueError(f"input resolution {input_resolution} not divisible by {STRIDE_PRODUCT}")
    with torch_seeded(derive_seed(seed, f"classifier:{arch_id}")):
        stages, head = REGISTRY[arch_id](class_count, width)
        model = Classifier(arch_id, stages, head, class_count, preprocess)
    model.input_resolution = (h, w)
    model.width = width
    return model


def list_taps(model: Classifier) -> list[str]:
    return model.taps


def extract_features(model: Classifier, tap: str, batch: torch.Tensor) -> torch.Tensor:
    return model.features(batch, tap)


def predict(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Top-1 labels; ties go to the lowest class index."""
    with torch.no_grad():
        logits = model(x)
    return torch.from_numpy(np.argmax(logits.cpu().numpy(), axis=1))


def accuracy(model: nn.Module, handle: DatasetHandle, batch_size: int = 256) -> float:
    was_training = model.training
    model.eval()
    correct = 0
    for x, y in iter_batches(handle, batch_size):
        correct += int((predict(model, x) == y).sum())
    model.train(was_training)
    return correct / len(handle)


def train_classifier(model: Classifier, train: DatasetHandle, test: DatasetHandle, epochs: int,
                     lr: float = 1e-3, seed: int = 0, batch_size: int = 64) -> tuple[Classifier, float]:
    """Adam + cross-entropy; returns the model and its top-1 test accuracy."""
    if train.class_count != model.class_count:
        raise ValueError("dataset class_count does not match the model")
    rng = np.random.default_rng(derive_seed(seed, "classifier-batches"))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        total = 0.0
        for x, y in iter_batches(train, batch_size, rng):
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss {loss.item()} in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
        log.info("%s epoch %d loss %.4f", model.arch_id, epoch, total / len(train))
    model.eval()
    return model, accuracy(model, test)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_classifier(model: Classifier, path: str | Path, seed: int = 0) -> None:
    meta = {
        "kind": "classifier",
        "arch_id": model.arch_id,
        "class_count": model.class_count,
        "preprocess.mean": ",".join(repr(v) for v in model.preprocess.mean),
        "preprocess.std": ",".join(repr(v) for v in model.preprocess.std),
        "resolution": "x".join(str(v) for v in getattr(model, "input_resolution", (32, 32))),
        "width": getattr(model, "width", 16),
        "seed": seed,
    }
    write_container(path, state_to_arrays(model.state_dict()), meta)


def load_classifier(path: str | Path) -> Classifier:
    arrays, meta = read_container(path)
    if meta.get("kind") != "classifier":
        raise ContainerError(f"{path} is not a classifier checkpoint")
    stats = NormStats(tuple(float(v) for v in meta["preprocess.mean"].split(",")),
                      tuple(float(v) for v in meta["preprocess.std"].split(",")))
    res = tuple(int(v) for v in meta["resolution"].split("x"))
    model = build_classifier(meta["arch_id"], int(meta["class_count"]), res, stats,
                             int(meta.get("seed", 0)), int(meta.get("width", 16)))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model.eval()
