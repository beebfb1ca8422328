"""Backbone construction, partitioning into local modules, and auxiliary machinery.

The backbone is a constant-width residual stack (stem conv -> depth-2
residual units -> global pool -> linear classifier). Constant width with no
downsampling keeps every unit shape-compatible with every other, which is
what lets leap replicas copied from deep units compose onto early-module
feature maps unchanged.

Partitioning shares layer objects with the backbone — a module is a view,
not a copy — so training through modules and evaluating through the
backbone see the same parameters by construction.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import AuxHead, BatchNorm2d, Conv2d, Linear, ResidualUnit
from .rng import named_stream
from .tensor import Tensor


@dataclass
class BackboneConfig:
    depth: int = 18
    width: int = 8
    classes: int = 10
    input_shape: tuple = (1, 12, 12)


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int):
        if cfg.depth < 3:
            raise ConfigError(f"backbone depth must be >= 3 (stem + at least "
                              f"one unit + classifier), got {cfg.depth}")
        if len(cfg.input_shape) != 3 or any(d < 1 for d in cfg.input_shape):
            raise ConfigError(f"input_shape must be (C,H,W) positive, got {cfg.input_shape}")
        self.cfg = cfg
        gen = named_stream(seed, "init/backbone")
        c_in = cfg.input_shape[0]
        self.stem_conv = Conv2d("stem.conv", c_in, cfg.width, gen, bias=False)
        self.stem_bn = BatchNorm2d("stem.bn", cfg.width)
        pad = int(math.log10(max(cfg.depth - 2, 1))) + 1
        self.units = [ResidualUnit(f"unit{i:0{pad}d}", cfg.width, gen)
                      for i in range(cfg.depth - 2)]
        self.classifier = Linear("classifier", cfg.width, cfg.classes, gen)

    def stem_forward(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        return ops.relu(self.stem_bn(self.stem_conv(x), training, update_stats))

    def forward(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        h = self.stem_forward(x, training, update_stats)
        for unit in self.units:
            h = unit(h, training, update_stats)
        return self.classifier(ops.global_avg_pool(h))

    def parameters(self):
        out = self.stem_conv.parameters() + self.stem_bn.parameters()
        for unit in self.units:
            out += unit.parameters()
        return out + self.classifier.parameters()

    def batchnorms(self):
        return [self.stem_bn] + [u.bn for u in self.units]


def build_backbone(depth: int, width: int, num_classes: int, input_shape, seed: int = 0) -> Backbone:
    return Backbone(BackboneConfig(depth, width, num_classes, tuple(input_shape)), seed)


class LocalModule:
    """Contiguous backbone slice. Module 1 owns the stem; the last module owns
    the pool + classifier and produces the network's real logits."""

    def __init__(self, index: int, units, stem=None, tail: Optional[Linear] = None):
        self.index = index
        self.units = list(units)
        self.stem = stem          # (conv, bn) for module 1
        self.tail = tail          # classifier for the final module

    def forward_body(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        h = x
        if self.stem is not None:
            conv, bn = self.stem
            h = ops.relu(bn(conv(h), training, update_stats))
        for unit in self.units:
            h = unit(h, training, update_stats)
        return h

    def finish(self, features: Tensor) -> Tensor:
        if self.tail is None:
            raise ConfigError(f"module {self.index} has no classifier tail")
        return self.tail(ops.global_avg_pool(features))

    def parameters(self):
        out = []
        if self.stem is not None:
            out += self.stem[0].parameters() + self.stem[1].parameters()
        for unit in self.units:
            out += unit.parameters()
        if self.tail is not None:
            out += self.tail.parameters()
        return out


def partition(backbone: Backbone, K: int):
    """Split the backbone's units into K contiguous near-equal modules.

    Remainder units go to the earliest modules. Layer objects are shared
    with the backbone, not copied.
    """
    n = len(backbone.units)
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if K > max(n, 1):
        raise ConfigError(f"K={K} exceeds the {n} partitionable blocks")
    base, rem = divmod(n, K)
    sizes = [base + 1 if i < rem else base for i in range(K)]
    modules = []
    at = 0
    for j, size in enumerate(sizes, start=1):
        modules.append(LocalModule(
            j, backbone.units[at:at + size],
            stem=(backbone.stem_conv, backbone.stem_bn) if j == 1 else None,
            tail=backbone.classifier if j == K else None))
        at += size
    return sizes, modules


def attach_independent_heads(modules, classes: int, seed: int):
    """One auxiliary head per module except the last (its classifier is the head)."""
    width = _module_width(modules)
    return {m.index: AuxHead(f"head{m.index}", width, classes,
                             named_stream(seed, f"init/head/{m.index}"))
            for m in modules[:-1]}


@dataclass
class CascadeGroup:
    start: int
    members: list
    head: Optional[AuxHead]                 # None when the group ends at module K
    pair: Optional["LeapReplicaPair"] = None

    @property
    def last(self):
        return self.members[-1]


def attach_cascade_groups(modules, k: int, classes: int, seed: int):
    """Stride-1 overlapping windows of k consecutive modules, one head each."""
    K = len(modules)
    if k <= 1 or k > K:
        raise ConfigError(f"cascade span k must satisfy 1 < k <= K={K}, got {k}")
    width = _module_width(modules)
    groups = []
    for start in range(1, K - k + 2):
        members = modules[start - 1:start - 1 + k]
        head = None
        if members[-1].index < K:
            head = AuxHead(f"cascade{start}", width, classes,
                           named_stream(seed, f"init/cascade/{start}"))
        groups.append(CascadeGroup(start, members, head))
    return groups


def _module_width(modules) -> int:
    for m in modules:
        if m.units:
            return m.units[0].conv.w.shape[0]
        if m.stem is not None:
            return m.stem[0].w.shape[0]
    raise ConfigError("cannot infer module width: no conv layers present")


LEAP_FRACTIONS = (0.1, 0.5, 0.9)


class LeapReplicaPair:
    """Twice-copied later-module units composed onto an earlier module's head path.

    phi_prime copies train by gradient and are periodically re-copied from
    their live sources; phi_double copies only ever move by the EMA rule.
    The forward stack is all phi_prime units followed by the phi_double
    twins of the deepest `ema_count` sources.
    """

    def __init__(self, owner: int, sources, phi_prime, phi_double, r: float, ema_count: int):
        self.owner = owner
        self.sources = sources
        self.phi_prime = phi_prime
        self.phi_double = phi_double
        self.r = r
        self.ema_count = ema_count

    def apply(self, x: Tensor) -> Tensor:
        h = x
        for unit in self.phi_prime:
            h = unit(h, training=True, update_stats=False)
        for unit in self.ema_stack():
            h = unit(h, training=True, update_stats=False)
        return h

    def ema_stack(self):
        if self.ema_count == 0:
            return []
        return self.phi_double[len(self.phi_double) - self.ema_count:]

    def ema_step(self) -> None:
        r = self.r
        for prime, double in zip(self.phi_prime, self.phi_double):
            for src, dst in zip(prime.parameters(), double.parameters()):
                dst.data *= r
                dst.data += (1.0 - r) * src.data

    def parameters(self):
        out = []
        for unit in self.phi_prime + self.phi_double:
            out += unit.parameters()
        return out


def _copy_unit(unit: ResidualUnit, new_name: str, trainable: bool) -> ResidualUnit:
    clone = copy.deepcopy(unit)
    rename = {
        clone.conv.w: f"{new_name}.conv.w",
        clone.bn.gamma: f"{new_name}.bn.gamma",
        clone.bn.beta: f"{new_name}.bn.beta",
    }
    for param, name in rename.items():
        param.name = name
        param.zero_grad()
        param.velocity[...] = 0.0
        param.requires_grad = trainable
    clone.name = new_name
    clone.conv.name = f"{new_name}.conv"
    clone.bn.name = f"{new_name}.bn"
    return clone


def build_leap_replicas(modules, j: int, p: int, r: float) -> LeapReplicaPair:
    """Copy p source units from modules j+1..K, twice each (phi', phi'').

    Sources sit at the fractional depths 0.1/0.5/0.9 (cycled) of the
    remaining network. The EMA-substituted suffix length is ceil(p*j/K).
    """
    K = len(modules)
    if not 1 <= j < K:
        raise ConfigError(f"leap owner j must be in [1, K), got j={j}, K={K}")
    if p < 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    candidates = [unit for m in modules[j:] for unit in m.units]
    if p > len(candidates):
        raise ConfigError(
            f"p={p} exceeds the {len(candidates)} source layers after module {j}")
    indices = sorted(min(int(LEAP_FRACTIONS[i % 3] * len(candidates)), len(candidates) - 1)
                     for i in range(p))
    sources = [candidates[i] for i in indices]
    phi_prime = [_copy_unit(u, f"leap{j}.phi{i}", trainable=True)
                 for i, u in enumerate(sources)]
    phi_double = [_copy_unit(u, f"leap{j}.ema{i}", trainable=False)
                  for i, u in enumerate(sources)]
    ema_count = math.ceil(p * j / K)
    return LeapReplicaPair(j, sources, phi_prime, phi_double, r, ema_count)


def resync_replicas(pair: LeapReplicaPair, reseed_ema: bool = False) -> None:
    """Re-copy phi' values from the live source units (phi'' too if asked)."""
    targets = [pair.phi_prime] if not reseed_ema else [pair.phi_prime, pair.phi_double]
    for group in targets:
        for src, dst in zip(pair.sources, group):
            for sp, dp in zip(src.parameters(), dst.parameters()):
                np.copyto(dp.data, sp.data)


def warmup_batch_stats(backbone: Backbone, x: np.ndarray) -> None:
    """One statistics-only training-mode forward, for evaluating untrained nets."""
    backbone.forward(Tensor(x), training=True, update_stats=True)
