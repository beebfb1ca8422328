"""The five training rules: end-to-end BP, greedy local, multilaminar,
leap-augmented, and the full combined method, plus the epoch loop and
evaluation.

Gradient isolation is structural: every pathway (a module with its head, or
a cascade window with its head) runs on its own tape, reading stored
boundary tensors that are graph leaves. Two learning rates are realized
with one optimizer by scaling cascade-loss backward seeds by eta_c/eta_d,
so all supervision terms accumulate into one gradient buffer before the
single Nesterov step — the simultaneous-update semantics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .analysis import ActivationMeter, MetricsRecorder
from .errors import ConfigError, DataError, TrainingDiverged
from .network import (Backbone, attach_cascade_groups, attach_independent_heads,
                      build_leap_replicas, partition, resync_replicas)
from .optim import OptimizerConfig, SGDNesterov, cosine_annealing_lr
from .rng import named_stream
from .tensor import Graph, Tensor

MODES = ("bp", "greedy_local", "mlm_only", "lam_only", "mlaan")
MLAAN_RULES = ("literal_eq11", "ema_teacher")


@dataclass
class TrainerMode:
    kind: str = "mlaan"
    k: int = 3
    p: int = 2
    r: float = 0.99
    mlaan_rule: str = "ema_teacher"
    sync_period: int = 0  # 0: every epoch, -1: never, n>0: every n optimizer steps

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown trainer mode {self.kind!r}")
        if self.mlaan_rule not in MLAAN_RULES:
            raise ConfigError(f"unknown mlaan_rule {self.mlaan_rule!r}")
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"EMA rate r must be in (0,1), got {self.r}")
        if self.p < 0:
            raise ConfigError(f"p must be >= 0, got {self.p}")


@dataclass
class StepReport:
    independent: dict
    cascaded: dict
    final_loss: float
    lr_now: float
    peak_elements: int


def _leap_combined_update(theta, lam, grad, eta: float, r: float):
    """theta - r*lam - (2-r)*eta*grad, the shared arithmetic for both
    spellings of the combined leap update. Keeping one canonical expression
    is what makes the two entry points bitwise-identical; the expanded
    two-term spelling is algebraically equal but not floating-point equal."""
    return theta - r * lam - (2.0 - r) * eta * grad


def eq10_update(theta, lam, grad, eta: float, r: float):
    return _leap_combined_update(theta, lam, grad, eta, r)


def eq11_update(theta, lam, grad, eta: float, r: float):
    return _leap_combined_update(theta, lam, grad, eta, r)


def evaluate(backbone: Backbone, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> dict:
    """Argmax classification error over the full set; mutates nothing."""
    n = len(x)
    if n == 0:
        raise DataError("evaluate called on an empty dataset")
    preds = np.empty(n, dtype=np.int64)
    for at in range(0, n, batch_size):
        chunk = x[at:at + batch_size]
        logits = backbone.forward(Tensor(chunk), training=False).data
        preds[at:at + len(chunk)] = logits.argmax(axis=1)
    wrong = preds != y
    per_class = {}
    for c in np.unique(y):
        mask = y == c
        per_class[int(c)] = float((preds[mask] == c).mean())
    return {"test_error": float(wrong.mean()), "per_class_accuracy": per_class}


class Trainer:
    def __init__(self, backbone: Backbone, K: int, mode: TrainerMode,
                 opt_cfg: OptimizerConfig, seed: int):
        self.backbone = backbone
        self.mode = mode
        self.opt_cfg = opt_cfg
        self.seed = seed
        self.sizes, self.modules = partition(backbone, K)
        self.K = K
        classes = backbone.cfg.classes
        self.cascade_seed = opt_cfg.cascade_scale()

        self.heads = {}
        self.cascades = []
        self.pairs = {}
        local = mode.kind != "bp"
        if local and K > 1:
            self.heads = attach_independent_heads(self.modules, classes, seed)
        if mode.kind in ("mlm_only", "mlaan") and self.cascade_seed != 0.0:
            self.cascades = attach_cascade_groups(self.modules, mode.k, classes, seed)
        if mode.kind == "lam_only" and mode.p > 0:
            for m in self.modules[:-1]:
                avail = sum(len(mm.units) for mm in self.modules[m.index:])
                if avail:
                    self.pairs[m.index] = build_leap_replicas(
                        self.modules, m.index, min(mode.p, avail), mode.r)
        if mode.kind == "mlaan" and mode.p > 0:
            for group in self.cascades:
                s = group.last.index
                if s >= K:
                    continue
                avail = sum(len(mm.units) for mm in self.modules[s:])
                if avail:
                    group.pair = build_leap_replicas(
                        self.modules, s, min(mode.p, avail), mode.r)
                    self.pairs[s] = group.pair

        params = list(backbone.parameters())
        for j in sorted(self.heads):
            params += self.heads[j].parameters()
        for group in self.cascades:
            if group.head is not None:
                params += group.head.parameters()
        for j in sorted(self.pairs):
            params += self.pairs[j].parameters()
        self.all_params = params
        self.optimizer = SGDNesterov(params, opt_cfg)

        self.meter = ActivationMeter()
        self.shuffle_gen = named_stream(seed, "data/shuffle")
        self.step_index = 0
        self.total_steps = opt_cfg.total_steps
        self.last_accum_counts = {}
        self._eq11_buffers = {}

    # ------------------------------------------------------------------
    # single step
    # ------------------------------------------------------------------

    def step(self, bx: np.ndarray, by: np.ndarray, lr_now: float) -> StepReport:
        self.meter.begin_step()
        if self.mode.kind == "bp":
            return self._step_bp(bx, by, lr_now)
        return self._step_local(bx, by, lr_now)

    def _abort(self, kind: str, value: float):
        self.optimizer.zero_grad()
        self._eq11_buffers.clear()
        raise TrainingDiverged(
            f"non-finite {kind} loss ({value}) at optimizer step {self.step_index}")

    def _step_bp(self, bx, by, lr_now) -> StepReport:
        with Graph("bp", meter=self.meter) as g:
            logits = self.backbone.forward(Tensor(bx), training=True)
            loss = ops.softmax_cross_entropy(logits, by)
            value = float(loss.data)
            if not np.isfinite(value):
                g.release()
                self._abort("global", value)
            g.backward(loss)
            g.release()
        self._snapshot_counters()
        self.optimizer.step(lr_now)
        return StepReport({}, {}, value, lr_now, self.meter.step_peak)

    def _step_local(self, bx, by, lr_now) -> StepReport:
        mode = self.mode
        boundaries = [Tensor(bx)]
        self.meter.on_retain(boundaries[0].size, ("boundary0", "main"))
        ind_losses = {}
        casc_losses = {}
        try:
            for m in self.modules:
                j = m.index
                with Graph(f"module{j}", meter=self.meter) as g:
                    g.section = "main"
                    feats = m.forward_body(boundaries[-1], training=True, update_stats=True)
                    if m.tail is not None:
                        logits = m.finish(feats)
                    else:
                        g.section = "aux"
                        h = feats
                        if mode.kind == "lam_only" and j in self.pairs:
                            h = self.pairs[j].apply(h)
                        logits = self.heads[j](h)
                    loss = ops.softmax_cross_entropy(logits, by)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        g.release()
                        self._abort(f"module {j}", value)
                    g.backward(loss)
                    g.release()
                ind_losses[j] = value
                if j < self.K:
                    nxt = Tensor(feats.data)
                    boundaries.append(nxt)
                    self.meter.on_retain(nxt.size, (f"boundary{j}", "main"))

            for group in self.cascades:
                with Graph(f"cascade{group.start}", meter=self.meter) as g:
                    g.section = "main"
                    h = boundaries[group.start - 1]
                    for m in group.members:
                        h = m.forward_body(h, training=True, update_stats=False)
                    if group.last.tail is not None:
                        logits = group.last.finish(h)
                    else:
                        g.section = "aux"
                        if group.pair is not None:
                            h = group.pair.apply(h)
                        logits = group.head(h)
                    loss = ops.softmax_cross_entropy(logits, by)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        g.release()
                        self._abort(f"cascade {group.start}", value)
                    self._backward_cascade(g, loss, group)
                    g.release()
                casc_losses[group.start] = value
        finally:
            for i, b in enumerate(boundaries):
                self.meter.on_release(b.size, (f"boundary{i}", "main"))

        self._snapshot_counters()
        self.optimizer.step(lr_now)
        self._apply_literal_rule(lr_now)
        for j in sorted(self.pairs):
            self.pairs[j].ema_step()
        return StepReport(ind_losses, casc_losses, ind_losses[self.K], lr_now,
                          self.meter.step_peak)

    def _backward_cascade(self, g: Graph, loss, group) -> None:
        """Backward one cascade loss at the cascaded rate. Under the literal
        combined rule, the final member's gradient share is diverted into a
        separate buffer so it can be applied by the closed-form update."""
        literal = (self.mode.kind == "mlaan"
                   and self.mode.mlaan_rule == "literal_eq11"
                   and group.pair is not None)
        if not literal:
            g.backward(loss, seed=self.cascade_seed)
            return
        last_params = group.last.parameters()
        before = [p.grad.copy() for p in last_params]
        g.backward(loss, seed=self.cascade_seed)
        bufs = self._eq11_buffers.setdefault(
            group.last.index, [np.zeros_like(p.grad) for p in last_params])
        for p, snap, buf in zip(last_params, before, bufs):
            buf += (p.grad - snap) / self.cascade_seed
            p.grad[...] = snap

    def _apply_literal_rule(self, lr_now: float) -> None:
        if not self._eq11_buffers:
            return
        for s, bufs in self._eq11_buffers.items():
            pair = self.pairs[s]
            lam = np.concatenate([p.data.reshape(-1)
                                  for unit in pair.phi_double
                                  for p in unit.parameters()])
            params = self.modules[s - 1].parameters()
            offset = 0
            for p, grad in zip(params, bufs):
                n = p.data.size
                piece = lam[offset:offset + n]
                if piece.size < n:
                    piece = np.concatenate(
                        [piece, np.zeros(n - piece.size, dtype=lam.dtype)])
                offset += n
                p.data = eq11_update(p.data, piece.reshape(p.data.shape).astype(p.data.dtype),
                                     grad, lr_now, self.mode.r)
        self._eq11_buffers = {}

    def _snapshot_counters(self) -> None:
        self.last_accum_counts = {p.name: p.accum_count for p in self.all_params}

    def _resync_all(self) -> None:
        for j in sorted(self.pairs):
            resync_replicas(self.pairs[j])

    # ------------------------------------------------------------------
    # epoch loop
    # ------------------------------------------------------------------

    def fit(self, data, epochs: int, batch_size: int,
            recorder: Optional[MetricsRecorder] = None,
            start_epoch: int = 0, wall_offset: float = 0.0,
            on_epoch_end=None) -> MetricsRecorder:
        recorder = recorder if recorder is not None else MetricsRecorder()
        if epochs == 0:
            return recorder
        n = len(data.train_x)
        if n < 2:
            raise DataError("need at least 2 training samples")
        steps_per_epoch = max(1, n // batch_size)
        self.total_steps = epochs * steps_per_epoch
        t0 = time.perf_counter()
        diverged_streak = 0
        for epoch in range(start_epoch, epochs):
            if self.mode.sync_period == 0:
                self._resync_all()
            perm = self.shuffle_gen.permutation(n)
            losses = []
            peak = 0
            lr_now = self.opt_cfg.lr
            for b in range(steps_per_epoch):
                if (self.mode.sync_period > 0 and self.step_index > 0
                        and self.step_index % self.mode.sync_period == 0):
                    self._resync_all()
                idx = perm[b * batch_size:(b + 1) * batch_size]
                if len(idx) < 2:
                    idx = perm[:max(2, len(perm))]
                lr_now = cosine_annealing_lr(
                    self.step_index, self.opt_cfg.lr, self.opt_cfg.min_lr, self.total_steps)
                try:
                    report = self.step(data.train_x[idx], data.train_y[idx], lr_now)
                except TrainingDiverged:
                    diverged_streak += 1
                    if diverged_streak >= 3:
                        raise
                    continue
                finally:
                    self.step_index += 1
                diverged_streak = 0
                losses.append(report.final_loss)
                peak = max(peak, report.peak_elements)
            result = evaluate(self.backbone, data.test_x, data.test_y,
                              batch_size=max(batch_size, 256))
            recorder.append(epoch + 1,
                            float(np.mean(losses)) if losses else float("nan"),
                            result["test_error"], lr_now, peak,
                            wall_offset + (time.perf_counter() - t0))
            if on_epoch_end is not None:
                on_epoch_end(self, epoch, recorder)
        return recorder

    def evaluate(self, data) -> dict:
        return evaluate(self.backbone, data.test_x, data.test_y)
