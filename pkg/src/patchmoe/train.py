"""Deterministic SGD training and evaluation loops.

Batches are assembled by shuffling sample indices with an xorshift64*
generator (documented fixed constants), so runs are reproducible from
(config, seed) alone, independent of any library RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import analytics
from .balance import LOSS_FNS, total_loss
from .errors import ConfigError, DivergenceError
from .model import (
    TinySegModel,
    confusion_matrix,
    miou_from_confusion,
    pixel_cross_entropy,
)
from .moe import MoEConfig
from .patches import make_grid
from .synth import make_dataset
from .tensor import Tensor, sgd_step


class Xorshift64Star:
    """xorshift64* PRNG: x ^= x>>12; x ^= x<<25; x ^= x>>27; out = x * M.

    M = 2685821657736338717 (Vigna's multiplier). The seed is passed
    through one splitmix64 round so that seed 0 is usable.
    """

    MULT = 2685821657736338717
    MASK = (1 << 64) - 1

    def __init__(self, seed):
        x = (int(seed) + 0x9E3779B97F4A7C15) & self.MASK
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & self.MASK
        self.state = (x ^ (x >> 31)) or 1

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x = (x ^ (x << 25)) & self.MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & self.MASK

    def randrange(self, n):
        return self.next_u64() % n

    def shuffle(self, items):
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-2
    momentum: float = 0.9
    seed: int = 7
    n_train: int = 256
    n_val: int = 64
    image_size: int = 64
    n_classes: int = 4
    moe: MoEConfig | None = field(default_factory=MoEConfig)
    moe_slots: tuple = ("dec2",)
    trace_every: int = 50
    gate_bias_init: float = 0.0  # added to the gate's expert-0 logit bias

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        if self.trace_every < 1:
            raise ConfigError("trace_every must be >= 1")
        if self.moe is not None:
            self.moe.validate()
        return self


@dataclass
class TrainResult:
    model: TinySegModel
    history: list
    val_samples: list


HISTORY_COLUMNS = ("epoch", "train_loss", "val_miou", "balance_loss", "nre", "tec")


def build_model(config: TrainConfig) -> TinySegModel:
    model = TinySegModel(
        n_classes=config.n_classes,
        moe=config.moe,
        moe_slots=config.moe_slots if config.moe is not None else (),
        seed=config.seed,
    )
    if config.gate_bias_init and config.moe is not None:
        for layer in model.moe_layers():
            layer.gate.biases[-1].data[0] += config.gate_bias_init
    return model


def _batches(indices, batch_size):
    for i in range(0, len(indices), batch_size):
        yield indices[i : i + batch_size]


def _stack_images(samples, idx):
    return Tensor(np.concatenate([samples[i].image.data for i in idx], axis=0))


def _stack_masks(samples, idx):
    return np.stack([samples[i].mask for i in idx], axis=0)


def _decision_fractions(model, config, decisions, masks):
    """Ground-truth class pixel fractions for each routing decision.

    model.forward emits decisions slot by slot; each MoE slot contributes
    one block of (batch items x patches) decisions.
    """
    fractions = []
    pos = 0
    h = w = config.image_size
    n_b = masks.shape[0]
    for slot in model.moe_slots:
        scale = model.slot_scale(slot)
        layer = model.layers[slot]
        grid = make_grid(h // scale, w // scale, layer.config.grid)
        block = decisions[pos : pos + n_b * len(grid.bounds)]
        pos += len(block)
        for d in block:
            r0, r1, c0, c1 = grid.bounds[d.patch_index]
            cells = masks[d.batch_index, r0 * scale : r1 * scale, c0 * scale : c1 * scale]
            fractions.append(
                np.bincount(cells.ravel(), minlength=config.n_classes) / cells.size
            )
    return fractions


def evaluate(model, samples, config: TrainConfig):
    """mIoU plus the aggregated routing trace; no parameter updates.

    Returns (miou, trace, records) where records are the per-decision
    trace lines (with class fractions) ready for serialization.
    """
    conf = np.zeros((config.n_classes, config.n_classes), dtype=np.int64)
    trace = analytics.RoutingTrace(
        n_experts=config.moe.n_experts if config.moe else 1,
        n_classes=config.n_classes,
    )
    records = []
    for step, idx in enumerate(_batches(list(range(len(samples))), config.batch_size)):
        images = _stack_images(samples, idx)
        masks = _stack_masks(samples, idx)
        logits, decisions = model.forward(images)
        pred = logits.data.argmax(axis=1)
        conf += confusion_matrix(pred, masks, config.n_classes)
        fractions = _decision_fractions(model, config, decisions, masks)
        for d, fr in zip(decisions, fractions):
            trace.add(d.expert_ids, fr)
            records.append((step, d, fr))
    return miou_from_confusion(conf), trace, records


def train(config: TrainConfig, trace_path=None) -> TrainResult:
    """Run the full training loop; deterministic given the config."""
    config.validate()
    train_samples = make_dataset(
        config.seed, config.n_train, config.image_size, config.image_size, config.n_classes
    )
    val_samples = make_dataset(
        config.seed,
        config.n_val,
        config.image_size,
        config.image_size,
        config.n_classes,
        validation=True,
    )
    model = build_model(config)
    params = list(model.parameters().values())
    shuffler = Xorshift64Star(config.seed)
    use_balance = config.moe is not None and config.moe.balance_loss != "none"
    trace_file = open(trace_path, "w") if trace_path else None

    history = []
    step = 0
    try:
        for epoch in range(config.epochs):
            order = list(range(config.n_train))
            shuffler.shuffle(order)
            task_losses = []
            balance_losses = []
            for idx in _batches(order, config.batch_size):
                images = _stack_images(train_samples, idx)
                masks = _stack_masks(train_samples, idx)
                logits, decisions = model.forward(images)
                task = pixel_cross_entropy(logits, masks)
                loss = task
                balance_value = 0.0
                if use_balance:
                    fn = LOSS_FNS[config.moe.balance_loss]
                    for layer in model.moe_layers():
                        bal = fn(layer.last_gate_batch)
                        balance_value += bal.item()
                        loss = total_loss(loss, bal, config.moe.loss_weight)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(step)
                loss.backward()
                sgd_step(params, config.lr, config.momentum)
                task_losses.append(task.item())
                balance_losses.append(balance_value)
                if trace_file is not None and step % config.trace_every == 0:
                    fractions = _decision_fractions(model, config, decisions, masks)
                    for d, fr in zip(decisions, fractions):
                        trace_file.write(analytics.format_trace_line(step, d, fr) + "\n")
                step += 1

            val_miou, trace, _ = evaluate(model, val_samples, config)
            has_routing = trace.n_decisions > 0
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": float(np.mean(task_losses)),
                    "val_miou": val_miou,
                    "balance_loss": float(np.mean(balance_losses)),
                    "nre": analytics.nre(trace.expert_counts) if has_routing else float("nan"),
                    "tec": analytics.tec(trace.expert_counts) if has_routing else float("nan"),
                }
            )
    finally:
        if trace_file is not None:
            trace_file.close()
    return TrainResult(model=model, history=history, val_samples=val_samples)


def write_history_csv(path, history):
    with open(path, "w") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            f.write(
                ",".join(
                    str(row["epoch"]) if col == "epoch" else repr(float(row[col]))
                    for col in HISTORY_COLUMNS
                )
                + "\n"
            )
