"""Patch-routed sparse mixture-of-experts convolutional layer.

The input feature map is split into a g x g grid of patches. A small
gating network (convolutions -> global average pooling -> softmax) scores
each patch over N convolutional experts; only the top-k experts run on
that patch and their outputs are combined with the raw gate probabilities
(no renormalization after selection). Optional shared experts run on every
patch with fixed weight 1 and are not routed.

3x3 experts see a one-pixel context ring taken from the surrounding map
(zeros at the map border), so a layer with a single expert is an exact
drop-in replacement for the 3x3 convolution it replaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balance import GateBatch
from .errors import ConfigError
from .patches import make_grid, reassemble
from .tensor import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    global_avg_pool,
    relu,
    scatter_rows,
    softmax,
    take_rows,
    zero_pad2d,
)

GATE_KINDS = ("conv", "2conv", "3conv")
BALANCE_LOSSES = ("none", "importance", "switch", "entropy")


@dataclass
class MoEConfig:
    """Full specification of one patch-routed MoE layer."""

    n_experts: int = 8
    top_k: int = 2
    grid: int = 3
    gate_kind: str = "2conv"
    gate_hidden: int = 16
    n_shared: int = 0
    expert_kernel: int = 3  # 1 or 3
    in_channels: int = 16
    out_channels: int = 16
    balance_loss: str = "entropy"
    loss_weight: float = 0.01

    def validate(self):
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.grid < 1:
            raise ConfigError("grid must be >= 1")
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.gate_kind!r}")
        if self.gate_hidden < 1:
            raise ConfigError("gate_hidden must be >= 1")
        if self.n_shared < 0:
            raise ConfigError("n_shared must be >= 0")
        if self.expert_kernel not in (1, 3):
            raise ConfigError("expert_kernel must be 1 or 3")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.balance_loss not in BALANCE_LOSSES:
            raise ConfigError(f"unknown balance loss {self.balance_loss!r}")
        if self.loss_weight < 0:
            raise ConfigError("loss_weight must be >= 0")
        return self


@dataclass
class RoutingDecision:
    """Top-k outcome for one (batch item, patch)."""

    batch_index: int
    patch_index: int
    expert_ids: list
    weights: np.ndarray  # gate probabilities of the selected experts
    full_probs: np.ndarray  # full length-N probability vector


def top_k_select(probs, k):
    """Indices and raw probabilities of the k largest entries.

    Ties break toward the lower index; ids come sorted by descending
    weight, then ascending index.
    """
    probs = np.asarray(probs)
    if not 1 <= k <= probs.shape[0]:
        raise ConfigError(f"top_k_select: k={k} out of range for N={probs.shape[0]}")
    order = np.argsort(-probs, kind="stable")[:k]
    return [int(i) for i in order], probs[order].copy()


def _he_conv(rng, c_out, c_in, k):
    std = np.sqrt(2.0 / (c_in * k * k))
    return Parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)))


class GateNetwork:
    """Conv-GAP gate: 3x3 conv stack -> global average pooling -> softmax."""

    def __init__(self, config: MoEConfig, rng):
        widths = {
            "conv": [config.in_channels, config.n_experts],
            "2conv": [config.in_channels, config.gate_hidden, config.n_experts],
            "3conv": [
                config.in_channels,
                config.gate_hidden,
                config.gate_hidden,
                config.n_experts,
            ],
        }[config.gate_kind]
        self.n_experts = config.n_experts
        self.in_channels = config.in_channels
        self.weights = []
        self.biases = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            self.weights.append(_he_conv(rng, c_out, c_in, 3))
            self.biases.append(Parameter(np.zeros(c_out)))

    def forward(self, patch: Tensor) -> Tensor:
        """Probability vector per batch item: [N_b, N], rows sum to 1."""
        if patch.shape[1] != self.in_channels:
            raise ConfigError(
                f"gate expects {self.in_channels} channels, got {patch.shape[1]}"
            )
        x = patch
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = conv2d(x, w, b, stride=1, padding=1)
            if i < last:
                x = relu(x)
        pooled = global_avg_pool(x)
        logits = pooled.reshape((patch.shape[0], self.n_experts))
        return softmax(logits, axis=-1)

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        return out


class ConvExpert:
    """A single convolutional expert (1x1 or 3x3, stride 1).

    `calls` counts (batch item, patch) evaluations, which makes conditional
    computation directly observable in tests.
    """

    def __init__(self, in_channels, out_channels, kernel, rng):
        self.kernel = kernel
        self.weight = _he_conv(rng, out_channels, in_channels, kernel)
        self.bias = Parameter(np.zeros(out_channels))
        self.calls = 0

    def apply(self, region: Tensor, n_items: int) -> Tensor:
        self.calls += n_items
        return conv2d(region, self.weight, self.bias, stride=1, padding=0)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def _forward(f, config, gate, experts, shared):
    config.validate()
    if len(experts) != config.n_experts:
        raise ConfigError("expert list length does not match config.n_experts")
    if f.shape[1] != config.in_channels:
        raise ConfigError(
            f"moe_forward expects {config.in_channels} channels, got {f.shape[1]}"
        )
    n_b, _, h, w = f.shape
    grid = make_grid(h, w, config.grid)
    halo = 1 if config.expert_kernel == 3 else 0
    fpad = zero_pad2d(f, halo)

    gate_rows = []
    assignments = []
    decisions = []
    out_patches = []
    for i, (r0, r1, c0, c1) in enumerate(grid.bounds):
        patch = f[:, :, r0:r1, c0:c1]
        probs = gate.forward(patch)
        gate_rows.append(probs)

        selected = {}  # expert id -> batch items routed to it on this patch
        for b in range(n_b):
            ids, wts = top_k_select(probs.data[b], config.top_k)
            decisions.append(
                RoutingDecision(b, i, ids, wts, probs.data[b].copy())
            )
            assignments.append(ids)
            for j in ids:
                selected.setdefault(j, []).append(b)

        # Context region from the zero-padded map; with padding=0 the conv
        # output is exactly patch-sized and matches the undivided conv.
        region = fpad[:, :, r0 : r1 + 2 * halo, c0 : c1 + 2 * halo]
        acc = None
        for j in sorted(selected):
            items = selected[j]
            if len(items) == n_b:
                out = experts[j].apply(region, n_b)
                wvec = probs[:, j]
            else:
                out = experts[j].apply(take_rows(region, items), len(items))
                wvec = take_rows(probs, items)[:, j]
            weighted = out * wvec.reshape((len(items), 1, 1, 1))
            if len(items) < n_b:
                weighted = scatter_rows(weighted, items, n_b)
            acc = weighted if acc is None else acc + weighted
        for s in shared:
            contrib = s.apply(region, n_b)
            acc = contrib if acc is None else acc + contrib
        out_patches.append(acc)

    out = reassemble(out_patches, grid, config.out_channels)
    decisions.sort(key=lambda d: (d.batch_index, d.patch_index))
    batch = GateBatch(probs=concat(gate_rows, axis=0), assignments=assignments)
    return out, decisions, batch


def moe_forward(f, config, gate, experts, shared=()):
    """Route f through the patch-level MoE; returns (f', routing decisions)."""
    out, decisions, _ = _forward(f, config, gate, experts, shared)
    return out, decisions


class PatchConvMoE:
    """Stateful wrapper tying a config to its gate and expert parameters."""

    def __init__(self, config: MoEConfig, rng):
        self.config = config.validate()
        self.gate = GateNetwork(config, rng)
        self.experts = [
            ConvExpert(config.in_channels, config.out_channels, config.expert_kernel, rng)
            for _ in range(config.n_experts)
        ]
        self.shared = [
            ConvExpert(config.in_channels, config.out_channels, config.expert_kernel, rng)
            for _ in range(config.n_shared)
        ]
        self.last_gate_batch = None

    def forward(self, f):
        out, decisions, batch = _forward(
            f, self.config, self.gate, self.experts, self.shared
        )
        self.last_gate_batch = batch
        return out, decisions

    def parameters(self):
        out = {}
        for name, p in self.gate.parameters().items():
            out[f"gate.{name}"] = p
        for i, e in enumerate(self.experts):
            for name, p in e.parameters().items():
                out[f"expert{i}.{name}"] = p
        for i, e in enumerate(self.shared):
            for name, p in e.parameters().items():
                out[f"shared{i}.{name}"] = p
        return out

    def reset_call_counts(self):
        for e in self.experts + self.shared:
            e.calls = 0


def _gate_layer_shapes(config):
    widths = {
        "conv": [config.in_channels, config.n_experts],
        "2conv": [config.in_channels, config.gate_hidden, config.n_experts],
        "3conv": [
            config.in_channels,
            config.gate_hidden,
            config.gate_hidden,
            config.n_experts,
        ],
    }[config.gate_kind]
    return list(zip(widths[:-1], widths[1:]))


def count_parameters(config: MoEConfig):
    """(total, active) parameter counts of one MoE layer.

    total counts every allocated expert; active counts the gate, the k
    experts that run per patch, and all shared experts.
    """
    config.validate()
    gate = sum(c_out * c_in * 9 + c_out for c_in, c_out in _gate_layer_shapes(config))
    expert = (
        config.out_channels * config.in_channels * config.expert_kernel**2
        + config.out_channels
    )
    total = gate + (config.n_experts + config.n_shared) * expert
    active = gate + (config.top_k + config.n_shared) * expert
    return total, active


def estimate_flops(config: MoEConfig, h, w):
    """(total, active) FLOP estimates for one forward pass on an h x w map.

    Counts convolution multiply-accumulates only (gate over all patches,
    plus N experts per patch for total / k per patch for active, plus
    shared experts), at 2 FLOPs per MAC. Matches the conv2d MAC counter.
    """
    config.validate()
    grid = make_grid(h, w, config.grid)
    gate_macs = 0
    expert_macs_one = 0
    kk = config.expert_kernel**2
    for r0, r1, c0, c1 in grid.bounds:
        px = (r1 - r0) * (c1 - c0)
        gate_macs += sum(
            px * c_out * c_in * 9 for c_in, c_out in _gate_layer_shapes(config)
        )
        expert_macs_one += px * config.out_channels * config.in_channels * kk
    total = gate_macs + (config.n_experts + config.n_shared) * expert_macs_one
    active = gate_macs + (config.top_k + config.n_shared) * expert_macs_one
    return 2 * total, 2 * active
