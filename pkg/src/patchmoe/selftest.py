"""Built-in correctness checks for the `selftest` CLI command.

Each check compares the library against an independent oracle (naive loop
convolution, finite differences, dense all-experts evaluation, direct
counting) and returns (name, passed, detail).
"""

from __future__ import annotations

import numpy as np

from .balance import GateBatch, entropy_loss, importance_loss, switch_loss
from .moe import MoEConfig, PatchConvMoE, top_k_select
from .patches import make_grid, reassemble, split
from .tensor import Tensor, conv2d, softmax


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Six-nested-loop convolution oracle."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for bi in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    xp[bi, ci, i * stride + u, j * stride + v]
                                    * w[co, ci, u, v]
                                )
                    out[bi, co, i, j] = acc
    return out


def dense_moe_oracle(f, layer: PatchConvMoE):
    """Evaluate every expert on every patch and zero-mask the unselected."""
    cfg = layer.config
    n_b, _, h, w = f.shape
    grid = make_grid(h, w, cfg.grid)
    halo = 1 if cfg.expert_kernel == 3 else 0
    fpad = np.pad(f, ((0, 0), (0, 0), (halo, halo), (halo, halo)))
    out = np.zeros((n_b, cfg.out_channels, h, w))
    for i, (r0, r1, c0, c1) in enumerate(grid.bounds):
        patch = Tensor(f[:, :, r0:r1, c0:c1])
        probs = layer.gate.forward(patch).data
        region = Tensor(fpad[:, :, r0 : r1 + 2 * halo, c0 : c1 + 2 * halo])
        expert_outs = [
            conv2d(region, e.weight, e.bias, 1, 0).data for e in layer.experts
        ]
        shared_outs = [
            conv2d(region, e.weight, e.bias, 1, 0).data for e in layer.shared
        ]
        for b in range(n_b):
            ids, wts = top_k_select(probs[b], cfg.top_k)
            cell = sum(wt * expert_outs[j][b] for j, wt in zip(ids, wts))
            for so in shared_outs:
                cell = cell + so[b]
            out[b, :, r0:r1, c0:c1] = cell
    return out


def _finite_diff(loss_fn, param, eps=1e-6):
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_conv_forward():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    want = naive_conv2d(x, w, b, 1, 1)
    err = np.abs(got - want).max()
    return err < 1e-10, f"max abs err {err:.2e}"


def check_conv_gradient():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)

    def loss_value():
        out = conv2d(x, Tensor(w.data), Tensor(b.data), 1, 1)
        return float((out.data ** 2).sum())

    out = conv2d(x, w, b, 1, 1)
    (out * out).sum().backward()
    for p in (w, b):
        fd = _finite_diff(lambda: loss_value(), p)
        rel = np.abs(p.grad - fd).max() / max(np.abs(fd).max(), 1e-12)
        if rel > 1e-4:
            return False, f"conv gradient check: relative error {rel:.2e}"
    return True, "conv weight/bias gradients match finite differences"


def check_dense_equivalence():
    rng = np.random.default_rng(13)
    cfg = MoEConfig(
        n_experts=4, top_k=2, grid=3, gate_kind="2conv", gate_hidden=4,
        in_channels=3, out_channels=2,
    )
    layer = PatchConvMoE(cfg, rng)
    f = rng.normal(size=(2, 3, 9, 9))
    got, _ = layer.forward(Tensor(f))
    want = dense_moe_oracle(f, layer)
    err = np.abs(got.data - want).max()
    return err < 1e-10, f"max abs err {err:.2e}"


def check_patch_roundtrip():
    rng = np.random.default_rng(14)
    for h, w, g in [(6, 6, 3), (7, 5, 3), (9, 13, 4), (8, 8, 1), (5, 5, 5)]:
        f = Tensor(rng.normal(size=(1, 2, h, w)))
        patches, grid = split(f, g)
        back = reassemble(patches, grid)
        if not np.array_equal(back.data, f.data):
            return False, f"roundtrip mismatch at ({h}, {w}, g={g})"
    return True, "split/reassemble bit-exact on the sweep"


def check_loss_anchors():
    n = 4
    uniform = Tensor(np.full((8, n), 1.0 / n))
    assign = [[j, (j + 1) % n] for j in range(n)] * 2
    batch = GateBatch(probs=uniform, assignments=assign)
    checks = [
        (abs(importance_loss(batch).item()) < 1e-10, "importance at uniform"),
        (abs(switch_loss(batch).item() - 1.0) < 1e-10, "switch at uniform"),
        (abs(entropy_loss(batch).item()) < 1e-10, "entropy at uniform"),
    ]
    hot = np.zeros((8, n))
    hot[:, 0] = 1.0
    collapsed = GateBatch(probs=Tensor(hot), assignments=[[0]] * 8)
    checks.append((abs(switch_loss(collapsed).item() - n) < 1e-10, "switch at collapse"))
    checks.append(
        (abs(entropy_loss(collapsed).item() - np.log(n)) < 1e-10, "entropy at collapse")
    )
    failed = [name for ok, name in checks if not ok]
    return not failed, "all anchors hit" if not failed else f"failed: {failed}"


def check_softmax_topk():
    s = softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
    want = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    if np.abs(s - want).max() > 1e-12:
        return False, "softmax value mismatch"
    ids, wts = top_k_select(np.array([0.1, 0.6, 0.3]), 2)
    if ids != [1, 2] or abs(wts[0] - 0.6) > 1e-15:
        return False, "top-k selection mismatch"
    ids, _ = top_k_select(np.full(4, 0.25), 2)
    return ids == [0, 1], "tie-break by ascending index"


CHECKS = [
    ("conv-forward-oracle", check_conv_forward),
    ("conv-gradient-fd", check_conv_gradient),
    ("moe-dense-oracle", check_dense_equivalence),
    ("patch-roundtrip", check_patch_roundtrip),
    ("balancing-loss-anchors", check_loss_anchors),
    ("softmax-topk", check_softmax_topk),
]


def run_all():
    results = []
    for name, fn in CHECKS:
        ok, detail = fn()
        results.append((name, ok, detail))
    return results
