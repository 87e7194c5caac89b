"""Tiny encoder-decoder segmentation network with configurable MoE slots.

Layout (input [N, 3, H, W], H and W divisible by 4):

    enc1:  3x3 conv stride 2,  3 -> 16, ReLU
    enc2:  3x3 conv stride 2, 16 -> 32, ReLU
    bridge: 3x3 conv,         32 -> 32, ReLU
    dec1:  2x nearest upsample + 3x3 conv, 32 -> 16, ReLU
    dec2:  2x nearest upsample + 3x3 conv, 16 -> 16, ReLU
    classifier: 1x1 conv, 16 -> n_classes

Any stride-1 slot (bridge, dec1, dec2, classifier) can be replaced by a
PatchConvMoE layer; the default placement is dec2, the last 3x3 conv in
the decoder. The stride-2 encoder convs cannot be patch-routed because
patch boundaries would not tile the strided output.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import ConfigError, DataError
from .moe import MoEConfig, PatchConvMoE, _he_conv
from .tensor import (
    Parameter,
    Tensor,
    _accum,
    _from_op,
    conv2d,
    pad2d,
    relu,
    upsample_nearest2,
)

SLOTS = ("enc1", "enc2", "bridge", "dec1", "dec2", "classifier")
MOE_SLOTS = ("bridge", "dec1", "dec2", "classifier")

# slot -> (in_channels, out_channels, kernel, stride)
_SLOT_SHAPES = {
    "enc1": (3, 16, 3, 2),
    "enc2": (16, 32, 3, 2),
    "bridge": (32, 32, 3, 1),
    "dec1": (32, 16, 3, 1),
    "dec2": (16, 16, 3, 1),
}


class ConvLayer:
    def __init__(self, c_in, c_out, kernel, stride, rng):
        self.kernel = kernel
        self.stride = stride
        self.weight = _he_conv(rng, c_out, c_in, kernel)
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        if self.stride == 2:
            # Halve even spatial dims exactly: pad top/left only, then a
            # padding-0 strided conv (floor-mode "same" downsampling).
            return conv2d(pad2d(x, 1, 0, 1, 0), self.weight, self.bias, 2, 0)
        return conv2d(x, self.weight, self.bias, self.stride, self.kernel // 2)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class TinySegModel:
    def __init__(self, n_classes=4, moe: MoEConfig | None = None, moe_slots=("dec2",), seed=0):
        if n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        self.n_classes = n_classes
        self.moe_slots = tuple(moe_slots) if moe is not None else ()
        for slot in self.moe_slots:
            if slot not in MOE_SLOTS:
                raise ConfigError(
                    f"MoE placement {slot!r} unsupported; choose from {MOE_SLOTS}"
                )
        rng = np.random.default_rng(seed)
        shapes = dict(_SLOT_SHAPES)
        shapes["classifier"] = (16, n_classes, 1, 1)
        self.layers = {}
        for slot in SLOTS:
            c_in, c_out, kernel, stride = shapes[slot]
            if slot in self.moe_slots:
                cfg = replace(
                    moe, in_channels=c_in, out_channels=c_out, expert_kernel=kernel
                )
                self.layers[slot] = PatchConvMoE(cfg, rng)
            else:
                self.layers[slot] = ConvLayer(c_in, c_out, kernel, stride, rng)

    def _apply(self, slot, x, decisions):
        layer = self.layers[slot]
        if isinstance(layer, PatchConvMoE):
            out, dec = layer.forward(x)
            decisions.extend(dec)
            return out
        return layer.forward(x)

    def forward(self, image: Tensor):
        """Returns (logits [N, n_classes, H, W], routing decisions)."""
        _, c, h, w = image.shape
        if c != 3:
            raise ConfigError("expected a 3-channel image")
        if h % 4 or w % 4:
            raise ConfigError("image dimensions must be divisible by 4")
        decisions = []
        x = relu(self._apply("enc1", image, decisions))
        x = relu(self._apply("enc2", x, decisions))
        x = relu(self._apply("bridge", x, decisions))
        x = relu(self._apply("dec1", upsample_nearest2(x), decisions))
        x = relu(self._apply("dec2", upsample_nearest2(x), decisions))
        logits = self._apply("classifier", x, decisions)
        return logits, decisions

    def parameters(self):
        out = {}
        for slot in SLOTS:
            for name, p in self.layers[slot].parameters().items():
                out[f"{slot}.{name}"] = p
        return out

    def moe_layers(self):
        return [self.layers[s] for s in self.moe_slots]

    def slot_scale(self, slot):
        """Image pixels per feature-map cell at the slot's input."""
        return {"bridge": 4, "dec1": 2, "dec2": 1, "classifier": 1}[slot]


def pixel_cross_entropy(logits: Tensor, mask) -> Tensor:
    """Mean over pixels of -ln softmax(logits)[true class]."""
    mask = np.asarray(mask)
    n, c, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ConfigError(f"mask shape {mask.shape} does not match logits {(n, h, w)}")
    if mask.min() < 0 or mask.max() >= c:
        raise DataError("mask contains class ids outside [0, n_classes)")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sum_e = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sum_e[:, 0])  # [N, H, W]
    ii, hh, ww = np.ogrid[0:n, 0:h, 0:w]
    true_logit = z[ii, mask, hh, ww]
    npix = n * h * w
    loss = (lse - true_logit).sum() / npix

    def backward(g):
        p = e / sum_e
        p[ii, mask, hh, ww] -= 1.0
        _accum(logits, (float(g) / npix) * p)

    return _from_op(loss, (logits,), backward)


def miou(pred, mask, n_classes):
    """Mean IoU over the classes present in pred or mask."""
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    if pred.shape != mask.shape:
        raise ConfigError("pred and mask shapes differ")
    if pred.size == 0:
        raise DataError("empty prediction")
    ious = []
    for cls in range(n_classes):
        p = pred == cls
        m = mask == cls
        union = np.logical_or(p, m).sum()
        if union:
            ious.append(np.logical_and(p, m).sum() / union)
    if not ious:
        raise DataError("no class has a nonzero union")
    return float(np.mean(ious))


def confusion_matrix(pred, mask, n_classes):
    idx = np.asarray(mask).ravel() * n_classes + np.asarray(pred).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(conf):
    """Aggregate mIoU from a summed confusion matrix (rows: truth)."""
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise DataError("no class has a nonzero union")
    return float((inter[present] / union[present]).mean())
