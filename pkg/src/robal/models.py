"""Desk-scale backbones, the full network and the inference-time classifier wrapper."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from robal import autodiff as ad
from robal.autodiff import Tensor
from robal.errors import ShapeMismatchError
from robal.heads import (ClassStats, CosineHead, LinearHead, PostHocRule, argmax_predict,
                         posthoc_logits)


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True)


class MLP:
    """Flatten, then ``hidden`` fully connected ReLU layers.  No layers means identity features."""

    def __init__(self, input_shape, hidden=(64, 64), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.input_shape = tuple(input_shape)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [int(np.prod(self.input_shape)), *self.hidden]
        self.layers = [(_he(rng, (o, i), i), Tensor(np.zeros(o), requires_grad=True))
                       for i, o in zip(sizes[:-1], sizes[1:])]
        self.feature_dim = sizes[-1]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        h = x.reshape(x.shape[0], -1)
        for W, b in self.layers:
            h = ad.relu(h @ W.T + b)
        return h

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for k, (W, b) in enumerate(self.layers):
            params[f"{k}.W"] = W
            params[f"{k}.b"] = b
        return params

    def descriptor(self) -> dict:
        return {"arch": "mlp", "input_shape": list(self.input_shape), "hidden": list(self.hidden)}


class ConvNet:
    """conv3x3 -> relu -> conv3x3 -> relu -> avgpool2 -> dense -> relu.

    Flat inputs are viewed as ``image_shape`` (channels, height, width).
    """

    def __init__(self, image_shape, channels=(8, 16), feature_dim: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.image_shape = tuple(int(v) for v in image_shape)
        if len(self.image_shape) != 3:
            raise ValueError("image_shape must be (channels, height, width)")
        c, h, w = self.image_shape
        c1, c2 = channels
        self.channels = (int(c1), int(c2))
        self.k1 = _he(rng, (c1, c, 3, 3), c * 9)
        self.b1 = Tensor(np.zeros(c1), requires_grad=True)
        self.k2 = _he(rng, (c2, c1, 3, 3), c1 * 9)
        self.b2 = Tensor(np.zeros(c2), requires_grad=True)
        flat = c2 * (h // 2) * (w // 2)
        if flat == 0:
            raise ValueError(f"image {self.image_shape} too small for pooling")
        self.Wd = _he(rng, (feature_dim, flat), flat)
        self.bd = Tensor(np.zeros(feature_dim), requires_grad=True)
        self.feature_dim = int(feature_dim)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        x = x.reshape((x.shape[0], *self.image_shape))
        h = ad.relu(ad.conv2d(x, self.k1, self.b1, pad=1))
        h = ad.relu(ad.conv2d(h, self.k2, self.b2, pad=1))
        h = ad.avg_pool2d(h, 2)
        h = h.reshape(h.shape[0], -1)
        return ad.relu(h @ self.Wd.T + self.bd)

    def parameters(self) -> dict[str, Tensor]:
        return {"k1": self.k1, "b1": self.b1, "k2": self.k2, "b2": self.b2,
                "Wd": self.Wd, "bd": self.bd}

    def descriptor(self) -> dict:
        return {"arch": "conv", "image_shape": list(self.image_shape),
                "channels": list(self.channels), "feature_dim": self.feature_dim}


def build_backbone(desc: dict, rng: np.random.Generator | None = None):
    arch = desc.get("arch")
    if arch == "mlp":
        return MLP(desc["input_shape"], desc.get("hidden", (64, 64)), rng)
    if arch == "conv":
        return ConvNet(desc["image_shape"], desc.get("channels", (8, 16)),
                       desc.get("feature_dim", 64), rng)
    raise ValueError(f"unknown backbone architecture {arch!r}")


def build_head(cfg: dict, feature_dim: int, num_classes: int, rng: np.random.Generator):
    W = Tensor(rng.standard_normal((num_classes, feature_dim)) / np.sqrt(feature_dim),
               requires_grad=True)
    kind = cfg.get("kind", "linear")
    if kind == "linear":
        b = Tensor(np.zeros(num_classes), requires_grad=True) if cfg.get("bias", True) else None
        return LinearHead(W, b)
    if kind == "cosine":
        return CosineHead(W, s=float(cfg.get("s", 10.0)), gamma=float(cfg.get("gamma", 0.0)))
    raise ValueError(f"unknown head kind {kind!r}")


class Network:
    """Backbone producing features ``f(x)`` followed by a classifier head."""

    def __init__(self, backbone, head):
        self.backbone = backbone
        self.head = head

    @classmethod
    def create(cls, backbone_desc: dict, head_cfg: dict, num_classes: int, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        backbone = build_backbone(backbone_desc, rng)
        return cls(backbone, build_head(head_cfg, backbone.feature_dim, num_classes, rng))

    def features(self, x) -> Tensor:
        return self.backbone(x)

    def __call__(self, x) -> Tensor:
        return self.head(self.features(x))

    def parameters(self) -> dict[str, Tensor]:
        params = {f"backbone.{k}": v for k, v in self.backbone.parameters().items()}
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def descriptor(self) -> dict:
        return {"backbone": self.backbone.descriptor(), "head": self.head.config(),
                "num_classes": int(self.head.W.shape[0])}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "head.scales" in arrays and self.head.scales is None:
            self.head.scales = Tensor(np.ones(self.head.W.shape[0]), requires_grad=True)
        params = self.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise ShapeMismatchError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: checkpoint shape {arrays[name].shape} != model {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


@dataclass(eq=False)
class Classifier:
    """Inference view of a network: posthoc rule plus an optional uniform logit scale.

    ``logit_scale`` multiplies the final logits, which is how the classifier
    re-scaling diagnostic divides the head by ``10**kappa``.
    """

    network: Network
    stats: ClassStats
    rule: PostHocRule = field(default_factory=PostHocRule)
    logit_scale: float = 1.0

    def __call__(self, x) -> Tensor:
        z = posthoc_logits(self.rule, self.network.head, self.network.features(x), self.stats)
        return z if self.logit_scale == 1.0 else ad.scale(z, self.logit_scale)

    def features(self, x) -> Tensor:
        return self.network.features(x)

    def predict(self, x) -> np.ndarray:
        return argmax_predict(self(x))
