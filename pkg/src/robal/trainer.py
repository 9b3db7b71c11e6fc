"""Standard / adversarial training loops, classifier fine-tuning and RBCK checkpoints."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from itertools import islice
from pathlib import Path
from typing import Callable

import numpy as np

from robal import autodiff as ad
from robal.attacks import AttackBudget, pgd
from robal.data import LabeledDataset, class_aware_batches, plain_batches
from robal.errors import (BadMagicError, ChecksumError, ShapeMismatchError, TruncatedError,
                          VersionError)
from robal.heads import (ClassStats, CosineHead, MarginSpec, argmax_predict, cross_entropy,
                         focal_bce_loss, reweight_factor, robal_margin_matrix, robal_total_loss,
                         table1_train_logits, TABLE1_DEFAULTS)
from robal.models import Network

LOSS_METHODS = ("ce", "class-aware-margin", "cosine-with-margin", "class-aware-temperature",
                "class-aware-bias", "focal", "robal")
MODES = ("inner", "outer", "both")
FINETUNE_METHODS = ("resample", "reweight", "lws")


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimState,
             no_decay=()) -> None:
    """In-place SGD with momentum and decoupled-from-nothing (L2) weight decay.

    ``v <- m v + (g + wd p)``; ``p <- p - lr v``.
    """
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if name not in no_decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.buffers.get(name)
        v = g if v is None else state.momentum * v + g
        state.buffers[name] = v
        p.data = p.data - state.lr * v


def lr_schedule(epoch: int, cfg: "ATConfig") -> float:
    """Piecewise-constant learning rate: divided by ``1/lr_decay_factor`` at each boundary."""
    passed = sum(1 for b in cfg.lr_decay_epochs if epoch >= b)
    return cfg.lr * cfg.lr_decay_factor ** passed


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """A (possibly long-tailed) training loss.

    ``method`` picks the logit transform / loss form, ``reweight`` the per-class
    weight.  For ``robal`` the margins, the KL weight ``alpha`` and the scale
    applied to cosines inside the KL (``kl_scale``) apply.
    """

    method: str = "ce"
    reweight: str = "none"
    hyper: tuple[tuple[str, float], ...] = ()
    margins: MarginSpec = field(default_factory=MarginSpec)
    alpha: float = 0.0
    kl_scale: float = 1.0

    def __post_init__(self):
        if self.method not in LOSS_METHODS:
            raise ValueError(f"unknown loss method {self.method!r}; expected one of {LOSS_METHODS}")
        if self.reweight not in ("none", "class-balanced"):
            raise ValueError(f"unknown re-weighting {self.reweight!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.kl_scale <= 0:
            raise ValueError("kl_scale must be > 0")

    @property
    def params(self) -> dict:
        return dict(self.hyper)


PLAIN = LossSpec()


@dataclass(frozen=True)
class ATConfig:
    loss: LossSpec = PLAIN
    mode: str = "outer"
    epsilon: float = 8 / 255
    eta: float = 2 / 255
    steps: int = 5
    epochs: int = 40
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay_epochs: tuple[int, ...] = (30, 37)
    lr_decay_factor: float = 0.1
    sampler: str = "plain"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown substitution mode {self.mode!r}")
        if self.loss.method == "robal" and self.mode != "outer":
            raise ValueError("robal trains with a plain inner loss; use mode='outer'")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon < 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError("epsilon/epochs must be >= 0 and batch >= 1")
        if self.sampler not in ("plain", "class-aware"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def inner_loss(self) -> LossSpec:
        return self.loss if self.mode in ("inner", "both") else PLAIN

    @property
    def outer_loss(self) -> LossSpec:
        return self.loss if self.mode in ("outer", "both") else PLAIN

    def budget(self) -> AttackBudget:
        return AttackBudget(epsilon=self.epsilon, eta=self.eta, steps=self.steps)


REFERENCE_SCHEDULE = dict(epochs=80, lr=0.1, lr_decay_epochs=(60, 75), lr_decay_factor=0.1,
                          weight_decay=2e-4, momentum=0.9, batch=64, steps=5, epsilon=0.031, eta=0.0078)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def logit_loss(spec: LossSpec, stats: ClassStats, head) -> Callable:
    """Per-sample loss on final logits ``z`` (used for every non-RoBal method and inner steps)."""
    hp = spec.params
    method = spec.method
    if method == "robal":
        return lambda z, y: cross_entropy(z, y, reduction="none")

    def fn(z, y):
        w = None if spec.reweight == "none" else reweight_factor(spec.reweight, stats, y, hp,
                                                                 normalize=True)
        if method == "focal":
            gamma = hp.get("gamma", TABLE1_DEFAULTS["focal"]["gamma"])
            return focal_bce_loss(z, y, gamma, weights=w, reduction="none")
        if method == "cosine-with-margin":
            if not isinstance(head, CosineHead):
                raise TypeError("cosine-with-margin needs a cosine head")
            z = table1_train_logits(method, ad.scale(z, 1.0 / head.s), stats, y,
                                    {"s": head.s, **hp})
        elif method != "ce":
            z = table1_train_logits(method, z, stats, y, hp)
        return cross_entropy(z, y, weights=w, reduction="none")

    return fn


def outer_objective(spec: LossSpec, network: Network, x_adv, y, stats: ClassStats,
                    x_clean=None) -> ad.Tensor:
    """Mean training loss on the perturbed batch."""
    if spec.method == "robal":
        head = network.head
        if not isinstance(head, CosineHead):
            raise TypeError("robal needs a cosine head")
        margins = robal_margin_matrix(spec.margins, stats, head.s)
        f_adv = network.features(x_adv)
        f_clean = network.features(x_clean) if spec.alpha > 0 else f_adv
        return robal_total_loss(head, f_clean, f_adv, y, margins, spec.alpha,
                                kl_scale=spec.kl_scale)
    return ad.mean(logit_loss(spec, stats, network.head)(network(x_adv), y))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    clean_accuracy: float
    batches: int


@dataclass
class TrainState:
    """Mutable bookkeeping carried across epochs."""

    optim: OptimState
    tde_direction: np.ndarray | None = None
    tde_momentum: float = 0.9

    def update_direction(self, features: np.ndarray) -> None:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        unit = features / np.where(norms > 0, norms, 1.0)
        batch_mean = unit.mean(axis=0)
        if self.tde_direction is None:
            self.tde_direction = batch_mean
        else:
            self.tde_direction = self.tde_momentum * self.tde_direction + (1 - self.tde_momentum) * batch_mean

    def unit_direction(self) -> np.ndarray | None:
        if self.tde_direction is None:
            return None
        n = np.linalg.norm(self.tde_direction)
        return self.tde_direction / n if n > 0 else None


def _perturb(network, x, y, cfg: ATConfig, inner, seed: int) -> np.ndarray:
    if cfg.epsilon == 0:
        return x
    return pgd(network, x, y, cfg.budget(), loss=inner, random_init=True, seed=seed).x_adv


def at_epoch(network: Network, data: LabeledDataset, cfg: ATConfig, stats: ClassStats,
             epoch: int, state: TrainState, params: dict[str, ad.Tensor] | None = None,
             batches=None, outer: LossSpec | None = None, inner: LossSpec | None = None,
             no_decay=(), hook: Callable[[dict], None] | None = None,
             track_direction: bool = True) -> EpochStats:
    """One pass of min-max training: PGD on the inner loss, SGD on the outer loss.

    ``params`` restricts the update to a subset (fine-tuning); ``batches``
    overrides the batch index stream.
    """
    params = network.parameters() if params is None else params
    outer = cfg.outer_loss if outer is None else outer
    inner = cfg.inner_loss if inner is None else inner
    inner_fn = logit_loss(inner, stats, network.head)
    if batches is None:
        if cfg.sampler == "class-aware":
            n_batches = math.ceil(len(data) / cfg.batch)
            batches = islice(class_aware_batches(data, cfg.batch, derive_seed(cfg.seed, epoch, 7)),
                             n_batches)
        else:
            batches = plain_batches(data, cfg.batch, np.random.default_rng([cfg.seed, epoch]))
    state.optim.lr = lr_schedule(epoch, cfg)
    names = list(params)
    total, correct, seen, nb = 0.0, 0, 0, 0
    for b, idx in enumerate(batches):
        x, y = data.samples[idx], data.labels[idx]
        feats = network.features(x).data
        logits = network.head(feats).data
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged(f"non-finite logits at epoch {epoch}, batch {b}")
        correct += int((argmax_predict(logits) == y).sum())
        if track_direction:
            state.update_direction(feats)
        x_adv = _perturb(network, x, y, cfg, inner_fn, derive_seed(cfg.seed, epoch, b))
        loss = outer_objective(outer, network, x_adv, y, stats, x_clean=x)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}")
        grads = ad.gradients(loss, [params[n] for n in names])
        sgd_step(params, dict(zip(names, grads)), state.optim, no_decay)
        if hook is not None:
            hook({"epoch": epoch, "batch": b, "index": idx, "x": x, "x_adv": x_adv, "y": y,
                  "loss": value, "grads": dict(zip(names, grads))})
        total += value * len(idx)
        seen += len(idx)
        nb += 1
    return EpochStats(epoch, state.optim.lr, total / max(seen, 1), correct / max(seen, 1), nb)


def train(network: Network, data: LabeledDataset, cfg: ATConfig, stats: ClassStats | None = None,
          on_epoch_end: Callable[[EpochStats, TrainState], None] | None = None) -> TrainState:
    """Run ``cfg.epochs`` epochs; evaluation uses the final weights (no early stopping)."""
    stats = stats or ClassStats(data.class_counts)
    state = TrainState(OptimState(cfg.lr, cfg.momentum, cfg.weight_decay))
    for epoch in range(cfg.epochs):
        es = at_epoch(network, data, cfg, stats, epoch, state)
        if on_epoch_end is not None:
            on_epoch_end(es, state)
    return state


def finetune_one_epoch(network: Network, data: LabeledDataset, method: str, cfg: ATConfig,
                       stats: ClassStats | None = None, lr: float | None = None,
                       state: TrainState | None = None) -> EpochStats:
    """Retrain the classifier for exactly one epoch with the backbone frozen.

    ``resample`` uses class-aware batches, ``reweight`` class-balanced loss
    weights, ``lws`` learns only per-class logit scales (class-aware batches).
    """
    if method not in FINETUNE_METHODS:
        raise ValueError(f"unknown fine-tuning method {method!r}")
    stats = stats or ClassStats(data.class_counts)
    head = network.head
    if method == "lws":
        if head.scales is None:
            head.scales = ad.Tensor(np.ones(head.W.shape[0]), requires_grad=True)
        params = {"head.scales": head.scales}
    else:
        params = {f"head.{k}": v for k, v in head.parameters().items() if k != "scales"}
    optim = OptimState(cfg.lr if lr is None else lr, cfg.momentum, cfg.weight_decay)
    state = TrainState(optim) if state is None else replace(state, optim=optim)
    ft_cfg = replace(cfg, lr=optim.lr, lr_decay_epochs=())
    if method == "reweight":
        outer = LossSpec(reweight="class-balanced", hyper=cfg.loss.hyper)
        batches = None
        ft_cfg = replace(ft_cfg, sampler="plain")
    else:
        outer = PLAIN
        n_batches = math.ceil(len(data) / cfg.batch)
        batches = islice(class_aware_batches(data, cfg.batch, derive_seed(cfg.seed, 991)), n_batches)
    return at_epoch(network, data, ft_cfg, stats, 0, state, params=params, batches=batches,
                    outer=outer, inner=PLAIN, no_decay=("head.scales",), track_direction=False)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

RBCK_MAGIC = b"RBCK"
RBCK_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    descriptor: dict
    arrays: dict[str, np.ndarray]
    class_counts: np.ndarray
    tde_direction: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, network: Network, class_counts, tde_direction=None,
                     metadata: dict | None = None) -> "Checkpoint":
        arrays = {k: v.data.copy() for k, v in network.parameters().items()}
        return cls(network.descriptor(), arrays, np.asarray(class_counts, dtype=np.float64),
                   None if tde_direction is None else np.asarray(tde_direction, dtype=np.float64),
                   dict(metadata or {}))

    def build_network(self) -> Network:
        desc = self.descriptor
        net = Network.create(desc["backbone"], desc["head"], desc["num_classes"], seed=0)
        net.load_arrays(self.arrays)
        return net


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps({"network": ckpt.descriptor, "metadata": ckpt.metadata}, sort_keys=True)
    arrays = dict(ckpt.arrays)
    arrays["stats.class_counts"] = ckpt.class_counts
    if ckpt.tde_direction is not None:
        arrays["stats.tde_direction"] = ckpt.tde_direction
    out = bytearray(RBCK_MAGIC)
    out += struct.pack("<I", RBCK_VERSION)
    out += _pack_str(header)
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        out += _pack_str(name)
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    out += struct.pack("<Q", len(out))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError(f"{self.path}: unexpected end of checkpoint at byte {self.off}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4 or r.take(4) != RBCK_MAGIC:
        raise BadMagicError(f"{path}: not an RBCK checkpoint")
    (version,) = r.unpack("<I")
    if version != RBCK_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.string())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = math.prod(shape)
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    body_len = r.off
    (declared,) = r.unpack("<Q")
    if declared != body_len or r.off != len(buf):
        raise ChecksumError(f"{path}: byte-length field {declared} does not match {body_len}")
    counts = arrays.pop("stats.class_counts", None)
    if counts is None:
        raise ShapeMismatchError(f"{path}: checkpoint lacks class counts")
    tde = arrays.pop("stats.tde_direction", None)
    return Checkpoint(header["network"], arrays, counts, tde, header.get("metadata", {}))
