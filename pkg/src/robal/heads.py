"""Classifier heads, long-tailed logit transforms and losses.

Every count logarithm is natural.  Functions accept and return
:class:`~robal.autodiff.Tensor` so they can sit inside training and attack
graphs; plain arrays are wrapped on entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from robal import autodiff as ad
from robal.autodiff import Tensor

TRAIN_METHODS = ("class-aware-margin", "cosine-with-margin", "class-aware-temperature",
                 "class-aware-bias")
POSTHOC_KINDS = ("none", "la-post", "tau-norm", "cdt-post", "tde", "lws", "robal-bias")

# optimal values reported for the combination with adversarial training
TABLE1_DEFAULTS = {
    "class-aware-margin": {"delta_max": 0.5},
    "cosine-with-margin": {"m": 0.2, "s": 10.0},
    "class-aware-temperature": {"gamma": 0.3},
    "class-aware-bias": {"tau": 1.0},
    "focal": {"gamma": 2.0},
    "class-balanced": {"beta": 0.9999},
    "la-post": {"tau": 1.0},
    "tau-norm": {"tau": 2.0},
    "cdt-post": {"tau": 0.3},
    "tde": {"alpha": 0.1},
    "vanilla-cos": {"s": 16.0},
}


@dataclass(frozen=True, eq=False)
class ClassStats:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1 or counts.size < 2 or counts.min() < 1:
            raise ValueError("class counts must be a vector of >= 2 entries, each >= 1")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.size

    @property
    def n_min(self) -> float:
        return float(self.counts.min())

    @property
    def n_max(self) -> float:
        return float(self.counts.max())

    @property
    def priors(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def log_counts(self) -> np.ndarray:
        return np.log(self.counts)


@dataclass(frozen=True)
class MarginSpec:
    m0: float = 0.1
    tau_b: float = 0.0
    tau_m: float = 0.0

    def __post_init__(self):
        if self.m0 < 0:
            raise ValueError("m0 must be non-negative")


@dataclass(eq=False)
class LinearHead:
    """``z_i = s_i * (W_i . f + b_i)``; the scales ``s_i`` exist only after LWS fine-tuning."""

    W: Tensor
    b: Tensor | None = None
    scales: Tensor | None = None
    kind = "linear"

    def __call__(self, f) -> Tensor:
        z = linear_logits(self, f)
        return z if self.scales is None else z * self.scales

    def parameters(self) -> dict[str, Tensor]:
        params = {"W": self.W}
        if self.b is not None:
            params["b"] = self.b
        if self.scales is not None:
            params["scales"] = self.scales
        return params

    def config(self) -> dict:
        return {"kind": "linear", "bias": self.b is not None}


@dataclass(eq=False)
class CosineHead:
    """``s * cos(theta_i)`` with rows normalized as ``W_i / (||W_i|| + gamma)``."""

    W: Tensor
    s: float = 10.0
    gamma: float = 0.0
    scales: Tensor | None = None
    kind = "cosine"

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("temperature s must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def cosine(self, f) -> Tensor:
        return cosine_logits(self, f)

    def __call__(self, f) -> Tensor:
        z = ad.scale(cosine_logits(self, f), self.s)
        return z if self.scales is None else z * self.scales

    def parameters(self) -> dict[str, Tensor]:
        params = {"W": self.W}
        if self.scales is not None:
            params["scales"] = self.scales
        return params

    def config(self) -> dict:
        return {"kind": "cosine", "s": self.s, "gamma": self.gamma}


@dataclass(eq=False)
class PostHocRule:
    kind: str = "none"
    tau: float = 0.0
    alpha: float = 0.0
    direction: np.ndarray | None = None
    scales: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POSTHOC_KINDS:
            raise ValueError(f"unknown posthoc rule {self.kind!r}; expected one of {POSTHOC_KINDS}")
        if not (np.isfinite(self.tau) and np.isfinite(self.alpha)):
            raise ValueError("posthoc parameters must be finite")
        if self.direction is not None:
            d = np.asarray(self.direction, dtype=np.float64)
            if not np.isclose(np.linalg.norm(d), 1.0, atol=1e-9):
                raise ValueError("tde direction must have unit norm")
            self.direction = d


# ---------------------------------------------------------------------------
# logits
# ---------------------------------------------------------------------------

def linear_logits(head: LinearHead, f) -> Tensor:
    z = ad.as_tensor(f) @ head.W.T
    return z if head.b is None else z + head.b


def normalized_weights(head: CosineHead) -> Tensor:
    norms = ad.l2norm(head.W, axis=1, keepdims=True)
    return head.W / (norms + head.gamma)


def cosine_logits(head: CosineHead, f) -> Tensor:
    """Cosine between each (smoothed-normalized) class row and the feature vector."""
    f = ad.as_tensor(f)
    fnorm = ad.l2norm(f, axis=-1, keepdims=True)
    if np.any(fnorm.data == 0):
        raise ValueError("cosine_logits: zero feature vector has no direction")
    return (f / fnorm) @ normalized_weights(head).T


def _onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(num_classes)[labels]


def ldam_deltas(stats: ClassStats, delta_max: float = 0.5) -> np.ndarray:
    """Per-class margins proportional to ``n**-1/4``, the rarest class receiving ``delta_max``."""
    raw = stats.counts ** -0.25
    return delta_max * raw / raw.max()


def table1_train_logits(method: str, base, stats: ClassStats, labels=None,
                        hyper: dict | None = None) -> Tensor:
    """Training-stage logit transform of a long-tailed method.

    ``base`` is the linear logit ``W f`` for the linear-head methods and the raw
    cosine ``cos(theta)`` for ``cosine-with-margin``.
    """
    if method not in TRAIN_METHODS:
        raise ValueError(f"unknown training method {method!r}")
    hp = {**TABLE1_DEFAULTS[method], **(hyper or {})}
    base = ad.as_tensor(base)
    c = stats.num_classes
    if method in ("class-aware-margin", "cosine-with-margin") and labels is None:
        raise ValueError(f"{method} needs labels")
    if method == "class-aware-margin":
        delta = ldam_deltas(stats, hp["delta_max"])
        return base - _onehot(labels, c) * delta
    if method == "cosine-with-margin":
        return ad.scale(base - _onehot(labels, c) * hp["m"], hp["s"])
    if method == "class-aware-temperature":
        return base * (stats.counts / stats.n_max) ** hp["gamma"]
    return base + hp["tau"] * stats.log_counts


def reweight_factor(method: str, stats: ClassStats, labels, hyper: dict | None = None,
                    normalize: bool = False) -> np.ndarray:
    """Per-sample loss weight ``r_w(y)``.

    With ``normalize`` the class weights are rescaled to sum to C.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if method == "none":
        return np.ones(labels.shape)
    if method != "class-balanced":
        raise ValueError(f"unknown re-weighting method {method!r}")
    beta = {**TABLE1_DEFAULTS["class-balanced"], **(hyper or {})}["beta"]
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    per_class = (1.0 - beta) / (1.0 - beta ** stats.counts)
    if normalize:
        per_class = per_class * stats.num_classes / per_class.sum()
    return per_class[labels]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(per_sample)
    if reduction == "sum":
        return ad.sum(per_sample)
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, labels, weights=None, reduction: str = "mean") -> Tensor:
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    nll = -ad.gather(logp, labels[..., None], axis=-1).reshape(labels.shape)
    if weights is not None:
        nll = nll * np.asarray(weights, dtype=np.float64)
    return _reduce(nll, reduction)


def _log_sigmoid(u: Tensor) -> Tensor:
    return -ad.softplus(-u)


def focal_bce_loss(logits, labels, gamma: float = 2.0, weights=None,
                   reduction: str = "mean") -> Tensor:
    """One-vs-all sigmoid BCE with the focal factor ``(1 - p_t)**gamma``, summed over classes."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    sign = 2.0 * _onehot(labels, logits.shape[-1]) - 1.0
    signed = logits * sign
    log_pt = _log_sigmoid(signed)
    terms = -log_pt if gamma == 0 else -ad.exp(ad.scale(_log_sigmoid(-signed), gamma)) * log_pt
    per_sample = ad.sum(terms, axis=-1)
    if weights is not None:
        per_sample = per_sample * np.asarray(weights, dtype=np.float64)
    return _reduce(per_sample, reduction)


def robal_margin_matrix(spec: MarginSpec, stats: ClassStats, s: float) -> np.ndarray:
    """``m[y, i]``: pair-aware, class-aware and uniform margin of true class y against i."""
    if s <= 0:
        raise ValueError("s must be positive")
    logn = stats.log_counts
    pair = (spec.tau_b / s) * (logn[None, :] - logn[:, None])
    cls = (spec.tau_m / s) * (logn[:, None] - np.log(stats.n_min))
    return pair + cls + spec.m0


def robal_margin_matrix_alt(spec: MarginSpec, stats: ClassStats, s: float) -> np.ndarray:
    """Same margins written through ``tau_b - tau_m`` and ``log(n_i / n_min)``."""
    logn = stats.log_counts
    pair = ((spec.tau_b - spec.tau_m) / s) * (logn[None, :] - logn[:, None])
    cls = (spec.tau_m / s) * (logn[None, :] - np.log(stats.n_min))
    return pair + cls + spec.m0


def _robal_l1(cos: Tensor, labels: np.ndarray, margins: np.ndarray, s: float,
              reduction: str) -> Tensor:
    # log(1 + sum_{i != y} exp(a_i)) as softplus(logsumexp_{i != y} a_i): exact in both tails
    c = cos.shape[-1]
    onehot = _onehot(labels, c)
    cos_y = ad.gather(cos, labels[:, None], axis=-1)
    a = ad.scale(cos - cos_y + np.asarray(margins)[labels], s)
    others = ad.logsumexp(a + np.where(onehot > 0, -np.inf, 0.0), axis=-1)
    return _reduce(ad.softplus(others), reduction)


def robal_loss(head: CosineHead, f, labels, margins: np.ndarray, reduction: str = "mean") -> Tensor:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    cos = cosine_logits(head, f)
    if cos.ndim == 1:
        cos = cos.reshape(1, -1)
    return _robal_l1(cos, labels, margins, head.s, reduction)


def kl_divergence(logits_p, logits_q, reduction: str = "mean") -> Tensor:
    """``KL(softmax(p) || softmax(q))`` per row."""
    logp = ad.log_softmax(ad.as_tensor(logits_p), axis=-1)
    logq = ad.log_softmax(ad.as_tensor(logits_q), axis=-1)
    per = ad.sum(ad.exp(logp) * (logp - logq), axis=-1)
    return _reduce(per, reduction)


def robal_total_loss(head: CosineHead, f_clean, f_adv, labels, margins: np.ndarray,
                     alpha: float, reduction: str = "mean", kl_scale: float = 1.0) -> Tensor:
    """Margin loss on the perturbed input plus ``alpha * KL(adv || clean)``.

    The KL compares softmax distributions of ``kl_scale * cos`` without
    margins; the default scale 1 uses the raw cosine outputs.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if kl_scale <= 0:
        raise ValueError("kl_scale must be positive")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    cos_adv = cosine_logits(head, f_adv)
    loss = _robal_l1(cos_adv, labels, margins, head.s, reduction)
    if alpha == 0:
        return loss
    cos_clean = cosine_logits(head, f_clean)
    kl = kl_divergence(ad.scale(cos_adv, kl_scale), ad.scale(cos_clean, kl_scale), reduction)
    return loss + ad.scale(kl, alpha)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def posthoc_logits(rule: PostHocRule, head, f, stats: ClassStats) -> Tensor:
    """Inference-stage logits of ``head`` on features ``f`` under ``rule``."""
    kind = rule.kind
    if kind == "none":
        return head(f)
    if kind == "la-post":
        return head(f) - rule.tau * stats.log_counts
    if kind == "robal-bias":
        return head(f) - rule.tau * np.log(stats.priors)
    if not isinstance(head, LinearHead):
        raise TypeError(f"posthoc rule {kind!r} needs a linear head")
    f = ad.as_tensor(f)
    W = head.W
    if kind == "tau-norm":
        norms = ad.l2norm(W, axis=1, keepdims=True)
        z = f @ (W / ad.power(norms, rule.tau)).T
    elif kind == "cdt-post":
        z = f @ (W / (stats.counts ** rule.tau)[:, None]).T
    elif kind == "tde":
        if rule.direction is None:
            raise ValueError("tde needs a stored feature direction")
        d = rule.direction
        cos_fd = (f @ d) / ad.l2norm(f, axis=-1)
        if f.ndim == 2:
            cos_fd = cos_fd.reshape(-1, 1)
        z = (f - ad.scale(cos_fd * d, rule.alpha)) @ W.T
    else:  # lws
        if rule.scales is None:
            raise ValueError("lws needs per-class scales")
        z = (f @ W.T) * np.asarray(rule.scales, dtype=np.float64)
        if head.b is not None:
            z = z + head.b * np.asarray(rule.scales, dtype=np.float64)
        return z
    if head.b is not None:
        z = z + head.b
    if head.scales is not None:
        z = z * head.scales
    return z


def argmax_predict(logits) -> np.ndarray:
    """Index of the largest logit along the last axis; ties go to the lowest index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("argmax_predict: empty logits")
    if np.isnan(z).any():
        raise ValueError("argmax_predict: NaN in logits")
    return np.argmax(z, axis=-1)
