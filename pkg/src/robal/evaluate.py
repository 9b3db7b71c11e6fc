"""Accuracy bookkeeping and the robustness-evaluation diagnostics.

Every evaluation is chunked into fixed-size slices of the dataset so results
do not depend on how many worker threads process the chunks.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from robal import autodiff as ad
from robal.attacks import AttackBudget, input_gradient, run_attack
from robal.data import LabeledDataset
from robal.heads import LinearHead, argmax_predict, cross_entropy
from robal.models import Classifier

CHUNK = 256
# a gradient coordinate counts as vanished below this (the usual attack-toolkit check)
ZERO_THRESHOLD = 1e-8
# true float64 underflow
UNDERFLOW_THRESHOLD = 1e-300
DEFAULT_KAPPA_GRID = tuple(np.round(np.arange(-4.0, 4.0 + 1e-9, 0.5), 10))


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``ROBAL_THREADS``, else 1."""
    if threads is None:
        threads = int(os.environ.get("ROBAL_THREADS", "1") or 1)
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    return threads


def _chunks(n: int, size: int = CHUNK) -> list[np.ndarray]:
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, n: int, threads: int | None):
    chunks = _chunks(n)
    threads = resolve_threads(threads)
    if threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def per_class_mean(mask: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=mask.astype(np.float64), minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)


@dataclass
class EvalReport:
    """Clean and per-attack accuracies with their per-class recalls.

    ``robust_masks[name]`` marks samples correct on the clean input that also
    survived the attack, so ``A_rob <= A_nat`` by construction.
    """

    labels: np.ndarray
    correct: np.ndarray
    robust_masks: dict[str, np.ndarray] = field(default_factory=dict)
    num_classes: int = 0

    @property
    def a_nat(self) -> float:
        return float(self.correct.mean())

    @property
    def a_rob(self) -> dict[str, float]:
        return {k: float(m.mean()) for k, m in self.robust_masks.items()}

    @property
    def r_bdy(self) -> dict[str, float]:
        return {k: boundary_error(self.a_nat, v) for k, v in self.a_rob.items()}

    @property
    def gap(self) -> float | None:
        rob = self.a_rob.get("ensemble")
        return None if rob is None else boundary_error(self.a_nat, rob)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def recall(self, attack: str | None = None) -> np.ndarray:
        mask = self.correct if attack is None else self.robust_masks[attack]
        return per_class_mean(mask, self.labels, self.num_classes)

    def worst_case(self, names) -> float:
        """Robust accuracy when a sample must survive every named attack."""
        mask = self.correct.copy()
        for n in names:
            mask &= self.robust_masks[n]
        return float(mask.mean())

    def summary(self) -> dict:
        return {"a_nat": self.a_nat, "a_rob": self.a_rob, "r_bdy": self.r_bdy, "gap": self.gap,
                "recall": {"clean": self.recall().tolist(),
                           **{k: self.recall(k).tolist() for k in self.robust_masks}},
                "class_counts": self.class_counts.tolist()}

    def write_csv(self, out_dir, prefix: str = "") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        acc_path = out / f"{prefix}accuracy.csv"
        with acc_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attack", "a_nat", "a_rob", "r_bdy"])
            w.writerow(["clean", repr(self.a_nat), repr(self.a_nat), repr(0.0)])
            for k, v in self.a_rob.items():
                w.writerow([k, repr(self.a_nat), repr(v), repr(self.r_bdy[k])])
        rec_path = out / f"{prefix}recall.csv"
        with rec_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            names = list(self.robust_masks)
            w.writerow(["class", "count", "clean", *names])
            cols = [self.recall(), *[self.recall(n) for n in names]]
            for c in range(self.num_classes):
                w.writerow([c, int(self.class_counts[c]), *[repr(float(col[c])) for col in cols]])
        return acc_path, rec_path


def boundary_error(a_nat: float, a_rob: float) -> float:
    """``R_bdy = A_nat - A_rob``."""
    return a_nat - a_rob


def evaluate(classifier: Classifier, data: LabeledDataset, attacks=(), seed: int = 0,
             threads: int | None = None) -> EvalReport:
    """Clean accuracy plus one robust-accuracy mask per ``(name, budget)`` attack."""
    attacks = list(attacks.items()) if isinstance(attacks, dict) else list(attacks)
    names = [name for name, _ in attacks]
    if len(set(names)) != len(names):
        raise ValueError("attack names must be unique")

    def work(idx):
        x, y = data.samples[idx], data.labels[idx]
        correct = classifier.predict(x) == y
        masks = {}
        for name, budget in attacks:
            res = run_attack(name.split(":")[0], classifier, x, y, budget, seed, idx)
            masks[name] = correct & ~res.success
        return correct, masks

    parts = _map_chunks(work, len(data), threads)
    correct = np.concatenate([p[0] for p in parts])
    masks = {n: np.concatenate([p[1][n] for p in parts]) for n in names}
    return EvalReport(data.labels.copy(), correct, masks, data.num_classes)


def write_jsonl(path, events, mode: str = "a") -> None:
    with Path(path).open(mode) as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# logit re-scaling sweep
# ---------------------------------------------------------------------------

def zero_gradient_mask(classifier, x, y, threshold: float = ZERO_THRESHOLD) -> np.ndarray:
    """Per-coordinate ``|d CE / d x| < threshold`` at the clean input."""
    g, _, _ = input_gradient(classifier, x, y, lambda z, t: cross_entropy(z, t, reduction="none"))
    return np.abs(g) < threshold


@dataclass
class KappaPoint:
    kappa: float
    a_nat: float
    pgd: float
    ensemble: float
    zero_grad_ratio: float
    zero_grad_ratio_correct: float
    underflow_ratio: float

    def as_dict(self) -> dict:
        return {"kappa": self.kappa, "a_nat": self.a_nat, "pgd": self.pgd,
                "ensemble": self.ensemble, "zero_grad_ratio": self.zero_grad_ratio,
                "zero_grad_ratio_correct": self.zero_grad_ratio_correct,
                "underflow_ratio": self.underflow_ratio}


@dataclass
class KappaSweep:
    """Per-``kappa`` metrics with the classifier divided by ``10**kappa``.

    ``zero_grad_ratio`` is the fraction of input-gradient coordinates below
    :data:`ZERO_THRESHOLD` over all samples; ``zero_grad_ratio_correct``
    restricts to clean-correct samples and ``underflow_ratio`` uses
    :data:`UNDERFLOW_THRESHOLD` instead.
    """

    points: list[KappaPoint]

    @property
    def grid(self) -> list[float]:
        return [p.kappa for p in self.points]

    def at(self, kappa: float) -> KappaPoint:
        for p in self.points:
            if p.kappa == kappa:
                return p
        raise KeyError(kappa)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])

    def events(self) -> list[dict]:
        return [{"event": "kappa", **p.as_dict()} for p in self.points]


def kappa_sweep(classifier: Classifier, data: LabeledDataset, grid=DEFAULT_KAPPA_GRID,
                budget: AttackBudget | None = None, seed: int = 0,
                threads: int | None = None) -> KappaSweep:
    budget = budget or AttackBudget()
    grid = [float(k) for k in grid]
    if not all(np.isfinite(grid)):
        raise ValueError("kappa grid must be finite")
    points = []
    for kappa in grid:
        scaled = replace(classifier, logit_scale=classifier.logit_scale * 10.0 ** (-kappa))
        report = evaluate(scaled, data, [("pgd", budget), ("ensemble", budget)], seed, threads)

        def grads(idx):
            g, _, _ = input_gradient(scaled, data.samples[idx], data.labels[idx],
                                     lambda z, t: cross_entropy(z, t, reduction="none"))
            return np.abs(g).reshape(len(idx), -1)

        mag = np.concatenate(_map_chunks(grads, len(data), threads))
        zero = mag < ZERO_THRESHOLD
        correct = report.correct
        ratio_c = float(zero[correct].mean()) if correct.any() else 0.0
        points.append(KappaPoint(kappa, report.a_nat, report.a_rob["pgd"],
                                 report.a_rob["ensemble"], float(zero.mean()), ratio_c,
                                 float((mag < UNDERFLOW_THRESHOLD).mean())))
    return KappaSweep(points)


# ---------------------------------------------------------------------------
# feature / weight norm diagnostics
# ---------------------------------------------------------------------------

QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


@dataclass
class HistSummary:
    count: int
    mean: float | None
    quantiles: dict[float, float]
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray, edges: np.ndarray) -> "HistSummary":
        values = np.asarray(values, dtype=np.float64)
        counts = np.histogram(values, bins=edges)[0] if edges.size > 1 else np.zeros(0, dtype=np.int64)
        if values.size == 0:
            return cls(0, None, {}, edges, counts)
        qs = np.quantile(values, QUANTILES)
        return cls(int(values.size), float(values.mean()), dict(zip(QUANTILES, map(float, qs))),
                   edges, counts)


@dataclass
class NormStats:
    """Scaling ratios ``||f(x+delta)|| / ||f(x)||`` of clean-correct samples."""

    robust: HistSummary
    broken: HistSummary
    ratios: np.ndarray
    success: np.ndarray


def feature_norm_stats(classifier: Classifier, data: LabeledDataset, attack: str = "pgd",
                       budget: AttackBudget | None = None, seed: int = 0, bins: int = 20,
                       threads: int | None = None) -> NormStats:
    budget = budget or AttackBudget()

    def work(idx):
        x, y = data.samples[idx], data.labels[idx]
        keep = classifier.predict(x) == y
        res = run_attack(attack, classifier, x[keep], y[keep], budget, seed, idx[keep])
        n0 = np.linalg.norm(classifier.features(x[keep]).data, axis=1)
        n1 = np.linalg.norm(classifier.features(res.x_adv).data, axis=1)
        ok = n0 > 0
        return n1[ok] / n0[ok], res.success[ok]

    parts = _map_chunks(work, len(data), threads)
    ratios = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    success = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=bool)
    if ratios.size:
        lo, hi = float(ratios.min()), float(ratios.max())
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5e-3, hi + 0.5e-3
        edges = np.linspace(lo, hi, bins + 1)
    else:
        edges = np.zeros(0)
    return NormStats(HistSummary.of(ratios[~success], edges), HistSummary.of(ratios[success], edges),
                     ratios, success)


def weight_norm_profile(head, stats=None) -> np.ndarray:
    """Row norms ``||W_i||`` ordered by class index."""
    W = head.W.data if isinstance(head.W, ad.Tensor) else np.asarray(head.W)
    return np.sqrt(np.sum(W * W, axis=1))


def direction_averaging_check(network, x, y, compression: float) -> float:
    """Largest relative deviation of the feature-space CE gradient from ``mean(W) - W_y``.

    Logits are divided by ``compression``; the gradient is multiplied back so
    both sides share a scale.
    """
    head = network.head
    if not isinstance(head, LinearHead):
        raise TypeError("direction averaging is defined for a linear head")
    if head.scales is not None:
        raise TypeError("direction averaging assumes an unscaled head")
    if compression <= 0:
        raise ValueError("compression must be positive")
    y = np.asarray(y, dtype=np.int64)
    W = head.W.data
    target = W.mean(axis=0)[None, :] - W[y]
    tnorm = np.linalg.norm(target, axis=1)
    if np.any(tnorm <= 1e-12 * max(np.abs(W).max(), 1e-300)):
        raise ValueError("degenerate head: mean weight equals W_y")
    f = ad.Tensor(network.features(x).data, requires_grad=True)
    z = ad.scale(head(f), 1.0 / compression)
    (g,) = ad.gradients(ad.sum(cross_entropy(z, y, reduction="none")), [f])
    dev = np.linalg.norm(g * compression - target, axis=1) / tnorm
    return float(dev.max())


def vanishing_gradient_max(classifier: Classifier, x, y, amplification: float) -> float:
    """Max ``|d CE / d x|`` over clean-correct samples with logits multiplied by ``amplification``."""
    scaled = replace(classifier, logit_scale=classifier.logit_scale * amplification)
    y = np.asarray(y, dtype=np.int64)
    keep = classifier.predict(x) == y
    if not keep.any():
        return 0.0
    g, _, _ = input_gradient(scaled, np.asarray(x)[keep], y[keep],
                             lambda z, t: cross_entropy(z, t, reduction="none"))
    return float(np.abs(g).max())
