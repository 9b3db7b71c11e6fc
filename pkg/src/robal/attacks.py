"""White-box l-inf / l2 attacks and the two-member evaluation ensemble.

A *model* here is any callable mapping an input :class:`Tensor` of shape
``(N, ...)`` to logits ``(N, C)``.  Attacks work on numpy batches and never
mutate the model.  Per-sample randomness is seeded from
``(seed, sample index, restart)`` so results do not depend on batching.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from robal import autodiff as ad
from robal.autodiff import Tensor
from robal.heads import argmax_predict, cross_entropy

LOSS_KINDS = ("ce", "cw-margin", "dlr", "targeted-dlr")
ATTACK_NAMES = ("fgsm", "pgd", "mim", "cw", "cw-l2", "ensemble")


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 8 / 255
    eta: float = 2 / 255
    steps: int = 20
    restarts: int = 1
    clip: tuple[float, float] = (0.0, 1.0)
    mu: float = 1.0
    cw_c: float = 1.0
    cw_kappa: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.eta <= 0:
            raise ValueError("eta must be > 0 when steps > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        lo, hi = self.clip
        if not lo < hi:
            raise ValueError("clip range must satisfy lo < hi")


@dataclass
class PerturbResult:
    x_adv: np.ndarray
    success: np.ndarray
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    distortion: np.ndarray | None = None

    @property
    def robust(self) -> np.ndarray:
        return ~self.success


# ---------------------------------------------------------------------------
# attack objectives (all per-sample, larger = more adversarial)
# ---------------------------------------------------------------------------

def _max_other(z: Tensor, y: np.ndarray) -> Tensor:
    masked = np.where(np.eye(z.shape[-1], dtype=bool)[y], -np.inf, z.data)
    idx = np.argmax(masked, axis=-1)
    return ad.gather(z, idx[:, None], axis=-1).reshape(-1)


def _pick(z: Tensor, idx) -> Tensor:
    return ad.gather(z, np.asarray(idx, dtype=np.int64)[:, None], axis=-1).reshape(-1)


def cw_objective(logits, y, kappa: float = 0.0) -> Tensor:
    """``max(Z_y - max_{i != y} Z_i, -kappa)``; non-positive once ``y`` is no longer on top."""
    z = ad.as_tensor(logits)
    squeeze = z.ndim == 1
    z = z.reshape(1, -1) if squeeze else z
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    f = ad.clamp(_pick(z, y) - _max_other(z, y), lo=-kappa)
    return f.reshape(()) if squeeze else f


def dlr_loss(logits, y, target=None) -> Tensor:
    """Difference-of-logits ratio; unchanged by positive rescaling of the logits."""
    z = ad.as_tensor(logits)
    squeeze = z.ndim == 1
    z = z.reshape(1, -1) if squeeze else z
    c = z.shape[-1]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    order = np.argsort(-z.data, axis=-1, kind="stable")
    top = [_pick(z, order[:, k]) for k in range(min(c, 4))]
    if target is None:
        if c < 3:
            raise ValueError("untargeted DLR needs at least 3 classes")
        num = _pick(z, y) - _max_other(z, y)
        den = top[0] - top[2]
    else:
        if c < 4:
            raise ValueError("targeted DLR needs at least 4 classes")
        t = np.broadcast_to(np.asarray(target, dtype=np.int64), y.shape)
        num = _pick(z, y) - _pick(z, t)
        den = top[0] - ad.scale(top[2] + top[3], 0.5)
    out = -(num / ad.clamp(den, lo=1e-300))
    return out.reshape(()) if squeeze else out


def _loss_fn(kind, target=None, kappa: float = 0.0) -> Callable[[Tensor, np.ndarray], Tensor]:
    if callable(kind):
        return kind
    if kind == "ce":
        return lambda z, y: cross_entropy(z, y, reduction="none")
    if kind == "cw-margin":
        return lambda z, y: -cw_objective(z, y, kappa)
    if kind == "dlr":
        return lambda z, y: dlr_loss(z, y)
    if kind == "targeted-dlr":
        if target is None:
            raise ValueError("targeted-dlr needs a target")
        return lambda z, y: dlr_loss(z, y, target)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def input_gradient(model, x: np.ndarray, y: np.ndarray, loss) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the summed per-sample loss w.r.t. the input, plus loss values and logits."""
    xt = Tensor(x, requires_grad=True)
    z = model(xt)
    per = loss(z, y)
    (g,) = ad.gradients(ad.sum(per), [xt])
    return g, per.data, z.data


def _project(x_adv, x, eps, clip):
    return np.clip(np.clip(x_adv, x - eps, x + eps), clip[0], clip[1])


def _random_start(x: np.ndarray, eps: float, seed: int, indices, restart: int) -> np.ndarray:
    noise = np.empty_like(x)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng([seed, int(idx), restart])
        noise[row] = rng.uniform(-eps, eps, size=x.shape[1:])
    return x + noise


def _indices(x, indices):
    return np.arange(len(x)) if indices is None else np.asarray(indices)


def _misclassified(model, x_adv, y) -> np.ndarray:
    return argmax_predict(model(Tensor(x_adv))) != y


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------

def fgsm(model, x, y, budget: AttackBudget) -> PerturbResult:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    g, loss, _ = input_gradient(model, x, y, _loss_fn("ce"))
    x_adv = np.clip(x + budget.epsilon * np.sign(g), *budget.clip)
    return PerturbResult(x_adv, _misclassified(model, x_adv, y), loss[None, :])


def _iterate(model, x, y, budget, loss, x0) -> tuple[np.ndarray, np.ndarray]:
    x_adv = _project(x0, x, budget.epsilon, budget.clip)
    trace = np.empty((budget.steps, len(x)))
    for t in range(budget.steps):
        g, trace[t], _ = input_gradient(model, x_adv, y, loss)
        x_adv = _project(x_adv + budget.eta * np.sign(g), x, budget.epsilon, budget.clip)
    return x_adv, trace


def pgd(model, x, y, budget: AttackBudget, loss="ce", random_init: bool = True,
        seed: int = 0, indices=None, target=None) -> PerturbResult:
    """Sign-gradient ascent projected onto the eps-ball and the clip box.

    With several restarts, a sample keeps the first restart that misclassifies it
    and later restarts only run on samples not yet broken.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = _indices(x, indices)
    lossf = _loss_fn(loss, target, budget.cw_kappa)
    x_best = x.copy()
    success = np.zeros(len(x), dtype=bool)
    first_trace = None
    for r in range(budget.restarts):
        todo = np.flatnonzero(~success)
        if todo.size == 0:
            break
        xs, ys = x[todo], y[todo]
        tgt = None if target is None or np.ndim(target) == 0 else np.asarray(target)[todo]
        lf = lossf if tgt is None else _loss_fn(loss, tgt, budget.cw_kappa)
        x0 = _random_start(xs, budget.epsilon, seed, idx[todo], r) if random_init else xs
        x_adv, trace = _iterate(model, xs, ys, budget, lf, x0)
        if first_trace is None:
            first_trace = trace
        hit = _misclassified(model, x_adv, ys)
        x_best[todo] = x_adv
        success[todo] = hit
    return PerturbResult(x_best, success, first_trace if first_trace is not None else np.zeros((0, len(x))))


def mim(model, x, y, budget: AttackBudget) -> PerturbResult:
    """Momentum iterative attack with an l1-normalized gradient accumulator."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lossf = _loss_fn("ce")
    x_adv = x.copy()
    momentum = np.zeros_like(x)
    trace = np.empty((budget.steps, len(x)))
    axes = tuple(range(1, x.ndim))
    for t in range(budget.steps):
        g, trace[t], _ = input_gradient(model, x_adv, y, lossf)
        l1 = np.abs(g).sum(axis=axes, keepdims=True)
        momentum = budget.mu * momentum + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
        x_adv = _project(x_adv + budget.eta * np.sign(momentum), x, budget.epsilon, budget.clip)
    return PerturbResult(x_adv, _misclassified(model, x_adv, y), trace)


def cw_linf(model, x, y, budget: AttackBudget, seed: int = 0, indices=None) -> PerturbResult:
    """Projected sign ascent on the negated C&W margin objective."""
    return pgd(model, x, y, budget, loss="cw-margin", random_init=True, seed=seed, indices=indices)


def cw_l2(model, x, y, budget: AttackBudget, steps: int = 200, lr: float = 0.01,
          search_steps: int = 5, shrink: float = 1e-6) -> PerturbResult:
    """C&W l2 attack in tanh space with a per-sample binary search over ``c``.

    Returns the successful iterate of smallest squared distortion; samples that
    are misclassified to begin with are returned unchanged with distortion 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    axes = tuple(range(1, x.ndim))
    lo_clip, hi_clip = budget.clip
    width = hi_clip - lo_clip
    unit = (x - lo_clip) / width
    w0 = np.arctanh((2.0 * unit - 1.0) * (1.0 - shrink))

    already = _misclassified(model, x, y)
    best_x = x.copy()
    best_d = np.where(already, 0.0, np.inf)
    c = np.full(n, float(budget.cw_c))
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    active = ~already
    trace = []
    for _ in range(search_steps):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        xs, ys, cs = x[rows], y[rows], c[rows]
        w = w0[rows].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(rows.size, dtype=bool)
        for t in range(1, steps + 1):
            wt = Tensor(w, requires_grad=True)
            xp = ad.scale(ad.tanh(wt) + 1.0, 0.5 * width) + lo_clip
            z = model(xp)
            f = cw_objective(z, ys, budget.cw_kappa)
            dist = ad.sum((xp - xs) * (xp - xs), axis=axes)
            total = ad.sum(f * cs + dist)
            (g,) = ad.gradients(total, [wt])
            trace.append(total.data.item())
            hit = argmax_predict(z) != ys
            better = hit & (dist.data < best_d[rows])
            if better.any():
                best_d[rows[better]] = dist.data[better]
                best_x[rows[better]] = xp.data[better]
            found |= hit
            # Adam
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-12)
        upper[rows[found]] = np.minimum(upper[rows[found]], cs[found])
        lower[rows[~found]] = np.maximum(lower[rows[~found]], cs[~found])
        c[rows] = np.where(np.isfinite(upper[rows]), (lower[rows] + upper[rows]) / 2, cs * 10)
    success = np.isfinite(best_d)
    return PerturbResult(best_x, success, np.asarray(trace)[:, None] if trace else np.zeros((0, 1)),
                         distortion=np.sqrt(np.where(success, best_d, np.inf)))


def ensemble_eval(model, x, y, budget: AttackBudget, seed: int = 0, indices=None,
                  max_targets: int = 9) -> PerturbResult:
    """Curriculum of CE-PGD (``budget.restarts``) then targeted DLR-PGD per runner-up class.

    A sample is robust only if it is classified correctly on the clean input and
    survives every member; broken samples skip the remaining members.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = _indices(x, indices)
    clean_logits = model(Tensor(x)).data
    broken = argmax_predict(clean_logits) != y
    x_adv = x.copy()

    rows = np.flatnonzero(~broken)
    if rows.size and budget.epsilon > 0 and budget.steps > 0:
        res = pgd(model, x[rows], y[rows], budget, "ce", True, seed, idx[rows])
        x_adv[rows] = res.x_adv
        broken[rows] = res.success

        c = clean_logits.shape[-1]
        ranked = np.argsort(-clean_logits, axis=-1, kind="stable")
        single = AttackBudget(budget.epsilon, budget.eta, budget.steps, 1, budget.clip,
                              budget.mu, budget.cw_c, budget.cw_kappa)
        n_targets = min(c - 1, max_targets) if c >= 4 else 0
        for k in range(n_targets):
            rows = np.flatnonzero(~broken)
            if rows.size == 0:
                break
            # ranked[:, 0] is y for every surviving sample
            target = ranked[rows, k + 1]
            res = pgd(model, x[rows], y[rows], single, "targeted-dlr", True,
                      seed + 1000 * (k + 1), idx[rows], target=target)
            hit = res.success
            x_adv[rows[hit]] = res.x_adv[hit]
            broken[rows] = hit
    return PerturbResult(x_adv, broken)


def run_attack(name: str, model, x, y, budget: AttackBudget, seed: int = 0,
               indices=None) -> PerturbResult:
    """Dispatch by configuration name; ``cw-l2`` reads ``epsilon`` as an l2 radius."""
    if name == "fgsm":
        return fgsm(model, x, y, budget)
    if name == "pgd":
        return pgd(model, x, y, budget, "ce", True, seed, indices)
    if name == "mim":
        return mim(model, x, y, budget)
    if name == "cw":
        return cw_linf(model, x, y, budget, seed, indices)
    if name == "cw-l2":
        res = cw_l2(model, x, y, budget)
        res.success = res.success & (res.distortion <= budget.epsilon)
        return res
    if name == "ensemble":
        return ensemble_eval(model, x, y, budget, seed, indices)
    raise ValueError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}")
