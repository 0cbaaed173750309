"""First-order and zeroth-order update rules over adapter units.

All zeroth-order strategies share one estimator: perturb a single unit by
``epsilon * probe``, take the forward difference of the loss against the
unperturbed loss, and scale the probe by that difference quotient. The
strategies differ only in how estimates become committed updates:

* ``zo-naive``        one probe per unit, update immediately
* ``zo-sign``         as ``zo-naive`` but the estimate is replaced by its sign
* ``zo-conservative`` ``K`` candidate updates, commit the one with lowest loss
* ``mozo``            sign estimates, smaller perturbation on vision units,
                      wrapped in conservative selection by default

A loss function is any zero-argument callable returning the loss of the
current parameters as a float. If it also exposes ``restricted(unit_id)``
(see :class:`mozo_lab.model.BatchObjective`) that cheaper path is used when
only one unit is perturbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import ParamUnit, perturb_unit
from .tensor import Rng

STRATEGIES = ("fo", "zo-naive", "zo-conservative", "zo-sign", "mozo")
ZO_STRATEGIES = STRATEGIES[1:]


class OptimError(RuntimeError):
    pass


class DivergentLoss(OptimError):
    def __init__(self, detail: str = ""):
        super().__init__("divergent loss" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class ZOConfig:
    epsilon: float = 0.001
    epsilon_vision: float = 0.0005
    epsilon_language: float = 0.001
    candidates: int = 4
    sign_normalize: bool = False
    lam: float = 1.0
    # step multiplier for sign-transformed updates; None means ``lam``
    sign_lam: Optional[float] = None
    probe: str = "gaussian"
    central: bool = False
    mozo_conservative: bool = True

    def __post_init__(self):
        if min(self.epsilon, self.epsilon_vision, self.epsilon_language) <= 0:
            raise OptimError("perturbation scales must be positive")
        if self.candidates < 1:
            raise OptimError("need at least one candidate")
        if self.probe not in ("gaussian", "rademacher"):
            raise OptimError(f"unknown probe distribution {self.probe!r}")

    def check_mozo(self) -> None:
        if not self.epsilon_vision < self.epsilon_language:
            raise OptimError(
                f"mozo needs epsilon_vision < epsilon_language, got {self.epsilon_vision} >= {self.epsilon_language}"
            )

    def step_size(self, learning_rate: float, sign: bool) -> float:
        lam = self.sign_lam if sign and self.sign_lam is not None else self.lam
        return lam * learning_rate

    def epsilon_for(self, branch: str, strategy: str) -> float:
        if strategy == "mozo":
            return self.epsilon_vision if branch == "vision" else self.epsilon_language
        return self.epsilon


@dataclass
class GradEstimate:
    unit_id: tuple
    values: list[np.ndarray]
    strategy: str
    coefficient: Optional[float] = None
    probe_id: Optional[int] = None
    # the unsigned estimate this one was derived from, if any
    source: Optional["GradEstimate"] = None

    @property
    def raw(self) -> "GradEstimate":
        return self if self.source is None else self.source.raw

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values])


@dataclass
class StepReport:
    strategy: str
    base_loss: Optional[float]
    estimates: dict[tuple, GradEstimate]
    candidate_losses: list[float] = field(default_factory=list)
    committed: Optional[int] = None
    # per-candidate update vectors, kept only when asked for (replay checks)
    candidate_updates: Optional[list[dict[tuple, list[np.ndarray]]]] = None

    @property
    def committed_loss(self) -> Optional[float]:
        if self.committed is None or not self.candidate_losses:
            return None
        return self.candidate_losses[self.committed]


# -- first order --------------------------------------------------------------------


def fo_step(units: Sequence[ParamUnit], learning_rate: float) -> None:
    """``theta <- theta - lr * grad`` for every tensor, then clear the grads."""
    for u in units:
        if any(p.grad is None for p in u.params):
            raise OptimError(f"missing gradient for unit {u.id}")
    for u in units:
        for p in u.params:
            p.data -= learning_rate * p.grad
            p.grad = None


# -- zeroth order ---------------------------------------------------------------------


def _eval(loss_fn: Callable[[], float], unit_id=None) -> float:
    with T.no_record():
        if unit_id is not None and hasattr(loss_fn, "restricted"):
            value = loss_fn.restricted(unit_id)
        else:
            value = loss_fn()
    return float(value)


def draw_probe(unit: ParamUnit, rng: Rng, kind: str = "gaussian") -> list[np.ndarray]:
    draw = rng.normal if kind == "gaussian" else rng.rademacher
    return [draw(p.shape) for p in unit.params]


def zo_estimate(
    unit: ParamUnit,
    loss_fn: Callable[[], float],
    probe: Sequence[np.ndarray],
    epsilon: float,
    base_loss: Optional[float] = None,
    central: bool = False,
    strategy: str = "zo",
    probe_id: Optional[int] = None,
) -> GradEstimate:
    """Forward-difference estimate ``[(L(theta + eps*d) - L(theta)) / eps] * d``.

    ``base_loss`` may be supplied when ``L(theta)`` is already known. With
    ``central=True`` the symmetric quotient ``(L(+) - L(-)) / 2eps`` is used.
    The unit's parameters are restored bit-exactly before returning.
    """
    probe = [np.asarray(p, dtype=np.float64) for p in probe]
    if central:
        perturb_unit(unit, probe, epsilon, +1)
        try:
            up = _eval(loss_fn, unit.id)
        finally:
            perturb_unit(unit, probe, epsilon, -1)
        neg = [-p for p in probe]
        perturb_unit(unit, neg, epsilon, +1)
        try:
            down = _eval(loss_fn, unit.id)
        finally:
            perturb_unit(unit, neg, epsilon, -1)
        coef = (up - down) / (2.0 * epsilon)
    else:
        if base_loss is None:
            base_loss = _base(loss_fn)
        perturb_unit(unit, probe, epsilon, +1)
        try:
            up = _eval(loss_fn, unit.id)
        finally:
            perturb_unit(unit, probe, epsilon, -1)
        coef = (up - base_loss) / epsilon
    if not math.isfinite(coef):
        raise DivergentLoss(f"unit {unit.id}")
    return GradEstimate(unit.id, [coef * p for p in probe], strategy, coef, probe_id)


def sign_transform(estimate: GradEstimate) -> GradEstimate:
    """Element-wise sign, keeping only the direction of each coordinate."""
    return GradEstimate(
        estimate.unit_id,
        [np.sign(v) for v in estimate.values],
        estimate.strategy,
        estimate.coefficient,
        estimate.probe_id,
        estimate,
    )


def _estimate_all(units, loss_fn, config, rng, strategy, base_loss, sign, probe_base=0):
    ests = {}
    for i, u in enumerate(units):
        eps = config.epsilon_for(u.branch, strategy)
        probe = draw_probe(u, rng, config.probe)
        est = zo_estimate(u, loss_fn, probe, eps, base_loss, config.central, strategy, probe_base + i)
        ests[u.id] = sign_transform(est) if sign else est
    return ests


def _apply(units, ests, step_size: float) -> dict[tuple, list[np.ndarray]]:
    deltas = {}
    for u in units:
        d = [-step_size * v for v in ests[u.id].values]
        for p, dv in zip(u.params, d):
            p.data += dv
        deltas[u.id] = d
    return deltas


def _snapshot(units):
    return [[p.data.copy() for p in u.params] for u in units]


def _restore(units, snap):
    for u, vals in zip(units, snap):
        for p, v in zip(u.params, vals):
            p.data[...] = v


def _base(loss_fn) -> float:
    with T.no_record():
        value = loss_fn.prime() if hasattr(loss_fn, "prime") else loss_fn()
    if not math.isfinite(value):
        raise DivergentLoss("at the current parameters")
    return float(value)


def zo_step_naive(units, loss_fn, config: ZOConfig, rng: Rng, learning_rate: float, strategy: str = "zo-naive") -> StepReport:
    """One probe per unit and an immediate update, no loss-based validation."""
    units = list(units)
    if not units:
        return StepReport(strategy, None, {})
    sign = config.sign_normalize or strategy in ("zo-sign", "mozo")
    base = _base(loss_fn)
    ests = _estimate_all(units, loss_fn, config, rng, strategy, base, sign)
    _apply(units, ests, config.step_size(learning_rate, sign))
    return StepReport(strategy, base, ests)


def zo_step_conservative(
    units,
    loss_fn,
    config: ZOConfig,
    rng: Rng,
    learning_rate: float,
    strategy: str = "zo-conservative",
    keep_candidates: bool = False,
) -> StepReport:
    """Try ``K`` candidate updates and commit only the lowest-loss one.

    Every candidate draws fresh per-unit probes at the same starting point.
    Non-finite candidates are discarded; ties go to the lowest index.
    """
    units = list(units)
    if not units:
        return StepReport(strategy, None, {})
    sign = config.sign_normalize or strategy in ("zo-sign", "mozo")
    step_size = config.step_size(learning_rate, sign)
    base = _base(loss_fn)
    start = _snapshot(units)
    losses, cand_ests, cand_updates = [], [], []
    for k in range(config.candidates):
        ests = _estimate_all(units, loss_fn, config, rng, strategy, base, sign, probe_base=k * len(units))
        deltas = _apply(units, ests, step_size)
        with T.no_record():
            trial = float(loss_fn())
        _restore(units, start)
        losses.append(trial)
        cand_ests.append(ests)
        if keep_candidates:
            cand_updates.append(deltas)
    finite = [i for i, v in enumerate(losses) if math.isfinite(v)]
    if not finite:
        raise DivergentLoss("every candidate update")
    best = min(finite, key=lambda i: (losses[i], i))
    _apply(units, cand_ests[best], step_size)
    return StepReport(strategy, base, cand_ests[best], losses, best, cand_updates if keep_candidates else None)


def mozo_step(units, loss_fn, config: ZOConfig, rng: Rng, learning_rate: float, keep_candidates: bool = False) -> StepReport:
    """Sign-normalized estimates with branch-specific perturbation scales."""
    config.check_mozo()
    for u in units:
        if u.branch not in ("vision", "language"):
            raise OptimError(f"unit {u.id} has no modality branch")
    if config.mozo_conservative:
        return zo_step_conservative(units, loss_fn, config, rng, learning_rate, "mozo", keep_candidates)
    return zo_step_naive(units, loss_fn, config, rng, learning_rate, "mozo")


def zo_step(strategy: str, units, loss_fn, config: ZOConfig, rng: Rng, learning_rate: float, **kw) -> StepReport:
    if strategy == "zo-naive":
        return zo_step_naive(units, loss_fn, config, rng, learning_rate)
    if strategy == "zo-sign":
        return zo_step_naive(units, loss_fn, config, rng, learning_rate, "zo-sign")
    if strategy == "zo-conservative":
        return zo_step_conservative(units, loss_fn, config, rng, learning_rate, **kw)
    if strategy == "mozo":
        return mozo_step(units, loss_fn, config, rng, learning_rate, **kw)
    raise OptimError(f"unknown zeroth-order strategy {strategy!r}")
