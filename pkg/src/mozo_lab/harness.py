"""Class-incremental training loop, evaluation and measurement suite."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import tensor as T
from .allocation import AllocationPolicy, make_policy
from .data import DataConfig, Task, TaskStream, batches, build_task_stream, make_dataset
from .memory import MemoryReport, memory_footprint
from .model import BatchObjective, ModelConfig, ModelState, init_model, loss_batch
from .model import _embed, _hidden_states
from .optim import DivergentLoss, ZOConfig, fo_step, zo_step
from .tensor import Rng

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class RunDiverged(RuntimeError):
    def __init__(self, task: int, step: int, cause: Exception):
        self.task, self.step, self.cause = task, step, cause
        super().__init__(f"run diverged at task {task}, step {step}: {cause}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    # step multipliers calibrated on the first task of the reference benchmark
    zo: ZOConfig = ZOConfig(lam=0.1, sign_lam=0.0065)
    branch: str = "none"
    pattern: str = "all"
    strategy: str = "zo-conservative"
    inc_size: int = 20
    epochs: int = 5
    batch_size: int = 16
    lr: float = 0.05
    opt_seed: int = 0
    output: Optional[str] = None

    @classmethod
    def from_seed(cls, seed: int, **overrides) -> "RunConfig":
        """Derive the data, model and optimizer seeds from one base seed."""
        base = cls(**overrides)
        data_seed, model_seed, opt_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3))
        return dataclasses.replace(
            base,
            data=dataclasses.replace(base.data, seed=data_seed),
            model=dataclasses.replace(base.model, seed=model_seed),
            opt_seed=opt_seed,
        )

    def policy(self) -> AllocationPolicy:
        return make_policy(self.model, self.branch, self.pattern, self.strategy)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sub = {"data": DataConfig, "model": ModelConfig, "zo": ZOConfig}
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        return cls(**d)

    def fingerprint(self, ignore_seeds: bool = True) -> str:
        d = self.to_dict()
        d.pop("output", None)
        if ignore_seeds:
            d["data"].pop("seed")
            d["model"].pop("seed")
            d.pop("opt_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunMetrics:
    config: dict = field(default_factory=dict)
    policy: str = ""
    loss: list[tuple[int, int, int, float]] = field(default_factory=list)
    gradvar: list[tuple[int, int, str, int, float, float]] = field(default_factory=list)
    train_accuracy: list[tuple[int, int, float]] = field(default_factory=list)
    per_task_accuracy: list[float] = field(default_factory=list)
    memory: Optional[MemoryReport] = None
    measured_tape_peak: int = 0
    backward_calls: int = 0
    batches_seen: int = 0
    data_access: list[tuple[str, int]] = field(default_factory=list)
    partial: bool = False
    error: Optional[str] = None

    @property
    def last_acc(self) -> float:
        return self.per_task_accuracy[-1] if self.per_task_accuracy else float("nan")

    @property
    def avg_acc(self) -> float:
        accs = self.per_task_accuracy
        return sum(accs) / len(accs) if accs else float("nan")

    def epoch_loss_std(self, task: int) -> list[float]:
        """Std of the step losses within each epoch of ``task``."""
        per_epoch: dict[int, list[float]] = {}
        for t, e, _, v in self.loss:
            if t == task:
                per_epoch.setdefault(e, []).append(v)
        return [float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for _, v in sorted(per_epoch.items())]

    def task_loss_std(self, task: int) -> float:
        """Mean over epochs of the within-epoch loss std (oscillation level)."""
        stds = self.epoch_loss_std(task)
        return float(np.mean(stds)) if stds else 0.0

    def mean_gradvar(self, branch: Optional[str] = None, units: Optional[set] = None) -> float:
        vals = [
            v
            for _, _, b, l, v, _ in self.gradvar
            if (branch is None or b == branch) and (units is None or (b, l) in units)
        ]
        return float(np.mean(vals)) if vals else float("nan")


# -- measurement primitives ------------------------------------------------------


def grad_variance(values) -> float:
    """Unbiased sample variance of the flattened gradient elements."""
    if hasattr(values, "flat") and callable(values.flat):
        flat = values.flat()
    else:
        flat = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in values]) if isinstance(
            values, (list, tuple)
        ) else np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("empty gradient")
    if flat.size == 1:
        return 0.0
    return float(np.var(flat, ddof=1))


def _predict(state: ModelState, x: np.ndarray, candidates: Sequence[int]) -> np.ndarray:
    with T.no_record():
        v = _embed(state, "vision", _hidden_states(state, "vision", np.asarray(x))[-1])
        protos = state.class_prototypes[np.asarray(candidates, dtype=np.int64)]
        t = _embed(state, "language", _hidden_states(state, "language", protos)[-1])
    return np.asarray(candidates)[np.argmax(v @ t.T, axis=1)]


def evaluate_seen(state: ModelState, stream: TaskStream, through_task: int, metrics: Optional[RunMetrics] = None) -> float:
    """Accuracy over the test splits of tasks ``0..through_task``; no task id is used."""
    if through_task < 0:
        raise ValueError("through_task must be >= 0")
    tasks = stream.tasks[: through_task + 1]
    if metrics is not None:
        metrics.data_access.extend(("test", t.index) for t in tasks)
    x = np.concatenate([t.test_x for t in tasks])
    y = np.concatenate([t.test_y for t in tasks])
    pred = _predict(state, x, stream.seen_classes(through_task))
    return float(np.mean(pred == y))


def train_task(
    state: ModelState,
    task: Task,
    policy: AllocationPolicy,
    config: RunConfig,
    metrics: RunMetrics,
    rng: Rng,
    keep_reports: Optional[list] = None,
) -> None:
    """Train the adapters on one task; candidates are the task's own classes."""
    fo_units = [state.units[u] for u in policy.fo_units()]
    zo_units = [state.units[u] for u in policy.zo_units()]
    strategy = policy.zo_strategy
    candidates = list(task.classes)
    shuffle_rng, probe_rng = rng.spawn(2)
    state.set_trainable(policy.fo_units())
    step = 0
    for epoch in range(config.epochs):
        metrics.data_access.append(("train", task.index))
        for x, y in batches(task, config.batch_size, shuffle_rng):
            try:
                loss_value = None
                if fo_units:
                    with T.recording() as tape:
                        loss = loss_batch(state, x, y, candidates, record=True)
                    metrics.measured_tape_peak = max(metrics.measured_tape_peak, tape.float_count)
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise DivergentLoss("first-order forward")
                    T.backward(loss)
                    metrics.backward_calls += 1
                    for u in fo_units:
                        g = [p.grad for p in u.params]
                        metrics.gradvar.append(
                            (task.index, step, u.branch, u.layer, grad_variance(g), _norm(g))
                        )
                    fo_step(fo_units, config.lr)
                if zo_units:
                    objective = BatchObjective(state, x, y, candidates)
                    report = zo_step(strategy, zo_units, objective, config.zo, probe_rng, config.lr)
                    if keep_reports is not None:
                        keep_reports.append(report)
                    if loss_value is None:
                        loss_value = report.base_loss
                    for u in zo_units:
                        est = report.estimates[u.id].raw
                        metrics.gradvar.append(
                            (task.index, step, u.branch, u.layer, grad_variance(est), _norm(est.values))
                        )
            except (DivergentLoss, FloatingPointError) as exc:
                raise RunDiverged(task.index, step, exc) from exc
            metrics.loss.append((task.index, epoch, step, float(loss_value)))
            metrics.batches_seen += 1
            step += 1
        acc = float(np.mean(_predict(state, task.train_x, candidates) == task.train_y))
        metrics.train_accuracy.append((task.index, epoch, acc))


def _norm(values) -> float:
    return float(math.sqrt(sum(float((np.asarray(v) ** 2).sum()) for v in values)))


def run_stream(config: RunConfig) -> RunMetrics:
    """Train every task in order, evaluating seen classes after each."""
    policy = config.policy()
    dataset = make_dataset(config.data)
    stream = build_task_stream(dataset, config.inc_size)
    state = init_model(config.model, dataset.prototypes)
    metrics = RunMetrics(config=config.to_dict(), policy=policy.name)
    metrics.memory = memory_footprint(config.model, policy, config.batch_size, config.inc_size)
    task_rngs = Rng(config.opt_seed).spawn(len(stream))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for task in stream:
            try:
                train_task(state, task, policy, config, metrics, task_rngs[task.index])
            except RunDiverged as exc:
                log.warning("%s", exc)
                metrics.partial = True
                metrics.error = str(exc)
                return metrics
            metrics.per_task_accuracy.append(evaluate_seen(state, stream, task.index, metrics))
    return metrics


# -- aggregation -------------------------------------------------------------------

SUMMARY_METRICS = ("last_acc", "avg_acc")


def aggregate_seeds(runs: Sequence[RunMetrics]) -> dict[str, dict[str, float]]:
    """Mean, unbiased std, min and max of each summary metric across seeds."""
    if len(runs) < 2:
        raise ValueError("aggregation needs at least two runs")
    prints = {RunConfig.from_dict(r.config).fingerprint() for r in runs}
    if len(prints) != 1:
        raise ValueError("runs differ in configuration beyond their seeds")
    out = {}
    for name in SUMMARY_METRICS:
        vals = sorted(float(getattr(r, name)) for r in runs)
        mean = math.fsum(vals) / len(vals)
        var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        out[name] = {"mean": mean, "std": math.sqrt(var), "min": vals[0], "max": vals[-1]}
    return out


def summary_row(m: RunMetrics, seed: Any) -> dict[str, Any]:
    mem = m.memory or MemoryReport(0, 0, 0)
    return {
        "policy": m.policy,
        "seed": seed,
        "last": m.last_acc,
        "avg": m.avg_acc,
        "tape_floats": mem.tape_floats,
        "grad_floats": mem.grad_floats,
        "perturb_floats": mem.perturb_floats,
    }


# -- export ------------------------------------------------------------------------

LOSS_COLUMNS = ("task", "epoch", "step", "loss")
GRADVAR_COLUMNS = ("task", "step", "branch", "layer", "variance", "norm")
NORMVAR_COLUMNS = ("task", "branch", "layer", "norm_variance")
SUMMARY_COLUMNS = ("policy", "seed", "last", "avg", "tape_floats", "grad_floats", "perturb_floats")


def _fmt(v) -> str:
    # repr round-trips floats exactly, so exports are reproducible bit for bit
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, columns: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def norm_variance_rows(m: RunMetrics) -> list[tuple]:
    """Cross-step variance of per-unit gradient norms, per task and unit."""
    groups: dict[tuple, list[float]] = {}
    for task, _, branch, layer, _, norm in m.gradvar:
        groups.setdefault((task, branch, layer), []).append(norm)
    return [(*k, float(np.var(v, ddof=1)) if len(v) > 1 else 0.0) for k, v in sorted(groups.items())]


def metrics_records(m: RunMetrics) -> list[dict]:
    """Event records for the JSONL export, in a fixed order."""
    # the output location is not part of the experiment, so files stay comparable across directories
    config = {k: v for k, v in m.config.items() if k != "output"}
    rec = [{"type": "config", "policy": m.policy, "config": config}]
    rec += [dict(zip(("type",) + LOSS_COLUMNS, ("loss",) + r)) for r in m.loss]
    rec += [dict(zip(("type",) + GRADVAR_COLUMNS, ("gradvar",) + r)) for r in m.gradvar]
    rec += [{"type": "train_accuracy", "task": t, "epoch": e, "accuracy": a} for t, e, a in m.train_accuracy]
    rec += [{"type": "task_accuracy", "task": i, "accuracy": a} for i, a in enumerate(m.per_task_accuracy)]
    if m.memory is not None:
        rec.append({"type": "memory", **m.memory.as_dict(), "measured_tape_peak": m.measured_tape_peak})
    rec.append(
        {
            "type": "summary",
            "last_acc": m.last_acc,
            "avg_acc": m.avg_acc,
            "backward_calls": m.backward_calls,
            "batches": m.batches_seen,
            "partial": m.partial,
            "error": m.error,
        }
    )
    for r in rec:
        r["schema"] = SCHEMA_VERSION
    return rec


def write_run(m: RunMetrics, run_dir, seed: Any = None) -> None:
    """Write config.json, metrics.jsonl and the per-family CSVs into ``run_dir``."""
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(m.config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(d / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in metrics_records(m):
            fh.write(json.dumps(r, sort_keys=True, allow_nan=True) + "\n")
    write_csv(d / "loss.csv", LOSS_COLUMNS, m.loss)
    write_csv(d / "gradvar.csv", GRADVAR_COLUMNS, m.gradvar)
    write_csv(d / "gradvar_norms.csv", NORMVAR_COLUMNS, norm_variance_rows(m))
    row = summary_row(m, seed)
    write_csv(d / "summary.csv", SUMMARY_COLUMNS, [tuple(row[c] for c in SUMMARY_COLUMNS)])


def read_run(run_dir) -> RunMetrics:
    """Rebuild a :class:`RunMetrics` from a ``metrics.jsonl`` export."""
    m = RunMetrics()
    for line in (Path(run_dir) / "metrics.jsonl").read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        if r.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {r.get('schema')!r}")
        kind = r["type"]
        if kind == "config":
            m.config, m.policy = r["config"], r["policy"]
        elif kind == "loss":
            m.loss.append(tuple(r[c] for c in LOSS_COLUMNS))
        elif kind == "gradvar":
            m.gradvar.append(tuple(r[c] for c in GRADVAR_COLUMNS))
        elif kind == "train_accuracy":
            m.train_accuracy.append((r["task"], r["epoch"], r["accuracy"]))
        elif kind == "task_accuracy":
            m.per_task_accuracy.append(r["accuracy"])
        elif kind == "memory":
            m.memory = MemoryReport(r["tape_floats"], r["grad_floats"], r["perturb_floats"])
            m.measured_tape_peak = r["measured_tape_peak"]
        elif kind == "summary":
            m.backward_calls, m.batches_seen = r["backward_calls"], r["batches"]
            m.partial, m.error = r["partial"], r["error"]
    return m
