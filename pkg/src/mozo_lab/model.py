"""Toy frozen dual-branch contrastive model with per-layer adapter units.

Each branch is a stack of frozen square layers. Layer ``l`` computes::

    h_l = tanh(h_{l-1} @ W_l) + adapter_l(h_{l-1})

where ``adapter_l`` is either a LoRA pair (``h @ A.T @ B.T``) or a small
softmax-gated mixture of LoRA experts. A frozen projection maps the last
hidden state to the shared embedding width, and rows are L2-normalized.

Layer indices are 1-based throughout.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

BRANCHES = ("vision", "language")
ADAPTER_KINDS = ("lora", "moe")

_tokens = itertools.count(1)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    vision_width: int = 64
    language_width: int = 32
    vision_input_dim: int = 64
    language_input_dim: int = 32
    embed_dim: int = 32
    adapter: str = "lora"
    rank: int = 4
    experts: int = 2
    logit_scale: float = 10.0
    lora_init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ModelError("num_layers must be positive")
        if self.adapter not in ADAPTER_KINDS:
            raise ModelError(f"unknown adapter kind {self.adapter!r}")
        for b in BRANCHES:
            if not 1 <= self.rank < self.width(b):
                raise ModelError(f"lora rank {self.rank} must be in [1, {self.width(b)})")
        if self.experts < 1:
            raise ModelError("experts must be >= 1")
        if self.logit_scale <= 0:
            raise ModelError("logit_scale must be positive")

    def width(self, branch: str) -> int:
        return {"vision": self.vision_width, "language": self.language_width}[_check_branch(branch)]

    def input_dim(self, branch: str) -> int:
        return {"vision": self.vision_input_dim, "language": self.language_input_dim}[_check_branch(branch)]

    def unit_ids(self) -> list[tuple[str, int, str]]:
        return [(b, l, self.adapter) for b in BRANCHES for l in range(1, self.num_layers + 1)]


def _check_branch(branch: str) -> str:
    if branch not in BRANCHES:
        raise ModelError(f"unknown branch {branch!r}")
    return branch


@dataclass
class ParamUnit:
    """One trainable adapter, addressed by ``(branch, layer, kind)``."""

    branch: str
    layer: int
    kind: str
    params: list[Tensor]
    frozen: bool = False
    _stash: list = field(default_factory=list, repr=False)

    @property
    def id(self) -> tuple[str, int, str]:
        return (self.branch, self.layer, self.kind)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def shapes(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.params]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def __call__(self, h: Tensor) -> Tensor:
        if self.kind == "lora":
            A, B = self.params
            return _lora(h, A, B)
        *pairs, gate = self.params
        weights = T.softmax(T.matmul(h, T.transpose(gate)))  # (batch, E)
        out = None
        for e in range(len(pairs) // 2):
            A, B = pairs[2 * e], pairs[2 * e + 1]
            pick = np.zeros((len(pairs) // 2, B.shape[0]))
            pick[e] = 1.0
            # column e of the gate spread across the output width
            w_e = T.matmul(weights, Tensor._wrap(pick))
            term = T.mul(w_e, _lora(h, A, B))
            out = term if out is None else T.add(out, term)
        return out


def _lora(h: Tensor, A: Tensor, B: Tensor) -> Tensor:
    return T.matmul(T.matmul(h, T.transpose(A)), T.transpose(B))


def perturb_unit(unit: ParamUnit, probe: Sequence[Tensor | np.ndarray], epsilon: float, sign: int) -> None:
    """In-place ``params += sign * epsilon * probe``.

    A ``+1`` call followed by a ``-1`` call with the same probe and epsilon
    restores the original values bit-exactly (the pre-perturbation values are
    stashed, since float addition is not exactly invertible).
    """
    if sign not in (1, -1):
        raise ModelError(f"sign must be +1 or -1, got {sign}")
    arrays = [p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in probe]
    if len(arrays) != len(unit.params) or any(a.shape != p.shape for a, p in zip(arrays, unit.params)):
        raise T.ShapeError("perturb_unit", tuple(p.shape for p in unit.params), tuple(a.shape for a in arrays))
    if sign == -1 and unit._stash:
        key, eps, saved = unit._stash[-1]
        if eps == epsilon and len(key) == len(arrays) and all(k is a for k, a in zip(key, arrays)):
            unit._stash.pop()
            for p, s in zip(unit.params, saved):
                p.data[...] = s
            return
    if sign == 1:
        unit._stash.append((arrays, epsilon, [p.data.copy() for p in unit.params]))
    for p, a in zip(unit.params, arrays):
        p.data += (sign * epsilon) * a


@dataclass
class ModelState:
    config: ModelConfig
    backbone: dict[str, list[Tensor]]
    projection: dict[str, Tensor]
    units: dict[tuple[str, int, str], ParamUnit]
    class_prototypes: Optional[np.ndarray] = None
    token: int = 0

    @property
    def logit_scale(self) -> float:
        return self.config.logit_scale

    def unit(self, branch: str, layer: int) -> ParamUnit:
        try:
            return self.units[(branch, layer, self.config.adapter)]
        except KeyError:
            raise ModelError(f"no unit at ({branch}, {layer})") from None

    def branch_units(self, branch: str) -> list[ParamUnit]:
        return [u for u in self.units.values() if u.branch == branch]

    def frozen_tensors(self) -> list[Tensor]:
        out = []
        for b in BRANCHES:
            out.extend(self.backbone[b])
            out.append(self.projection[b])
        return out

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for t in self.frozen_tensors():
            h.update(t.data.tobytes())
        return h.hexdigest()

    def set_trainable(self, unit_ids: Iterable[tuple]) -> None:
        """Mark exactly ``unit_ids`` as gradient-requiring."""
        chosen = set(unit_ids)
        for uid, u in self.units.items():
            for p in u.params:
                p.requires_grad = uid in chosen
                p.grad = None


def _orthogonal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    a = rng.normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_model(config: ModelConfig, class_prototypes: Optional[np.ndarray] = None) -> ModelState:
    rng = Rng(config.seed)
    frozen_rng, unit_rng = rng.spawn(2)
    backbone: dict[str, list[Tensor]] = {}
    projection: dict[str, Tensor] = {}
    units: dict[tuple[str, int, str], ParamUnit] = {}
    for b in BRANCHES:
        w, d = config.width(b), config.input_dim(b)
        if d != w:
            raise ModelError(f"{b}: input_dim {d} must equal width {w} (layers are square)")
        backbone[b] = [Tensor(_orthogonal(frozen_rng, w, w)) for _ in range(config.num_layers)]
        projection[b] = Tensor(_orthogonal(frozen_rng, w, config.embed_dim))
        for l in range(1, config.num_layers + 1):
            units[(b, l, config.adapter)] = ParamUnit(b, l, config.adapter, _init_adapter(config, w, unit_rng))
    return ModelState(config, backbone, projection, units, class_prototypes, token=next(_tokens))


def _init_adapter(config: ModelConfig, width: int, rng: Rng) -> list[Tensor]:
    r, std = config.rank, config.lora_init_std
    if config.adapter == "lora":
        return [Tensor(std * rng.normal((r, width))), Tensor(np.zeros((width, r)))]
    params = []
    for _ in range(config.experts):
        params.append(Tensor(std * rng.normal((r, width))))
        params.append(Tensor(np.zeros((width, r))))
    params.append(Tensor(std * rng.normal((config.experts, width))))
    return params


def encode(state: ModelState, branch: str, inputs: Tensor | np.ndarray, record: bool = False) -> Tensor:
    """Embed a batch of ``branch`` inputs; rows come out unit-norm."""
    _check_branch(branch)
    x = inputs if isinstance(inputs, Tensor) else Tensor._wrap(np.asarray(inputs, dtype=np.float64))
    d = state.config.input_dim(branch)
    if x.data.ndim != 2 or x.shape[1] != d:
        raise T.ShapeError(f"encode[{branch}]", x.shape, (-1, d))

    def run() -> Tensor:
        h = x
        for l, W in enumerate(state.backbone[branch], start=1):
            h = T.add(T.tanh(T.matmul(h, W)), state.unit(branch, l)(h))
        return T.l2_normalize(T.matmul(h, state.projection[branch]))

    return T.forward_eval(run, record, T.active_tape() if record else None)


def logits(state: ModelState, vision_batch, candidate_classes: Sequence[int], record: bool = False) -> Tensor:
    if state.class_prototypes is None:
        raise ModelError("model has no class prototypes attached")
    protos = state.class_prototypes[np.asarray(candidate_classes, dtype=np.int64)]

    def run() -> Tensor:
        v = encode(state, "vision", vision_batch, record)
        t = encode(state, "language", protos, record)
        sims = T.matmul(v, T.transpose(t))
        return T.mul(sims, Tensor._wrap(np.asarray(state.logit_scale)))

    return T.forward_eval(run, record, T.active_tape() if record else None)


def loss_batch(state: ModelState, vision_batch, class_ids, candidate_classes: Sequence[int], record: bool = False) -> Tensor:
    """Mean softmax cross-entropy of each sample against its class position."""
    candidates = [int(c) for c in candidate_classes]
    if not candidates:
        raise ModelError("candidate_classes must be non-empty")
    pos = {c: i for i, c in enumerate(candidates)}
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    missing = sorted({int(c) for c in ids} - pos.keys())
    if missing:
        raise ModelError(f"class ids {missing} not among the candidate classes")
    target = np.zeros((ids.size, len(candidates)))
    target[np.arange(ids.size), [pos[int(c)] for c in ids]] = 1.0

    def run() -> Tensor:
        return cross_entropy(logits(state, vision_batch, candidates, record), target)

    return T.forward_eval(run, record, T.active_tape() if record else None)


def cross_entropy(z: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(z) rows against one-hot ``target`` rows."""
    logp = T.log(T.softmax(z))
    picked = T.sum(T.mul(logp, Tensor._wrap(np.asarray(target, dtype=np.float64))))
    return T.mul(picked, Tensor._wrap(np.asarray(-1.0 / z.shape[0])))


@dataclass(frozen=True)
class UnitSnapshot:
    token: int
    values: dict[tuple[str, int, str], tuple[np.ndarray, ...]]


def snapshot_units(state: ModelState) -> UnitSnapshot:
    return UnitSnapshot(state.token, {uid: tuple(p.data.copy() for p in u.params) for uid, u in state.units.items()})


def restore_units(state: ModelState, snap: UnitSnapshot) -> None:
    if snap.token != state.token or snap.values.keys() != state.units.keys():
        raise ModelError("snapshot was taken from a different model")
    for uid, u in state.units.items():
        for p, v in zip(u.params, snap.values[uid]):
            p.data[...] = v
        u._stash.clear()


# -- tape-free evaluation ---------------------------------------------------------


def _adapter_np(unit: ParamUnit, h: np.ndarray) -> np.ndarray:
    if unit.kind == "lora":
        A, B = unit.params
        return (h @ A.data.T) @ B.data.T
    *pairs, gate = unit.params
    z = h @ gate.data.T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    out = None
    for k in range(len(pairs) // 2):
        term = w[:, k : k + 1] * ((h @ pairs[2 * k].data.T) @ pairs[2 * k + 1].data.T)
        out = term if out is None else out + term
    return out


def _hidden_states(state: ModelState, branch: str, x: np.ndarray, start: int = 1, hs=None) -> list[np.ndarray]:
    """Hidden states ``[h_0, ..., h_L]``; layers before ``start`` are reused from ``hs``."""
    out = list(hs[:start]) if hs is not None else [x]
    h = out[-1]
    for l in range(start, state.config.num_layers + 1):
        h = np.tanh(h @ state.backbone[branch][l - 1].data) + _adapter_np(state.unit(branch, l), h)
        out.append(h)
    return out


def _embed(state: ModelState, branch: str, h: np.ndarray) -> np.ndarray:
    y = h @ state.projection[branch].data
    return y / np.sqrt((y * y).sum(axis=-1, keepdims=True))


def _xent(state: ModelState, v: np.ndarray, t: np.ndarray, target: np.ndarray) -> float:
    z = (v @ t.T) * state.logit_scale
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    logp = np.log(e / e.sum(axis=-1, keepdims=True))
    return float((logp * target).sum() * (-1.0 / target.shape[0]))


class BatchObjective:
    """Loss of one minibatch as a function of the current adapter parameters.

    Calling the object evaluates the full loss without touching any tape.
    ``prime()`` additionally caches per-layer hidden states so that
    ``restricted(unit_id)`` can re-evaluate the loss after a change confined
    to a single unit by recomputing only that branch from the unit's layer.
    """

    def __init__(self, state: ModelState, vision_batch, class_ids, candidate_classes: Sequence[int]):
        if state.class_prototypes is None:
            raise ModelError("model has no class prototypes attached")
        self.state = state
        self.candidates = [int(c) for c in candidate_classes]
        pos = {c: i for i, c in enumerate(self.candidates)}
        ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
        missing = sorted({int(c) for c in ids} - pos.keys())
        if missing:
            raise ModelError(f"class ids {missing} not among the candidate classes")
        self.target = np.zeros((ids.size, len(self.candidates)))
        self.target[np.arange(ids.size), [pos[int(c)] for c in ids]] = 1.0
        self.inputs = {
            "vision": np.asarray(vision_batch.data if isinstance(vision_batch, Tensor) else vision_batch, dtype=np.float64),
            "language": state.class_prototypes[np.asarray(self.candidates, dtype=np.int64)],
        }
        self.calls = 0
        self._hs: Optional[dict[str, list[np.ndarray]]] = None
        self._emb: Optional[dict[str, np.ndarray]] = None

    def __call__(self) -> float:
        self.calls += 1
        emb = {b: _embed(self.state, b, _hidden_states(self.state, b, self.inputs[b])[-1]) for b in BRANCHES}
        return _xent(self.state, emb["vision"], emb["language"], self.target)

    def prime(self) -> float:
        """Evaluate at the current parameters and cache hidden states."""
        self.calls += 1
        self._hs = {b: _hidden_states(self.state, b, self.inputs[b]) for b in BRANCHES}
        self._emb = {b: _embed(self.state, b, self._hs[b][-1]) for b in BRANCHES}
        return _xent(self.state, self._emb["vision"], self._emb["language"], self.target)

    def restricted(self, unit_id: tuple) -> float:
        """Loss when only ``unit_id`` differs from the primed parameters."""
        if self._hs is None:
            return self()
        self.calls += 1
        branch, layer = unit_id[0], unit_id[1]
        hs = _hidden_states(self.state, branch, self.inputs[branch], start=layer, hs=self._hs[branch])
        emb = dict(self._emb)
        emb[branch] = _embed(self.state, branch, hs[-1])
        return _xent(self.state, emb["vision"], emb["language"], self.target)

    def invalidate(self) -> None:
        self._hs = self._emb = None

    def predictions(self) -> np.ndarray:
        emb = {b: _embed(self.state, b, _hidden_states(self.state, b, self.inputs[b])[-1]) for b in BRANCHES}
        return np.asarray(self.candidates)[np.argmax(emb["vision"] @ emb["language"].T, axis=1)]
