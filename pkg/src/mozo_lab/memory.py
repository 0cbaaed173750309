"""Float-count cost model of one training step.

Counts mirror the tape's saved-storage rules for the toy model, so a
recorded forward pass can be checked against them exactly. Per branch with
``n`` rows, width ``w``, rank ``r`` and first first-order layer ``f``, a layer
``l`` is *live* when ``l > f`` (its input carries a gradient):

* LoRA layer: ``live*n*w`` (tanh output) ``+ fo*(live*n*w + n*r)``
* MoE layer:  ``live*n*w + fo*live*n*w + (live or fo)*(n*E + 2*E*n*w) + fo*E*n*r``
* branch head when ``f`` exists: ``n*d + n`` (normalized rows plus norms)
* loss head when any unit is first-order: ``batch * candidates`` softmax outputs

Vision rows are the batch; language rows are the candidate classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from .allocation import AllocationPolicy
from .model import BRANCHES, ModelConfig


@dataclass(frozen=True)
class MemoryReport:
    tape_floats: int
    grad_floats: int
    perturb_floats: int

    def as_dict(self) -> dict:
        return asdict(self)


def unit_param_count(config: ModelConfig, branch: str) -> int:
    w, r = config.width(branch), config.rank
    if config.adapter == "lora":
        return 2 * r * w
    return config.experts * 2 * r * w + config.experts * w


def _branch_tape(config: ModelConfig, policy: AllocationPolicy, branch: str, rows: int) -> int:
    fo_layers = [u[1] for u in policy.fo_units() if u[0] == branch]
    if not fo_layers:
        return 0
    first = min(fo_layers)
    n, w, r, E = rows, config.width(branch), config.rank, config.experts
    total = 0
    for l in range(1, config.num_layers + 1):
        live = l > first
        fo = l in fo_layers
        if config.adapter == "lora":
            total += live * n * w + fo * (live * n * w + n * r)
        else:
            total += live * n * w + fo * live * n * w + (live or fo) * (n * E + 2 * E * n * w) + fo * E * n * r
    return total + n * config.embed_dim + n


def memory_footprint(
    model_config: ModelConfig, policy: AllocationPolicy, batch_size: int, num_candidates: Optional[int] = None
) -> MemoryReport:
    """Static memory of one step under ``policy``.

    ``num_candidates`` (rows fed through the language branch) defaults to the
    batch size.
    """
    c = batch_size if num_candidates is None else num_candidates
    rows = {"vision": batch_size, "language": c}
    tape = sum(_branch_tape(model_config, policy, b, rows[b]) for b in BRANCHES)
    if policy.fo_units():
        tape += batch_size * c
    grad = sum(unit_param_count(model_config, u[0]) for u in policy.fo_units())
    # one candidate holds a probe for every zeroth-order unit at once
    perturb = sum(unit_param_count(model_config, u[0]) for u in policy.zo_units())
    return MemoryReport(tape, grad, perturb)
