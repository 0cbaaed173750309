"""Assignment of an optimizer strategy to every adapter unit.

Layers are 1-based: ``hop-odd`` selects layers 1, 3, 5, ...; ``prefix:K``
selects layers 1..K (input side); ``suffix:K`` selects layers L-K+1..L.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

from .model import BRANCHES, ModelConfig
from .optim import STRATEGIES, ZO_STRATEGIES

PATTERN_KINDS = ("all", "hop_odd", "hop_even", "prefix", "suffix")
BRANCH_SELECTORS = {
    "dual": frozenset(BRANCHES),
    "vision": frozenset({"vision"}),
    "language": frozenset({"language"}),
    "none": frozenset(),
}


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerPattern:
    kind: str = "all"
    k: int = 0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise AllocationError(f"unknown layer pattern {self.kind!r}")
        if self.kind in ("prefix", "suffix") and self.k < 1:
            raise AllocationError(f"{self.kind} needs a positive layer count, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> "LayerPattern":
        text = text.strip()
        simple = {"all": "all", "hop-odd": "hop_odd", "hop-even": "hop_even"}
        if text in simple:
            return cls(simple[text])
        m = re.fullmatch(r"(prefix|suffix):(\d+)", text)
        if not m:
            raise AllocationError(f"invalid layer pattern {text!r}; expected all, hop-odd, hop-even, prefix:K or suffix:K")
        return cls(m.group(1), int(m.group(2)))

    def __str__(self) -> str:
        if self.kind in ("prefix", "suffix"):
            return f"{self.kind}:{self.k}"
        return self.kind.replace("_", "-")

    def check(self, num_layers: int) -> None:
        if self.kind in ("prefix", "suffix") and self.k > num_layers:
            raise AllocationError(f"{self}: k={self.k} exceeds num_layers={num_layers}")

    def layers(self, num_layers: int) -> frozenset[int]:
        self.check(num_layers)
        every = range(1, num_layers + 1)
        if self.kind == "all":
            return frozenset(every)
        if self.kind == "hop_odd":
            return frozenset(l for l in every if l % 2 == 1)
        if self.kind == "hop_even":
            return frozenset(l for l in every if l % 2 == 0)
        if self.kind == "prefix":
            return frozenset(range(1, self.k + 1))
        return frozenset(range(num_layers - self.k + 1, num_layers + 1))


def parse_branches(text: str) -> frozenset[str]:
    try:
        return BRANCH_SELECTORS[text]
    except KeyError:
        raise AllocationError(f"invalid branch selector {text!r}; expected one of {sorted(BRANCH_SELECTORS)}") from None


def branch_name(branches) -> str:
    for name, sel in BRANCH_SELECTORS.items():
        if sel == frozenset(branches):
            return name
    raise AllocationError(f"invalid branch set {sorted(branches)}")


@dataclass(frozen=True)
class AllocationPolicy:
    assignment: Mapping[tuple, str]
    zo_branches: frozenset[str]
    pattern: LayerPattern
    zo_strategy: str

    def strategy(self, unit_id: tuple) -> str:
        return assigned_strategy(self, unit_id)

    def fo_units(self) -> list[tuple]:
        return [u for u, s in self.assignment.items() if s == "fo"]

    def zo_units(self) -> list[tuple]:
        return [u for u, s in self.assignment.items() if s != "fo"]

    @property
    def name(self) -> str:
        return f"{branch_name(self.zo_branches)}_{self.pattern}_{self.zo_strategy}"


def make_policy(model_config: ModelConfig, branches, pattern: LayerPattern | str, zo_strategy: str) -> AllocationPolicy:
    """ZO for units in ``branches`` whose layer matches ``pattern``; FO elsewhere."""
    if isinstance(branches, str):
        branches = parse_branches(branches)
    branches = frozenset(branches)
    if not branches <= set(BRANCHES):
        raise AllocationError(f"unknown branches {sorted(branches - set(BRANCHES))}")
    if isinstance(pattern, str):
        pattern = LayerPattern.parse(pattern)
    if zo_strategy not in STRATEGIES:
        raise AllocationError(f"unknown strategy {zo_strategy!r}; expected one of {list(STRATEGIES)}")
    if not branches and pattern.kind != "all":
        raise AllocationError(f"pattern {pattern} given but no branch is selected for ZO")
    selected = pattern.layers(model_config.num_layers)
    chosen = zo_strategy if zo_strategy in ZO_STRATEGIES else "fo"
    assignment = {}
    for uid in model_config.unit_ids():
        branch, layer = uid[0], uid[1]
        assignment[uid] = chosen if branch in branches and layer in selected else "fo"
    return AllocationPolicy(MappingProxyType(assignment), branches, pattern, zo_strategy)


def assigned_strategy(policy: AllocationPolicy, unit_id: tuple) -> str:
    try:
        return policy.assignment[tuple(unit_id)]
    except KeyError:
        raise AllocationError(f"unit {unit_id} is not part of this policy") from None
