"""Semantic classes, per-landmark label histograms, mode voting and gate policies.

A landmark's condition variable is decided from the mode of the labels of
all its 2D observations. Ties and landmarks with too little evidence keep the
gate closed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Hashable, Iterable

import numpy as np

from .errors import EmptyHistogram


class SemanticClass(IntEnum):
    """The 12 labels, with stable integer codes used in every file format."""

    SKY = 0
    BUILDING = 1
    POLE = 2
    ROAD_MARKING = 3
    ROAD = 4
    PAVEMENT = 5
    TREE = 6
    SIGN_SYMBOL = 7
    FENCE = 8
    VEHICLE = 9
    PEDESTRIAN = 10
    BIKE = 11

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name) -> "SemanticClass":
        """Accepts an integer code, a display name (``RoadMarking``) or an enum name."""
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        key = str(name).strip()
        if key.isdigit():
            return cls(int(key))
        norm = key.replace("_", "").replace(" ", "").lower()
        for c in cls:
            if norm in (c.label.lower(), c.name.replace("_", "").lower()):
                return c
        raise ValueError(f"unknown semantic class {name!r}")


_LABELS = {
    SemanticClass.SKY: "Sky",
    SemanticClass.BUILDING: "Building",
    SemanticClass.POLE: "Pole",
    SemanticClass.ROAD_MARKING: "RoadMarking",
    SemanticClass.ROAD: "Road",
    SemanticClass.PAVEMENT: "Pavement",
    SemanticClass.TREE: "Tree",
    SemanticClass.SIGN_SYMBOL: "SignSymbol",
    SemanticClass.FENCE: "Fence",
    SemanticClass.VEHICLE: "Vehicle",
    SemanticClass.PEDESTRIAN: "Pedestrian",
    SemanticClass.BIKE: "Bike",
}

N_CLASSES = len(SemanticClass)
ALL_CLASSES = frozenset(SemanticClass)
DYNAMIC_CLASSES = frozenset(
    {SemanticClass.VEHICLE, SemanticClass.PEDESTRIAN, SemanticClass.BIKE}
)


class Context(Enum):
    TRACKING = "tracking"
    MAPPING = "mapping"
    LOCALIZATION = "localization"


@dataclass(frozen=True)
class LabelHistogram:
    counts: tuple = (0,) * N_CLASSES

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != N_CLASSES or min(counts) < 0:
            raise ValueError("histogram needs 12 non-negative counts")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @classmethod
    def from_labels(cls, labels: Iterable) -> "LabelHistogram":
        codes = np.fromiter((int(c) for c in labels), dtype=np.int64)
        return cls(tuple(np.bincount(codes, minlength=N_CLASSES)[:N_CLASSES]))

    def __getitem__(self, c) -> int:
        return self.counts[int(c)]

    def accumulate(self, label) -> "LabelHistogram":
        return accumulate(self, label)


def accumulate(h: LabelHistogram, label) -> LabelHistogram:
    counts = list(h.counts)
    counts[int(label)] += 1
    return LabelHistogram(tuple(counts))


def mode(h: LabelHistogram) -> tuple[SemanticClass, bool]:
    """Most frequent class and whether the maximum is shared.

    On a tie the lowest class code wins.
    """
    if h.total == 0:
        raise EmptyHistogram("empty histogram")
    counts = np.asarray(h.counts)
    best = int(np.argmax(counts))  # argmax returns the first (lowest code) maximum
    is_tie = int(np.count_nonzero(counts == counts[best])) > 1
    return SemanticClass(best), is_tie


@dataclass(frozen=True)
class GatePolicy:
    context: Context
    valid_classes: frozenset
    min_observations: int = 2

    def __post_init__(self):
        valid = frozenset(SemanticClass.parse(c) for c in self.valid_classes)
        if not valid:
            raise ValueError("a gate policy needs at least one valid class")
        if self.min_observations < 1:
            raise ValueError("min_observations must be positive")
        object.__setattr__(self, "valid_classes", valid)

    @property
    def rejected_classes(self) -> frozenset:
        return ALL_CLASSES - self.valid_classes

    def accepts(self, c) -> bool:
        return SemanticClass.parse(c) in self.valid_classes


@dataclass(frozen=True)
class ConditionVariable:
    landmark_id: Hashable
    value: bool
    decided: bool

    @property
    def is_open(self) -> bool:
        # undecided gates are closed
        return self.decided and self.value


TRACKING_REJECTED = frozenset(
    {SemanticClass.SKY, SemanticClass.PEDESTRIAN, SemanticClass.VEHICLE, SemanticClass.BIKE}
)
MAPPING_VALID = frozenset(
    {
        SemanticClass.POLE,
        SemanticClass.ROAD_MARKING,
        SemanticClass.PAVEMENT,
        SemanticClass.SIGN_SYMBOL,
        SemanticClass.TREE,
        SemanticClass.BUILDING,
        SemanticClass.FENCE,
    }
)


def default_policy(context) -> GatePolicy:
    context = Context(context)
    if context is Context.TRACKING:
        return GatePolicy(context, ALL_CLASSES - TRACKING_REJECTED, 2)
    return GatePolicy(context, MAPPING_VALID, 2)


def accept_all_policy(context, min_observations: int = 2) -> GatePolicy:
    """Policy with every class valid; used to disable semantic selection."""
    return GatePolicy(Context(context), ALL_CLASSES, min_observations)


def decide_condition(h: LabelHistogram, policy: GatePolicy, landmark_id=None) -> ConditionVariable:
    if h.total < policy.min_observations:
        return ConditionVariable(landmark_id, False, False)
    cls, is_tie = mode(h)
    return ConditionVariable(landmark_id, (cls in policy.valid_classes) and not is_tie, True)


@dataclass
class LabelBook:
    """Per-landmark histogram bookkeeping.

    Pushes fresh gate values into a graph whenever asked, so gates follow the
    latest evidence (a landmark can be admitted and later dropped).
    """

    histograms: dict = field(default_factory=dict)

    def observe(self, landmark_id, label) -> LabelHistogram:
        h = self.histograms.get(landmark_id, LabelHistogram())
        h = accumulate(h, label)
        self.histograms[landmark_id] = h
        return h

    def condition(self, landmark_id, policy: GatePolicy) -> ConditionVariable:
        h = self.histograms.get(landmark_id, LabelHistogram())
        return decide_condition(h, policy, landmark_id)

    def apply(self, graph, policy: GatePolicy, gate_of=lambda lid: lid) -> int:
        """Set every known gate in ``graph``; returns the number of open gates."""
        n_open = 0
        for lid in sorted(self.histograms, key=repr):
            gate = gate_of(lid)
            if gate not in graph.gates:
                continue
            is_open = self.condition(lid, policy).is_open
            graph.set_gate(gate, is_open)
            n_open += is_open
        return n_open
