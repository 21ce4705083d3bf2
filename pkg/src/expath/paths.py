"""Simple-path enumeration between a prediction's endpoints and relation-path grouping."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from .kg import Fact, KnowledgeGraph, SignedRelation

MAX_PATH_LENGTH = 3
DEFAULT_PATH_CAP = 100_000


class Step(NamedTuple):
    """One traversed fact; ``inverse`` means it was walked tail -> head."""

    fact: Fact
    inverse: bool

    @property
    def src(self) -> int:
        return self.fact.tail if self.inverse else self.fact.head

    @property
    def dst(self) -> int:
        return self.fact.head if self.inverse else self.fact.tail

    @property
    def signed(self) -> SignedRelation:
        return SignedRelation(self.fact.relation, self.inverse)


GroundedPath = tuple  # tuple[Step, ...]
RelationPath = tuple  # tuple[SignedRelation, ...]


class GroundedPaths(list):
    """List of grounded paths; ``truncated`` is set when the cap cut enumeration short."""

    truncated: bool = False


def relation_path(path: GroundedPath) -> RelationPath:
    return tuple(step.signed for step in path)


def path_entities(path: GroundedPath) -> list[int]:
    return [path[0].src] + [step.dst for step in path]


def is_valid_path(path: GroundedPath, h: int, t: int) -> bool:
    """Chains from h to t without revisiting any entity."""
    if not path or path[0].src != h or path[-1].dst != t:
        return False
    for a, b in zip(path, path[1:]):
        if a.dst != b.src:
            return False
    ents = path_entities(path)
    return len(set(ents)) == len(ents)


def find_grounded_paths(
    kg: KnowledgeGraph,
    h: int,
    t: int,
    max_len: int = MAX_PATH_LENGTH,
    cap: int = DEFAULT_PATH_CAP,
    exclude: Fact | None = None,
) -> GroundedPaths:
    """All simple train-fact paths h -> t of length <= max_len, either orientation.

    ``exclude`` names one fact no path may use (the prediction being explained
    when it also appears in train).

    Ordered by length, then lexicographically by (relation, inverse flag, next
    entity) per step. Enumeration stops once ``cap`` paths are collected.
    """
    if h == t:
        raise ValueError("head and tail must differ")
    kg._check_entity(h)
    kg._check_entity(t)
    if not 1 <= max_len <= MAX_PATH_LENGTH:
        raise ValueError(f"max_len must be in 1..{MAX_PATH_LENGTH}")
    if cap <= 0:
        raise ValueError("cap must be positive")

    incident = {}

    def steps_from(e):
        out = incident.get(e)
        if out is None:
            out = [Step(f, sr.inverse) for sr, f, _ in kg.incident(e) if f != exclude]
            incident[e] = out
        return out

    # entities one hop away from t, for pruning the second-to-last step
    near_t = {step.dst for step in steps_from(t)}
    result = GroundedPaths()

    def extend(prefix, current, visited, length):
        depth = len(prefix)
        for step in steps_from(current):
            nxt = step.dst
            if depth + 1 == length:
                if nxt != t:
                    continue
                result.append(tuple(prefix) + (step,))
                if len(result) >= cap:
                    return True
                continue
            if nxt == t or nxt in visited:
                continue
            if depth + 2 == length and nxt not in near_t:
                continue
            prefix.append(step)
            visited.add(nxt)
            stop = extend(prefix, nxt, visited, length)
            visited.discard(nxt)
            prefix.pop()
            if stop:
                return True
        return False

    for length in range(1, max_len + 1):
        if extend([], h, {h}, length):
            result.truncated = True
            break
    return result


@dataclass
class PathGroup:
    relation_path: RelationPath
    grounded: list = field(default_factory=list)

    def __post_init__(self):
        self._first: Counter | None = None
        self._last: Counter | None = None

    def _counts(self):
        if self._first is None:
            self._first = Counter(p[0].fact for p in self.grounded)
            self._last = Counter(p[-1].fact for p in self.grounded)
        return self._first, self._last

    @property
    def first_facts(self) -> Counter:
        return self._counts()[0]

    @property
    def last_facts(self) -> Counter:
        return self._counts()[1]

    def position_proportions(self, f: Fact) -> tuple[float, float]:
        return position_proportions(f, self)


def _path_sort_key(rp: RelationPath):
    return (len(rp), tuple((sr.relation, sr.inverse) for sr in rp))


def aggregate(paths) -> list[PathGroup]:
    """Partition grounded paths by their signed relation sequence."""
    groups: dict[RelationPath, PathGroup] = {}
    for p in paths:
        rp = relation_path(p)
        group = groups.get(rp)
        if group is None:
            group = groups[rp] = PathGroup(rp)
        group.grounded.append(p)
    return [groups[rp] for rp in sorted(groups, key=_path_sort_key)]


def position_proportions(f: Fact, group: PathGroup) -> tuple[float, float]:
    """Share of the group's grounded paths whose first (p_h) / last (p_t) step is ``f``."""
    n = len(group.grounded)
    if n == 0:
        raise ValueError("path group is empty")
    first, last = group.first_facts, group.last_facts
    return first.get(f, 0) / n, last.get(f, 0) / n
