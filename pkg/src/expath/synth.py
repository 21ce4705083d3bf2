"""Seeded generator for knowledge graphs with planted closed-path rules.

Each planted rule ``head <- b1, ..., bn`` gets a layered entity structure:
every entity in layer i-1 receives one ``b_i`` edge into a random member of
the (smaller) layer i, so layers fan in like films -> directors -> countries.
Head facts are then materialized on every body-connected pair with the rule
probability, corrected for the head facts later held out of the train split.
Body relations always stay in train, which guarantees that every held-out
head fact keeps at least one grounded body path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .kg import Fact, KnowledgeGraph, SignedRelation, build_graph


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class PlantedRule:
    head: str
    body: list[str]
    probability: float = 0.9

    def __post_init__(self):
        if not 0 < self.probability <= 1:
            raise ValueError(f"rule probability must be in (0, 1], got {self.probability}")
        if not 1 <= len(self.body) <= 3:
            raise ValueError("rule body must have 1 to 3 relations")


@dataclass
class SyntheticSpec:
    entities: int = 1000
    relations: int = 6
    rules: list[PlantedRule] = field(default_factory=lambda: [PlantedRule("r0", ["r1", "r2"], 0.9)])
    density: float = 1.0
    seed: int = 0
    fan_in: float = 4.0
    holdout: float = 0.05

    def __post_init__(self):
        self.rules = [r if isinstance(r, PlantedRule) else PlantedRule(**r) for r in self.rules]
        if self.entities < 4 or self.relations < 1:
            raise ValueError("need at least 4 entities and 1 relation")
        if self.density < 0 or self.fan_in < 1:
            raise ValueError("density must be >= 0 and fan_in >= 1")
        if not 0 <= self.holdout < 0.5:
            raise ValueError("holdout must be in [0, 0.5)")
        names = set(self.relation_names)
        for rule in self.rules:
            for label in [rule.head, *rule.body]:
                if label.rstrip("'") not in names:
                    raise ValueError(f"rule uses relation {label!r} outside r0..r{self.relations - 1}")

    @property
    def relation_names(self) -> list[str]:
        return [f"r{i}" for i in range(self.relations)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        return cls(**data)


def _signed(label: str, rel_ids: dict[str, int]) -> SignedRelation:
    inverse = label.endswith("'")
    return SignedRelation(rel_ids[label.rstrip("'")], inverse)


def _layer_sizes(total: int, length: int, fan_in: float) -> list[int]:
    weights = [fan_in ** -i for i in range(length + 1)]
    scale = total / sum(weights)
    return [max(2, int(round(scale * w))) for w in weights]


def generate(spec: SyntheticSpec) -> KnowledgeGraph:
    rng = np.random.default_rng(spec.seed)
    n = spec.entities
    width = len(str(n - 1))
    entity_labels = [f"e{i:0{width}d}" for i in range(n)]
    rel_ids = {name: i for i, name in enumerate(spec.relation_names)}
    head_rels = {rel_ids[r.head] for r in spec.rules}
    body_rels = {_signed(b, rel_ids).relation for r in spec.rules for b in r.body}

    facts: set[Fact] = set()
    pool = rng.permutation(n)
    share = int(0.8 * n) // max(1, len(spec.rules))
    for i, rule in enumerate(spec.rules):
        members = pool[i * share:(i + 1) * share]
        sizes = _layer_sizes(len(members), len(rule.body), spec.fan_in)
        layers, offset = [], 0
        for size in sizes:
            layers.append(members[offset:offset + size])
            offset += size
        for step, label in enumerate(rule.body):
            sr = _signed(label, rel_ids)
            src, dst = layers[step], layers[step + 1]
            if len(src) == 0 or len(dst) == 0:
                raise InfeasibleSpecError("too few entities for the planted rule layers")
            targets = dst[rng.integers(0, len(dst), size=len(src))]
            for u, v in zip(src.tolist(), targets.tolist()):
                facts.add(Fact(u, sr.relation, v) if not sr.inverse else Fact(v, sr.relation, u))

    noise_rels = [r for r in range(spec.relations) if r not in head_rels] or list(range(spec.relations))
    n_noise = int(round(spec.density * n))
    for _ in range(n_noise):
        h, t = rng.integers(0, n, size=2).tolist()
        if h != t:
            facts.add(Fact(h, noise_rels[int(rng.integers(len(noise_rels)))], t))

    held_fraction = 2 * spec.holdout
    head_facts: set[Fact] = set()
    kg_body = KnowledgeGraph(entity_labels, spec.relation_names, sorted(facts))
    for rule in spec.rules:
        p = min(1.0, rule.probability / (1.0 - held_fraction))
        body = [_signed(b, rel_ids) for b in rule.body]
        m = kg_body.adjacency(body[0])
        for sr in body[1:]:
            m = m.matmul(kg_body.adjacency(sr))
        pairs = [(a, b) for a, b in m.pairs() if a != b]
        keep = rng.random(len(pairs)) < p
        made = [Fact(a, rel_ids[rule.head], b) for (a, b), k in zip(pairs, keep) if k]
        if not made:
            raise InfeasibleSpecError(f"rule {rule.head} <- {', '.join(rule.body)} produced no head facts")
        head_facts.update(made)
    facts |= head_facts

    train, valid, test = [], [], []
    by_rel: dict[int, list[Fact]] = {}
    for f in sorted(facts):
        by_rel.setdefault(f.relation, []).append(f)
    for r in sorted(by_rel):
        group = by_rel[r]
        if r in body_rels and r not in head_rels:
            train.extend(group)
            continue
        order = rng.permutation(len(group))
        n_out = int(round(spec.holdout * len(group)))
        valid.extend(group[j] for j in order[:n_out])
        test.extend(group[j] for j in order[n_out:2 * n_out])
        train.extend(group[j] for j in order[2 * n_out:])
    # re-encode through the loader path so ids match a reload from disk
    def labels(split):
        return [(entity_labels[f.head], spec.relation_names[f.relation], entity_labels[f.tail]) for f in sorted(split)]

    return build_graph(labels(train), labels(valid), labels(test))
