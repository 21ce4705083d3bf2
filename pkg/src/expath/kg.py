"""Dictionary-encoded triple store with inverse-aware traversal."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .sparse import SparseBoolMatrix

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, order=True)
class SignedRelation:
    """A relation index traversed forward (head -> tail) or inverse (tail -> head)."""

    relation: int
    inverse: bool = False

    def inverted(self) -> "SignedRelation":
        return SignedRelation(self.relation, not self.inverse)


def invert(sr: SignedRelation) -> SignedRelation:
    return sr.inverted()


class Fact(NamedTuple):
    head: int
    relation: int
    tail: int


def parse_triples(text: str) -> list[tuple[str, str, str]]:
    """Parse tab-separated ``head<TAB>relation<TAB>tail`` lines.

    Blank lines are skipped; both ``\\n`` and ``\\r\\n`` endings are accepted.
    """
    triples = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line.endswith("\r"):
            line = line[:-1]
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        if any(not f for f in fields):
            raise ParseError(lineno, "empty field")
        triples.append((fields[0], fields[1], fields[2]))
    return triples


class KnowledgeGraph:
    """Immutable knowledge graph with train/valid/test splits.

    Indices cover the train split only. Inverse relations are a traversal
    view; every fact is stored once in forward orientation.
    """

    def __init__(
        self,
        entities: list[str],
        relations: list[str],
        train: Iterable[Fact],
        valid: Iterable[Fact] = (),
        test: Iterable[Fact] = (),
        duplicates: dict[str, int] | None = None,
    ):
        self.entities = list(entities)
        self.relations = list(relations)
        self.entity_ids = {label: i for i, label in enumerate(self.entities)}
        self.relation_ids = {label: i for i, label in enumerate(self.relations)}
        self.train = tuple(train)
        self.valid = tuple(valid)
        self.test = tuple(test)
        self.duplicates = dict(duplicates or {s: 0 for s in SPLITS})
        self.train_set = frozenset(self.train)
        self.valid_set = frozenset(self.valid)
        self.test_set = frozenset(self.test)
        for split in (self.train, self.valid, self.test):
            for f in split:
                if not (0 <= f.head < self.n_entities and 0 <= f.tail < self.n_entities):
                    raise ValueError(f"fact {f} references an unknown entity")
                if not 0 <= f.relation < self.n_relations:
                    raise ValueError(f"fact {f} references an unknown relation")
        self._build_indices()
        self._adjacency_cache: dict[SignedRelation, SparseBoolMatrix] = {}

    def _build_indices(self) -> None:
        incident: dict[int, list[tuple[int, bool, int, Fact]]] = {}
        by_rel: dict[int, list[Fact]] = {}
        for f in self.train:
            incident.setdefault(f.head, []).append((f.relation, False, f.tail, f))
            incident.setdefault(f.tail, []).append((f.relation, True, f.head, f))
            by_rel.setdefault(f.relation, []).append(f)
        for entries in incident.values():
            entries.sort(key=lambda e: (e[0], e[1], e[2]))
        self._incident = incident
        self._by_relation = {r: sorted(fs) for r, fs in by_rel.items()}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> tuple[Fact, ...]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_true_facts(self) -> frozenset[Fact]:
        return self.train_set | self.valid_set | self.test_set

    def facts_by_relation(self, relation: int) -> list[Fact]:
        return list(self._by_relation.get(relation, ()))

    def incident(self, e: int) -> list[tuple[SignedRelation, Fact, int]]:
        """All train facts touching ``e`` as (signed relation seen from e, fact, other endpoint)."""
        self._check_entity(e)
        return [(SignedRelation(r, inv), f, other) for r, inv, other, f in self._incident.get(e, ())]

    def degree(self, e: int) -> int:
        return len(self._incident.get(e, ()))

    def _check_entity(self, e: int) -> None:
        if not 0 <= e < self.n_entities:
            raise KeyError(f"unknown entity id {e}")

    # -- labels -----------------------------------------------------------

    def entity_id(self, label: str) -> int:
        try:
            return self.entity_ids[label]
        except KeyError:
            raise KeyError(f"unknown entity label {label!r}") from None

    def relation_id(self, label: str) -> int:
        try:
            return self.relation_ids[label]
        except KeyError:
            raise KeyError(f"unknown relation label {label!r}") from None

    def fact_from_labels(self, h: str, r: str, t: str) -> Fact:
        return Fact(self.entity_id(h), self.relation_id(r), self.entity_id(t))

    def labels(self, f: Fact) -> tuple[str, str, str]:
        return (self.entities[f.head], self.relations[f.relation], self.entities[f.tail])

    def fact_key(self, f: Fact) -> str:
        return "\t".join(self.labels(f))

    def fact_json(self, f: Fact) -> dict:
        h, r, t = self.labels(f)
        return {"h": h, "r": r, "t": t}

    def signed_label(self, sr: SignedRelation) -> str:
        return self.relations[sr.relation] + ("'" if sr.inverse else "")

    # -- matrices ---------------------------------------------------------

    def adjacency(self, sr: SignedRelation) -> SparseBoolMatrix:
        cached = self._adjacency_cache.get(sr)
        if cached is not None:
            return cached
        facts = self._by_relation.get(sr.relation, ())
        heads = np.fromiter((f.head for f in facts), dtype=np.int64, count=len(facts))
        tails = np.fromiter((f.tail for f in facts), dtype=np.int64, count=len(facts))
        if sr.inverse:
            heads, tails = tails, heads
        m = SparseBoolMatrix.from_pairs(heads, tails, self.n_entities, self.n_entities)
        self._adjacency_cache[sr] = m
        return m

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and self.train_set == other.train_set
            and self.valid_set == other.valid_set
            and self.test_set == other.test_set
        )

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={self.n_entities}, relations={self.n_relations}, "
            f"train={len(self.train)}, valid={len(self.valid)}, test={len(self.test)})"
        )


def build_graph(train, valid=(), test=()) -> KnowledgeGraph:
    """Encode label triples; ids follow first appearance over train, valid, test."""
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    encoded = {}
    duplicates = {}
    for name, triples in zip(SPLITS, (train, valid, test)):
        seen: dict[Fact, None] = {}
        dup = 0
        for h, r, t in triples:
            hi = entity_ids.setdefault(h, len(entity_ids))
            ri = relation_ids.setdefault(r, len(relation_ids))
            ti = entity_ids.setdefault(t, len(entity_ids))
            f = Fact(hi, ri, ti)
            if f in seen:
                dup += 1
            else:
                seen[f] = None
        if dup:
            log.warning("%s split: dropped %d duplicate facts", name, dup)
        encoded[name] = list(seen)
        duplicates[name] = dup
    return KnowledgeGraph(
        entities=list(entity_ids),
        relations=list(relation_ids),
        train=encoded["train"],
        valid=encoded["valid"],
        test=encoded["test"],
        duplicates=duplicates,
    )


def load_dataset(directory) -> KnowledgeGraph:
    directory = Path(directory)
    splits = []
    for name in SPLITS:
        path = directory / f"{name}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"missing dataset file {path}")
        try:
            splits.append(parse_triples(path.read_text(encoding="utf-8")))
        except ParseError as exc:
            raise ParseError(exc.lineno, f"{path}: {exc}") from None
    return build_graph(*splits)


def write_dataset(kg: KnowledgeGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        lines = ["\t".join(kg.labels(f)) + "\n" for f in kg.split(name)]
        (directory / f"{name}.txt").write_text("".join(lines), encoding="utf-8")


def neighbors(kg: KnowledgeGraph, e: int, sr: SignedRelation | None = None) -> list[tuple[Fact, int]]:
    """Train facts reachable from ``e`` along ``sr`` (``None`` = any relation, both directions).

    Sorted by (relation, inverse flag, other endpoint).
    """
    out = []
    for view, f, other in kg.incident(e):
        if sr is None or view == sr:
            out.append((f, other))
    return out


def remove_facts(kg: KnowledgeGraph, victims) -> KnowledgeGraph:
    """New graph without ``victims`` in the train split; dictionaries and other splits unchanged."""
    victims = set(victims)
    missing = victims - kg.train_set
    if missing:
        listing = ", ".join(kg.fact_key(f).replace("\t", " ") for f in sorted(missing))
        raise KeyError(f"facts not in train split: {listing}")
    if not victims:
        return kg
    return KnowledgeGraph(
        entities=kg.entities,
        relations=kg.relations,
        train=[f for f in kg.train if f not in victims],
        valid=kg.valid,
        test=kg.test,
        duplicates=kg.duplicates,
    )


def adjacency(kg: KnowledgeGraph, sr: SignedRelation) -> SparseBoolMatrix:
    return kg.adjacency(sr)
