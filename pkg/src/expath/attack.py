"""Adversarial-deletion evaluation: remove explanation facts, retrain, measure rank degradation."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kge
from .kg import Fact, KnowledgeGraph, remove_facts

ELIGIBLE_RR = 0.5


class EmptyTargetPoolError(RuntimeError):
    pass


class ExplanationError(ValueError):
    pass


@dataclass
class Target:
    fact: Fact
    result: kge.RankResult

    @property
    def rr(self) -> float:
        return self.result.rr


@dataclass
class TargetSet:
    targets: list

    def __post_init__(self):
        for tgt in self.targets:
            if not tgt.rr > ELIGIBLE_RR:
                raise ValueError(f"target {tgt.fact} has RR {tgt.rr} <= {ELIGIBLE_RR}")

    @property
    def facts(self) -> list[Fact]:
        return [tgt.fact for tgt in self.targets]

    def __len__(self) -> int:
        return len(self.targets)

    def __iter__(self):
        return iter(self.targets)


@dataclass
class TargetRow:
    fact: Fact
    rr_before: float
    rr_after: float
    h1_before: float
    h1_after: float


@dataclass
class AttackReport:
    method: str
    rows: list
    delta_mrr: float
    delta_h1: float
    removed: list
    seeds: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, method, rows, removed, seeds=None, runtimes=None) -> "AttackReport":
        before = [r.rr_before for r in rows]
        after = [r.rr_after for r in rows]
        return cls(
            method,
            list(rows),
            delta_mrr(before, after),
            eligible_delta_h1(rows),
            sorted(removed),
            dict(seeds or {}),
            dict(runtimes or {}),
        )

    def to_json(self, kg: KnowledgeGraph) -> dict:
        """Serializable form; runtimes are left out so reports stay byte-identical."""
        return {
            "method": self.method,
            "n_targets": len(self.rows),
            "delta_mrr": self.delta_mrr,
            "delta_h1": self.delta_h1,
            "seeds": self.seeds,
            "targets": [
                {
                    "prediction": kg.fact_json(r.fact),
                    "rr_before": r.rr_before,
                    "rr_after": r.rr_after,
                    "h1_before": r.h1_before,
                    "h1_after": r.h1_after,
                }
                for r in self.rows
            ],
            "removed": [kg.fact_json(f) for f in self.removed],
        }


# --- aggregate metrics -------------------------------------------------------


def reciprocal_rank(head_rank: int, tail_rank: int) -> float:
    return 0.5 * (1.0 / head_rank + 1.0 / tail_rank)


def hits_at_1(head_rank: int, tail_rank: int) -> float:
    return 0.5 * ((head_rank == 1) + (tail_rank == 1))


def delta_mrr(rr_before, rr_after) -> float:
    """1 - sum(after) / sum(before)."""
    before = float(np.sum(rr_before, dtype=np.float64))
    if before == 0:
        raise ValueError("no reciprocal-rank mass before the attack")
    return 1.0 - float(np.sum(rr_after, dtype=np.float64)) / before


def delta_h1(h1_before, h1_after) -> float:
    """1 - sum(after) / sum(before) over H@1 indicators; 0 when nothing was at rank 1."""
    before = sum(h1_before)
    if before == 0:
        return 0.0
    return 1.0 - sum(h1_after) / before


def eligible_delta_h1(rows) -> float:
    """Targets with no rank-1 side before the attack stay out of the H@1 ratio."""
    kept = [r for r in rows if r.h1_before > 0]
    return delta_h1([r.h1_before for r in kept], [r.h1_after for r in kept])


# --- targets -----------------------------------------------------------------


def select_targets(
    model: kge.EmbeddingModel, kg: KnowledgeGraph, n: int, seed: int = 0, pool=None
) -> TargetSet:
    """Seeded uniform sample of test facts with filtered RR above 0.5.

    Facts are ranked lazily in a seeded shuffle order until ``n`` eligible
    ones are found or the pool runs out.
    """
    if n < 1:
        raise ValueError("n must be positive")
    pool = list(kg.test if pool is None else pool)
    order = np.random.default_rng([seed, 3]).permutation(len(pool))
    chosen = []
    for j in order.tolist():
        res = kge.rank_fact(model, kg, pool[j])
        if res.rr > ELIGIBLE_RR:
            chosen.append(Target(pool[j], res))
            if len(chosen) == n:
                break
    if not chosen:
        raise EmptyTargetPoolError(
            "no test fact has RR > 0.5; train longer or with a larger dimension"
        )
    return TargetSet(chosen)


# --- attack ------------------------------------------------------------------


def _check_explanations(kg: KnowledgeGraph, explanations) -> set[Fact]:
    union = set()
    for facts in explanations.values():
        for f in facts:
            if f not in kg.train_set:
                raise ExplanationError(f"explanation fact {kg.fact_key(f)!r} is not in the train split")
            union.add(f)
    return union


def _rows_for(model, kg, targets, facts=None):
    rows = []
    for tgt in targets:
        if facts is not None and tgt.fact not in facts:
            continue
        after = kge.rank_fact(model, kg, tgt.fact)
        rows.append(
            TargetRow(tgt.fact, tgt.result.rr, after.rr, tgt.result.h1, after.h1)
        )
    return rows


def run_attack(
    kg: KnowledgeGraph,
    config: kge.ModelConfig,
    targets: TargetSet,
    explanations: dict,
    method: str = "expath",
    per_target: bool = False,
) -> AttackReport:
    """Remove explanation facts, retrain with the same config and seed, re-rank the targets.

    Batch mode drops the union of all explanations and retrains once.
    ``per_target`` retrains once per target with only that target's facts
    removed. Ranks stay filtered against the original graph's true facts.
    """
    union = _check_explanations(kg, explanations)
    seeds = {"model": config.seed}
    runtimes = {}
    start = time.perf_counter()
    if not per_target:
        reduced = remove_facts(kg, union)
        model = kge.train(reduced, config)
        rows = _rows_for(model, kg, targets)
    else:
        rows = []
        for tgt in targets:
            reduced = remove_facts(kg, set(explanations.get(tgt.fact, ())))
            model = kge.train(reduced, config)
            rows.extend(_rows_for(model, kg, [tgt]))
    runtimes["retrain_s"] = time.perf_counter() - start
    return AttackReport.from_rows(method, rows, union, seeds, runtimes)


def fuse(x: AttackReport, y: AttackReport) -> AttackReport:
    """Per target keep whichever method hurt the rank more (smaller RR after)."""
    if [r.fact for r in x.rows] != [r.fact for r in y.rows]:
        raise ValueError("reports cover different targets")
    rows = []
    for a, b in zip(x.rows, y.rows):
        if a.rr_before != b.rr_before or a.h1_before != b.h1_before:
            raise ValueError(f"reports disagree on the original rank of {a.fact}")
        rows.append(a if a.rr_after <= b.rr_after else b)
    method = x.method if x.method == y.method else f"{x.method}+{y.method}"
    return AttackReport.from_rows(method, rows, set(x.removed) | set(y.removed), {**y.seeds, **x.seeds})


# --- baselines ---------------------------------------------------------------


def _incident_facts(kg: KnowledgeGraph, prediction: Fact) -> list[Fact]:
    h, _, t = prediction
    out = {f for e in (h, t) for _, f, _ in kg.incident(e)}
    out.discard(prediction)
    return sorted(out, key=kg.fact_key)


def baseline_sparse(kg: KnowledgeGraph, prediction: Fact, k: int, seed: int = 0) -> set[Fact]:
    """k facts at h or t whose relation has the fewest train facts."""
    facts = _incident_facts(kg, prediction)
    if k <= 0 or not facts:
        return set()
    jitter = np.random.default_rng([seed, 4, *prediction]).permutation(len(facts))
    ranked = sorted(
        zip(facts, jitter.tolist()),
        key=lambda fj: (len(kg.facts_by_relation(fj[0].relation)), kg.relations[fj[0].relation], fj[1]),
    )
    return {f for f, _ in ranked[:k]}


def baseline_random(kg: KnowledgeGraph, prediction: Fact, k: int, seed: int = 0) -> set[Fact]:
    facts = _incident_facts(kg, prediction)
    if k <= 0 or not facts:
        return set()
    rng = np.random.default_rng([seed, 5, *prediction])
    picks = rng.choice(len(facts), size=min(k, len(facts)), replace=False)
    return {facts[i] for i in picks.tolist()}


# --- explanation exchange ----------------------------------------------------


def explanations_json(kg: KnowledgeGraph, explanations: dict, method: str | None = None) -> dict:
    out = {
        "targets": [
            {"prediction": kg.fact_json(p), "facts": [kg.fact_json(f) for f in sorted(explanations[p], key=kg.fact_key)]}
            for p in sorted(explanations, key=kg.fact_key)
        ]
    }
    if method is not None:
        out["method"] = method
    return out


def export_explanations(kg: KnowledgeGraph, explanations: dict, path, method: str | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(explanations_json(kg, explanations, method), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(kg: KnowledgeGraph, record) -> Fact:
    try:
        return kg.fact_from_labels(record["h"], record["r"], record["t"])
    except (KeyError, TypeError) as exc:
        raise ExplanationError(f"cannot resolve record {record!r}: {exc}") from None


def import_external_explanations(kg: KnowledgeGraph, path) -> tuple[str | None, dict]:
    """(method name or None, {prediction: set of facts}) from an exchange file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or not isinstance(data.get("targets"), list):
        raise ExplanationError("exchange file needs a top-level 'targets' list")
    out: dict = {}
    for entry in data["targets"]:
        pred = _resolve(kg, entry.get("prediction"))
        out.setdefault(pred, set()).update(_resolve(kg, f) for f in entry.get("facts", []))
    return data.get("method"), out


# --- multi-run summary -------------------------------------------------------


def summarize_runs(reports) -> dict:
    """Mean and sample standard deviation of the aggregates across runs."""
    out = {}
    for name in ("delta_mrr", "delta_h1"):
        values = [getattr(r, name) for r in reports]
        out[name] = {
            "mean": statistics.fmean(values),
            "std": statistics.stdev(values) if len(values) > 1 else 0.0,
            "values": values,
        }
    return out
