"""Confidence-degree scoring of candidate facts and explanation assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .kg import Fact, KnowledgeGraph
from .paths import PathGroup, position_proportions
from .rules import CP, MinedRule, MinedRuleSet

POLICIES = ("all", "head", "tail")
DENSITY_THRESHOLD = 10.0
MAX_K = 8


class ConfigurationError(ValueError):
    pass


@dataclass
class ScoredFact:
    fact: Fact
    cd: float
    # (index into the rule set, conf, w) for every rule entering the product
    contributions: list = field(default_factory=list)

    @property
    def n_rules(self) -> int:
        return len(self.contributions)


@dataclass
class Explanation:
    prediction: Fact
    facts: list
    policy: str
    k: int
    ruleset: MinedRuleSet | None = None

    @property
    def fact_set(self) -> set[Fact]:
        return {sf.fact for sf in self.facts}

    def to_json(self, kg: KnowledgeGraph) -> dict:
        facts = []
        for sf in self.facts:
            rules = []
            for idx, c, w in sf.contributions:
                entry = self.ruleset.rules[idx]
                example = _example_path(entry, sf.fact)
                rules.append(
                    {
                        "rule": entry.rule.serialize(kg),
                        "kind": entry.rule.kind,
                        "conf": c,
                        "w": w,
                        "example_path": serialize_path(kg, example) if example else None,
                    }
                )
            facts.append({**kg.fact_json(sf.fact), "cd": sf.cd, "rules": rules})
        return {
            "prediction": kg.fact_json(self.prediction),
            "policy": self.policy,
            "k": self.k,
            "facts": facts,
        }


def serialize_path(kg: KnowledgeGraph, path) -> list[dict]:
    return [{**kg.fact_json(step.fact), "inverse": step.inverse} for step in path]


def _example_path(entry: MinedRule, f: Fact):
    if entry.group is None:
        return None
    for p in entry.group.grounded:
        if p[0].fact == f or p[-1].fact == f:
            return p
    return None


_BELOW_ONE = math.nextafter(1.0, 0.0)


def noisy_or(values) -> float:
    """1 - prod(1 - v), multiplied directly so equal inputs give bit-equal scores.

    Only a certain rule (v = 1) reaches 1; otherwise an underflowing product is
    held at the largest float below 1.
    """
    values = list(values)
    if any(v >= 1.0 for v in values):
        return 1.0
    return min(1.0 - math.prod(1.0 - v for v in values), _BELOW_ONE)


def head_share(entry: MinedRule) -> float:
    """r_h = Rel_h / (Rel_h + Rel_t), 0.5 when both relevances vanish."""
    rel = entry.relevance
    if rel is None:
        return 1.0
    denom = rel.rel_h + rel.rel_t
    if denom == 0:
        return 0.5
    return min(1.0, max(0.0, rel.rel_h / denom))


def weight(f: Fact, entry: MinedRule, group: PathGroup | None = None) -> float:
    """Importance of ``f`` within a rule: 1 for PT, position-weighted for CP."""
    if entry.rule.kind != CP:
        return 1.0
    group = group or entry.group
    if group is None or not group.grounded:
        return 0.0
    r_h = head_share(entry)
    p_h, p_t = position_proportions(f, group)
    return r_h * p_h + (1.0 - r_h) * p_t


def _enabled(entry: MinedRule, use_cp: bool, use_pt: bool) -> bool:
    return use_cp if entry.rule.kind == CP else use_pt


def _check_flags(use_cp: bool, use_pt: bool) -> None:
    if not (use_cp or use_pt):
        raise ConfigurationError("at least one of CP or PT rules must be enabled")


def cd(f: Fact, ruleset: MinedRuleSet, use_cp: bool = True, use_pt: bool = True, groups=None) -> ScoredFact:
    """Noisy-OR of conf * w over every enabled rule that ``f`` supports."""
    _check_flags(use_cp, use_pt)
    contributions = []
    for idx, entry in enumerate(ruleset.rules):
        if not _enabled(entry, use_cp, use_pt):
            continue
        if entry.rule.kind == CP:
            group = groups[idx] if groups is not None else entry.group
            if group is None or not group.grounded:
                continue
            if f not in group.first_facts and f not in group.last_facts:
                continue
            w = weight(f, entry, group)
        else:
            if entry.body_fact != f:
                continue
            w = 1.0
        contributions.append((idx, entry.metrics.conf, w))
    return ScoredFact(f, noisy_or(c * w for _, c, w in contributions), contributions)


def candidate_facts(ruleset: MinedRuleSet, use_cp: bool = True, use_pt: bool = True, groups=None) -> set[Fact]:
    out = set()
    for idx, entry in enumerate(ruleset.rules):
        if not _enabled(entry, use_cp, use_pt):
            continue
        if entry.rule.kind == CP:
            group = groups[idx] if groups is not None else entry.group
            if group is not None:
                out.update(group.first_facts)
                out.update(group.last_facts)
        elif entry.body_fact is not None:
            out.add(entry.body_fact)
    return out


def _policy_filter(facts, prediction: Fact, policy: str):
    h, _, t = prediction
    if policy == "head":
        return [f for f in facts if h in (f.head, f.tail)]
    if policy == "tail":
        return [f for f in facts if t in (f.head, f.tail)]
    if policy == "all":
        return [f for f in facts if {h, t} & {f.head, f.tail}]
    raise ValueError(f"unknown policy {policy!r}")


def _rank_key(kg: KnowledgeGraph | None):
    def key(sf: ScoredFact):
        tie = kg.fact_key(sf.fact) if kg is not None else tuple(sf.fact)
        return (-sf.cd, -sf.n_rules, tie)

    return key


def select_explanation(
    prediction: Fact,
    ruleset: MinedRuleSet,
    k: int,
    policy: str = "all",
    kg: KnowledgeGraph | None = None,
    use_cp: bool = True,
    use_pt: bool = True,
    greedy: bool = False,
) -> Explanation:
    """Top-k facts by confidence degree among rule-supported facts allowed by the policy.

    With ``greedy`` the scores are recomputed after each pick: grounded paths
    through the picked fact and PT rules resting on it stop counting.
    """
    if not 1 <= k <= MAX_K:
        raise ValueError(f"k must be in 1..{MAX_K}")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    _check_flags(use_cp, use_pt)
    key = _rank_key(kg)
    if not greedy:
        candidates = _policy_filter(candidate_facts(ruleset, use_cp, use_pt), prediction, policy)
        scored = sorted((cd(f, ruleset, use_cp, use_pt) for f in candidates), key=key)
        return Explanation(prediction, scored[:k], policy, k, ruleset)

    groups = [e.group for e in ruleset.rules]
    picked: list[ScoredFact] = []
    removed: set[Fact] = set()
    while len(picked) < k:
        candidates = [
            f for f in _policy_filter(candidate_facts(ruleset, use_cp, use_pt, groups), prediction, policy)
            if f not in removed
        ]
        if not candidates:
            break
        best = min((cd(f, ruleset, use_cp, use_pt, groups) for f in candidates), key=key)
        picked.append(best)
        removed.add(best.fact)
        groups = [
            PathGroup(g.relation_path, [p for p in g.grounded if all(s.fact != best.fact for s in p)])
            if g is not None else None
            for g in groups
        ]
    return Explanation(prediction, picked, policy, k, ruleset)


def choose_policy(kg: KnowledgeGraph) -> str:
    """Head-only selection on sparse graphs (train facts per entity below 10), otherwise all."""
    ratio = len(kg.train) / max(1, kg.n_entities)
    return "head" if ratio < DENSITY_THRESHOLD else "all"


def resolve_policy(kg: KnowledgeGraph, policy: str) -> str:
    return choose_policy(kg) if policy == "auto" else policy


# --- DOT export ----------------------------------------------------------------

DOT_NODE_CAP = 60


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def explanation_dot(kg: KnowledgeGraph, explanation: Explanation, max_nodes: int = DOT_NODE_CAP) -> str:
    """Graphviz rendering of the head/tail neighborhoods with explanation facts highlighted."""
    h, r, t = explanation.prediction
    chosen = explanation.fact_set
    path_facts: set[Fact] = set()
    if explanation.ruleset is not None:
        for sf in explanation.facts:
            for idx, _, _ in sf.contributions:
                example = _example_path(explanation.ruleset.rules[idx], sf.fact)
                if example:
                    path_facts.update(step.fact for step in example)

    edges = list(dict.fromkeys(sorted(chosen) + sorted(path_facts)))
    for e in (h, t):
        edges.extend(f for _, f, _ in kg.incident(e) if f not in edges)
    nodes: list[int] = [h, t]
    kept = []
    truncated = False
    for f in edges:
        new = [x for x in (f.head, f.tail) if x not in nodes]
        if len(nodes) + len(set(new)) > max_nodes:
            truncated = True
            continue
        nodes.extend(dict.fromkeys(new))
        kept.append(f)

    lines = ["digraph explanation {", "  rankdir=LR;", "  node [shape=ellipse, fontsize=10];"]
    for n in nodes:
        style = ", style=filled, fillcolor=lightblue" if n in (h, t) else ""
        lines.append(f"  n{n} [label={_dot_quote(kg.entities[n])}{style}];")
    for f in kept:
        if f in chosen:
            attrs = "color=red, penwidth=2.5"
        elif f in path_facts:
            attrs = "color=darkgreen, penwidth=1.5"
        else:
            attrs = "color=gray"
        lines.append(f"  n{f.head} -> n{f.tail} [label={_dot_quote(kg.relations[f.relation])}, {attrs}];")
    lines.append(f"  n{h} -> n{t} [label={_dot_quote(kg.relations[r] + ' (predicted)')}, style=dashed, color=blue];")
    if truncated:
        lines.append(f'  truncated [shape=box, label="truncated at {max_nodes} nodes", color=orange];')
    lines.append("}")
    return "\n".join(lines) + "\n"
