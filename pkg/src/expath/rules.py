"""Prediction-local mining of closed-path (CP) and property-transition (PT) rules.

CP rule ``r <- r1, ..., rn`` is evaluated on boolean adjacency matrices: the
body matrix is the left-to-right fold of binarized products, support is the
overlap with the head relation's matrix. PT rules ``r(X, c) <- r0(X, c')`` (and
the tail-side mirror ``r(c, Y) <- r0(c', Y)``) are counted with neighbor sets.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kge
from .kg import Fact, KnowledgeGraph, SignedRelation, invert
from .paths import DEFAULT_PATH_CAP, MAX_PATH_LENGTH, PathGroup, aggregate, find_grounded_paths

CP = "CP"
PT_HEAD = "PT-head"
PT_TAIL = "PT-tail"
RULE_KINDS = (CP, PT_HEAD, PT_TAIL)


class HeadRelationAbsentError(KeyError):
    pass


class RuleParseError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"at position {position}: {message}")
        self.position = position


@dataclass(frozen=True)
class Thresholds:
    min_sc: float = 0.01
    min_hc: float = 0.01
    min_supp: int = 10

    def __post_init__(self):
        if self.min_sc < 0 or self.min_hc < 0 or self.min_supp < 0:
            raise ValueError("thresholds must be non-negative")


@dataclass(frozen=True)
class Rule:
    kind: str
    head: int
    body: tuple = ()
    body_relation: SignedRelation | None = None
    body_constant: int | None = None
    head_constant: int | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == CP:
            if not 1 <= len(self.body) <= MAX_PATH_LENGTH:
                raise ValueError("CP body length must be 1..3")
        elif self.body_relation is None or self.body_constant is None or self.head_constant is None:
            raise ValueError("PT rules need a body relation and two constants")

    @property
    def is_cp(self) -> bool:
        return self.kind == CP

    def serialize(self, kg: KnowledgeGraph) -> str:
        head = kg.relations[self.head]
        if self.kind == CP:
            return f"{head} <- " + ", ".join(kg.signed_label(sr) for sr in self.body)
        body = kg.signed_label(self.body_relation)
        c, c2 = kg.entities[self.head_constant], kg.entities[self.body_constant]
        if self.kind == PT_HEAD:
            return f"{head}(X, {c}) <- {body}(X, {c2})"
        return f"{head}({c}, Y) <- {body}({c2}, Y)"


@dataclass(frozen=True)
class RuleMetrics:
    supp: int
    sc: float
    hc: float
    conf: float
    body_count: int = 0
    head_count: int = 0

    def as_dict(self) -> dict:
        return {"supp": self.supp, "sc": self.sc, "hc": self.hc, "conf": self.conf}


@dataclass(frozen=True)
class RelevancePair:
    rel_h: float
    rel_t: float
    degenerate_h: bool = False
    degenerate_t: bool = False


@dataclass
class MinedRule:
    rule: Rule
    metrics: RuleMetrics
    relevance: RelevancePair | None = None
    group: PathGroup | None = None
    body_fact: Fact | None = None


@dataclass
class MinedRuleSet:
    prediction: Fact
    rules: list = field(default_factory=list)
    n_paths: int = 0
    n_groups: int = 0
    truncated: bool = False

    def serialize(self, kg: KnowledgeGraph) -> list[dict]:
        return [{"rule": m.rule.serialize(kg), **m.metrics.as_dict()} for m in self.rules]


def conf(supp: int, sc: float, min_supp: int = 10) -> float:
    """Standard confidence damped for low support: SC * supp / (supp + minSupp)."""
    if supp <= 0:
        return 0.0
    # the damping ratio is <= 1, so conf never rounds above sc
    return sc * (supp / (supp + min_supp))


def _metrics(supp: int, body_count: int, head_count: int, min_supp: int) -> RuleMetrics:
    if body_count == 0:
        return RuleMetrics(0, 0.0, 0.0, 0.0, 0, head_count)
    sc = supp / body_count
    hc = supp / head_count if head_count else 0.0
    return RuleMetrics(supp, sc, hc, conf(supp, sc, min_supp), body_count, head_count)


def body_matrix(kg: KnowledgeGraph, body):
    """Binarized product of the body's signed adjacency matrices, folded left to right."""
    cache = kg.__dict__.setdefault("_body_cache", {})
    key = tuple(body)
    m = cache.get(key)
    if m is None:
        if len(key) == 1:
            m = kg.adjacency(key[0])
        else:
            m = body_matrix(kg, key[:-1]).matmul(kg.adjacency(key[-1]))
        if len(cache) > 4096:
            cache.clear()
        cache[key] = m
    return m


def eval_cp(kg: KnowledgeGraph, rule: Rule, min_supp: int = 10) -> RuleMetrics:
    if rule.kind != CP:
        raise ValueError("eval_cp needs a CP rule")
    head = kg.adjacency(SignedRelation(rule.head))
    if head.nnz == 0:
        raise HeadRelationAbsentError(f"relation {kg.relations[rule.head]!r} has no train facts")
    body = body_matrix(kg, rule.body)
    if body.nnz == 0:
        return RuleMetrics(0, 0.0, 0.0, 0.0, 0, head.nnz)
    return _metrics(body.and_count(head), body.nnz, head.nnz, min_supp)


def _endpoint_set(kg: KnowledgeGraph, e: int, sr: SignedRelation) -> set[int]:
    return {other for view, _, other in kg.incident(e) if view == sr}


def pt_sets(kg: KnowledgeGraph, rule: Rule) -> tuple[set[int], set[int]]:
    """(entities satisfying the head atom, entities satisfying the body atom)."""
    head_sr = SignedRelation(rule.head)
    if rule.kind == PT_HEAD:
        # r(X, c): X reached from c along r inverse; r0(X, c'): X reached from c' along inverse(r0)
        heads = _endpoint_set(kg, rule.head_constant, invert(head_sr))
        body = _endpoint_set(kg, rule.body_constant, invert(rule.body_relation))
    elif rule.kind == PT_TAIL:
        heads = _endpoint_set(kg, rule.head_constant, head_sr)
        body = _endpoint_set(kg, rule.body_constant, rule.body_relation)
    else:
        raise ValueError("pt_sets needs a PT rule")
    return heads, body


def eval_pt(kg: KnowledgeGraph, rule: Rule, min_supp: int = 10) -> RuleMetrics:
    heads, body = pt_sets(kg, rule)
    return _metrics(len(heads & body), len(body), len(heads), min_supp)


def eval_rule(kg: KnowledgeGraph, rule: Rule, min_supp: int = 10) -> RuleMetrics:
    return eval_cp(kg, rule, min_supp) if rule.kind == CP else eval_pt(kg, rule, min_supp)


# --- relevance ---------------------------------------------------------------


class RelevanceEstimator:
    """Mimic-based relation relevance with a per-(entity, excluded relation) cache.

    Both the baseline and the mimic are post-trained from the current
    embedding, so the ratio isolates the effect of the excluded facts.
    """

    def __init__(self, model: kge.EmbeddingModel, kg: KnowledgeGraph, exclude_both: bool = False):
        self.model = model
        self.kg = kg
        self.exclude_both = exclude_both
        self._cache: dict = {}
        self._lock = threading.Lock()

    def excluded_facts(self, e: int, sr: SignedRelation) -> set[Fact]:
        wanted = {sr, invert(sr)} if self.exclude_both else {sr}
        return {f for view, f, _ in self.kg.incident(e) if view in wanted}

    def mimic(self, e: int, sr: SignedRelation | None):
        """Post-trained vector of ``e`` without facts along ``sr`` (None: keep all); None if degenerate."""
        key = (e, sr)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        excluded = set() if sr is None else self.excluded_facts(e, sr)
        if self.kg.degree(e) == 0:
            vec = self.model.entities[e].copy()
        else:
            try:
                vec = kge.post_train_mimic(self.model, self.kg, e, excluded)
            except kge.DegenerateEntityError:
                vec = None
        with self._lock:
            self._cache[key] = vec
        return vec

    def relevance(self, prediction: Fact, rp) -> RelevancePair:
        h, r, t = prediction
        first, last = rp[0], rp[-1]
        base_h, base_t = self.mimic(h, None), self.mimic(t, None)
        base = kge.sigmoid(self.model.score_vectors(base_h, r, base_t))
        mimic_h = self.mimic(h, first)
        mimic_t = self.mimic(t, invert(last))
        if mimic_h is None:
            rel_h, deg_h = 1.0, True
        else:
            rel_h, deg_h = 1.0 - kge.sigmoid(self.model.score_vectors(mimic_h, r, base_t)) / base, False
        if mimic_t is None:
            rel_t, deg_t = 1.0, True
        else:
            rel_t, deg_t = 1.0 - kge.sigmoid(self.model.score_vectors(base_h, r, mimic_t)) / base, False
        return RelevancePair(rel_h, rel_t, deg_h, deg_t)


def relevance(model, kg, prediction: Fact, rp, estimator: RelevanceEstimator | None = None) -> RelevancePair:
    if not rp:
        raise ValueError("relation path must be non-empty")
    estimator = estimator or RelevanceEstimator(model, kg)
    return estimator.relevance(prediction, rp)


# --- mining ------------------------------------------------------------------


def _sort_key(kg):
    return lambda m: (-m.metrics.conf, m.rule.serialize(kg))


def mine(
    kg: KnowledgeGraph,
    model: kge.EmbeddingModel,
    prediction: Fact,
    thresholds: Thresholds = Thresholds(),
    max_len: int = MAX_PATH_LENGTH,
    cap: int = DEFAULT_PATH_CAP,
    rel_eps: float = 0.0,
    estimator: RelevanceEstimator | None = None,
) -> MinedRuleSet:
    """Candidate rule set for one prediction: CP rules from relevant relation paths plus PT rules."""
    if prediction not in kg.test_set:
        raise ValueError(f"prediction {kg.fact_key(prediction)!r} is not in the test split")
    h, r, t = prediction
    estimator = estimator or RelevanceEstimator(model, kg)
    out = MinedRuleSet(prediction)
    if not kg.facts_by_relation(r):
        return out

    def keep(metrics):
        return metrics.sc >= thresholds.min_sc and metrics.hc >= thresholds.min_hc and metrics.supp > 0

    paths = find_grounded_paths(kg, h, t, max_len=max_len, cap=cap, exclude=prediction)
    groups = aggregate(paths)
    out.n_paths, out.n_groups, out.truncated = len(paths), len(groups), paths.truncated
    for group in groups:
        rel = estimator.relevance(prediction, group.relation_path)
        if not (rel.rel_h > rel_eps and rel.rel_t > rel_eps):
            continue
        rule = Rule(CP, r, body=group.relation_path)
        metrics = eval_cp(kg, rule, thresholds.min_supp)
        if keep(metrics):
            out.rules.append(MinedRule(rule, metrics, rel, group))

    for view, f, other in kg.incident(h):
        if view == SignedRelation(r) and other == t:
            continue
        rule = Rule(PT_HEAD, r, body_relation=view, body_constant=other, head_constant=t)
        metrics = eval_pt(kg, rule, thresholds.min_supp)
        if keep(metrics):
            out.rules.append(MinedRule(rule, metrics, body_fact=f))
    for view, f, other in kg.incident(t):
        body_sr = invert(view)
        if body_sr == SignedRelation(r) and other == h:
            continue
        rule = Rule(PT_TAIL, r, body_relation=body_sr, body_constant=other, head_constant=h)
        metrics = eval_pt(kg, rule, thresholds.min_supp)
        if keep(metrics):
            out.rules.append(MinedRule(rule, metrics, body_fact=f))

    out.rules.sort(key=_sort_key(kg))
    return out


# --- parsing -----------------------------------------------------------------

_ATOM = re.compile(r"\s*(?P<rel>[^\s(),]+?)\s*\(\s*(?P<a>[^(),]+?)\s*,\s*(?P<b>[^(),]+?)\s*\)\s*$")
_VARIABLE = re.compile(r"^[A-Z]$")


def resolve_relation(kg: KnowledgeGraph, name: str) -> SignedRelation:
    """Relation label with optional trailing apostrophe; a unique path suffix also resolves."""
    inverse = name.endswith("'")
    base = name[:-1] if inverse else name
    if base in kg.relation_ids:
        return SignedRelation(kg.relation_ids[base], inverse)
    matches = [i for i, label in enumerate(kg.relations) if re.split(r"[/.]", label)[-1] == base]
    if len(matches) == 1:
        return SignedRelation(matches[0], inverse)
    if matches:
        options = ", ".join(kg.relations[i] for i in matches)
        raise KeyError(f"relation {base!r} is ambiguous: {options}")
    raise KeyError(f"unknown relation {base!r}")


def parse_rule(kg: KnowledgeGraph, text: str) -> Rule:
    """Parse ``head <- b1, b2'`` or ``head(X, c) <- body(X, c')`` / ``head(c, Y) <- body(c', Y)``."""
    arrow = text.find("<-")
    if arrow < 0:
        raise RuleParseError(len(text), "missing '<-'")
    head_txt, body_txt = text[:arrow], text[arrow + 2:]
    body_offset = arrow + 2
    if "(" not in head_txt:
        head_name = head_txt.strip()
        if not head_name:
            raise RuleParseError(0, "empty rule head")
        head = _resolve_head(kg, head_name)
        body, pos = [], body_offset
        for piece in body_txt.split(","):
            name = piece.strip()
            pos += len(piece) - len(piece.lstrip())
            if not name or "(" in name or ")" in name:
                raise RuleParseError(pos, f"bad body relation {piece!r}")
            try:
                body.append(resolve_relation(kg, name))
            except KeyError as exc:
                raise RuleParseError(pos, str(exc.args[0])) from None
            pos += len(piece.lstrip()) + 1
        if len(body) > MAX_PATH_LENGTH:
            raise RuleParseError(body_offset, "CP body longer than 3")
        return Rule(CP, head.relation, body=tuple(body))

    hm = _ATOM.match(head_txt)
    if not hm:
        raise RuleParseError(0, "malformed head atom")
    bm = _ATOM.match(body_txt)
    if not bm:
        raise RuleParseError(body_offset, "malformed body atom")
    head = _resolve_head(kg, hm["rel"])
    try:
        body_sr = resolve_relation(kg, bm["rel"])
    except KeyError as exc:
        raise RuleParseError(body_offset + bm.start("rel"), str(exc.args[0])) from None
    a, b, a2, b2 = hm["a"], hm["b"], bm["a"], bm["b"]
    if _VARIABLE.match(a) and _VARIABLE.match(a2) and not _VARIABLE.match(b) and not _VARIABLE.match(b2):
        kind, c, c2 = PT_HEAD, (b, hm.start("b")), (b2, body_offset + bm.start("b"))
    elif _VARIABLE.match(b) and _VARIABLE.match(b2) and not _VARIABLE.match(a) and not _VARIABLE.match(a2):
        kind, c, c2 = PT_TAIL, (a, hm.start("a")), (a2, body_offset + bm.start("a"))
    else:
        raise RuleParseError(0, "PT rule needs one shared variable and one constant per atom")
    consts = []
    for label, pos in (c, c2):
        if label not in kg.entity_ids:
            raise RuleParseError(pos, f"unknown entity {label!r}")
        consts.append(kg.entity_ids[label])
    return Rule(kind, head.relation, body_relation=body_sr, body_constant=consts[1], head_constant=consts[0])


def _resolve_head(kg: KnowledgeGraph, name: str) -> SignedRelation:
    try:
        sr = resolve_relation(kg, name)
    except KeyError as exc:
        raise HeadRelationAbsentError(str(exc.args[0])) from None
    if sr.inverse:
        raise RuleParseError(0, "rule head cannot be an inverse relation")
    return sr
