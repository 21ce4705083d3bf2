import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from expath.kg import SignedRelation, build_graph
from expath.paths import (
    PathGroup,
    Step,
    aggregate,
    find_grounded_paths,
    is_valid_path,
    position_proportions,
    relation_path,
)


def oracle_paths(kg, h, t, max_len=3):
    """Exhaustive DFS scanning the whole fact list at every hop (no index)."""
    out = set()

    def walk(prefix, current, visited):
        if len(prefix) == max_len:
            return
        for f in kg.train:
            for inverse in (False, True):
                src, dst = (f.tail, f.head) if inverse else (f.head, f.tail)
                if src != current:
                    continue
                step = Step(f, inverse)
                if dst == t:
                    out.add(tuple(prefix) + (step,))
                elif dst not in visited:
                    walk(prefix + [step], dst, visited | {dst})

    walk([], h, {h})
    return out


def small_graph(seed):
    return random_graph(seed, max_entities=50, max_relations=4, max_facts=160)


class TestFixtures:
    def test_single_edge(self):
        kg = build_graph([("h", "r1", "t")])
        paths = find_grounded_paths(kg, 0, 1)
        assert len(paths) == 1 and len(paths[0]) == 1

    def test_two_hops_forward(self):
        kg = build_graph([("h", "r1", "a"), ("a", "r2", "t")])
        h, t = kg.entity_id("h"), kg.entity_id("t")
        paths = find_grounded_paths(kg, h, t)
        assert len(paths) == 1
        assert [s.inverse for s in paths[0]] == [False, False]

    def test_inverse_hop(self):
        kg = build_graph([("h", "r1", "a"), ("t", "r2", "a")])
        h, t = kg.entity_id("h"), kg.entity_id("t")
        (path,) = find_grounded_paths(kg, h, t)
        assert relation_path(path) == (SignedRelation(0), SignedRelation(1, True))

    def test_same_endpoints_rejected(self):
        kg = build_graph([("h", "r", "t")])
        with pytest.raises(ValueError):
            find_grounded_paths(kg, 0, 0)

    def test_cycles_excluded(self):
        kg = build_graph([("h", "r", "a"), ("a", "r", "h"), ("a", "r", "t")])
        for p in find_grounded_paths(kg, 0, kg.entity_id("t")):
            assert is_valid_path(p, 0, kg.entity_id("t"))

    def test_cap_truncates(self):
        train = [("h", "r", f"m{i}") for i in range(10)] + [(f"m{i}", "s", "t") for i in range(10)]
        kg = build_graph(train)
        h, t = kg.entity_id("h"), kg.entity_id("t")
        full = find_grounded_paths(kg, h, t)
        capped = find_grounded_paths(kg, h, t, cap=4)
        assert len(full) == 10 and not full.truncated
        assert len(capped) == 4 and capped.truncated
        assert list(capped) == list(full[:4])


class TestOracle:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_dfs(self, seed):
        kg = small_graph(seed)
        for h, t in [(0, 1), (2, 3), (1, kg.n_entities - 1)]:
            if h == t:
                continue
            paths = find_grounded_paths(kg, h, t)
            assert len(paths) == len(set(paths))
            assert set(paths) == oracle_paths(kg, h, t)

    @pytest.mark.parametrize("seed", range(5))
    def test_ordered_by_length(self, seed):
        kg = small_graph(seed)
        lengths = [len(p) for p in find_grounded_paths(kg, 0, 1)]
        assert lengths == sorted(lengths)


class TestAggregate:
    def test_same_sequence_one_group(self):
        kg = build_graph([("h", "r1", "a"), ("a", "r2", "t"), ("h", "r1", "b"), ("b", "r2", "t")])
        groups = aggregate(find_grounded_paths(kg, 0, kg.entity_id("t")))
        assert len(groups) == 1 and len(groups[0].grounded) == 2

    def test_inverse_flag_splits_groups(self):
        kg = build_graph([("h", "r1", "a"), ("a", "r2", "t"), ("h", "r1", "b"), ("t", "r2", "b")])
        groups = aggregate(find_grounded_paths(kg, 0, kg.entity_id("t")))
        assert len(groups) == 2

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_partition(self, seed):
        kg = small_graph(seed)
        paths = find_grounded_paths(kg, 0, 1)
        groups = aggregate(paths)
        assert len(groups) <= len(paths)
        assert sum(len(g.grounded) for g in groups) == len(paths)
        for g in groups:
            assert all(relation_path(p) == g.relation_path for p in g.grounded)


class TestPositionProportions:
    def _group(self):
        kg = build_graph([("h", "r1", "a"), ("a", "r2", "t"), ("h", "r1", "b"), ("b", "r2", "t")])
        return kg, aggregate(find_grounded_paths(kg, 0, kg.entity_id("t")))[0]

    def test_first_edge(self):
        kg, group = self._group()
        p = group.grounded[0]
        assert position_proportions(p[0].fact, PathGroup(group.relation_path, [p])) == (1.0, 0.0)
        assert position_proportions(p[0].fact, group) == (0.5, 0.0)

    def test_absent_fact(self):
        kg, group = self._group()
        other = build_graph([("x", "r1", "y")]).train[0]
        assert position_proportions(other._replace(head=99), group) == (0.0, 0.0)

    def test_single_edge_path(self):
        kg = build_graph([("h", "r", "t")])
        (group,) = aggregate(find_grounded_paths(kg, 0, 1))
        assert position_proportions(kg.train[0], group) == (1.0, 1.0)

    def test_empty_group(self):
        with pytest.raises(ValueError):
            position_proportions(build_graph([("h", "r", "t")]).train[0], PathGroup(()))
