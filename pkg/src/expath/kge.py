"""Embedding models, deterministic training, filtered ranking and mimic post-training.

Three families are supported:

* ``transe``   -- translational, ``-||h + r - t||``, margin ranking loss
* ``complex``  -- complex bilinear, ``Re<h, r, conj(t)>``; vectors store the real
  half first and the imaginary half second
* ``distmult`` -- real bilinear, ``sum(h * r * t)``

Bilinear families train with a softplus logistic loss on +1/-1 labels. All
arithmetic in training is float32 so in-memory and checkpointed tables match.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .kg import Fact, KnowledgeGraph

FAMILIES = ("transe", "complex", "distmult")
OPTIMIZERS = ("sgd", "adagrad")
_DT = np.float32
_TINY = _DT(1e-12)


class DegenerateEntityError(ValueError):
    """Raised when mimic post-training is left with no facts to train on."""


@dataclass
class ModelConfig:
    family: str = "complex"
    dim: int = 32
    epochs: int = 200
    lr: float = 0.3
    negatives: int = 8
    batch_size: int = 512
    reg: float = 0.01
    margin: float = 1.0
    seed: int = 0
    optimizer: str = "adagrad"
    mimic_epochs: int = 200
    mimic_lr_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.family == "complex" and self.dim % 2:
            raise ValueError("complex models need an even dimension")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.negatives <= 0 or self.batch_size <= 0:
            raise ValueError("negatives and batch_size must be positive")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mimic_epochs <= 0 or self.mimic_lr_scale <= 0:
            raise ValueError("mimic settings must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# --- scoring families --------------------------------------------------------
#
# Each family works on row-aligned arrays H, R, T of shape (n, dim) and exposes
# the score, its partial derivatives, and one-vs-all scoring for ranking.


class _DistMult:
    @staticmethod
    def score(H, R, T):
        return np.sum(H * R * T, axis=-1)

    @staticmethod
    def grad(H, R, T):
        return R * T, H * T, H * R

    @staticmethod
    def tails(h, r, E):
        return E @ (h * r)

    @staticmethod
    def heads(r, t, E):
        return E @ (r * t)


class _ComplEx:
    @staticmethod
    def _split(X):
        k = X.shape[-1] // 2
        return X[..., :k], X[..., k:]

    @classmethod
    def score(cls, H, R, T):
        hr, hi = cls._split(H)
        rr, ri = cls._split(R)
        tr, ti = cls._split(T)
        return np.sum(hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr, axis=-1)

    @classmethod
    def grad(cls, H, R, T):
        hr, hi = cls._split(H)
        rr, ri = cls._split(R)
        tr, ti = cls._split(T)
        dH = np.concatenate([rr * tr + ri * ti, rr * ti - ri * tr], axis=-1)
        dR = np.concatenate([hr * tr + hi * ti, hr * ti - hi * tr], axis=-1)
        dT = np.concatenate([hr * rr - hi * ri, hi * rr + hr * ri], axis=-1)
        return dH, dR, dT

    @classmethod
    def tails(cls, h, r, E):
        hr, hi = cls._split(h)
        rr, ri = cls._split(r)
        return E @ np.concatenate([hr * rr - hi * ri, hr * ri + hi * rr])

    @classmethod
    def heads(cls, r, t, E):
        rr, ri = cls._split(r)
        tr, ti = cls._split(t)
        return E @ np.concatenate([rr * tr + ri * ti, rr * ti - ri * tr])


class _TransE:
    @staticmethod
    def score(H, R, T):
        return -np.linalg.norm(H + R - T, axis=-1)

    @staticmethod
    def grad(H, R, T):
        D = H + R - T
        n = np.linalg.norm(D, axis=-1, keepdims=True)
        # subgradient 0 at the exact translation point
        U = np.divide(D, n, out=np.zeros_like(D), where=n > 0)
        return -U, -U, U

    @staticmethod
    def tails(h, r, E):
        return -np.linalg.norm((h + r)[None, :] - E, axis=-1)

    @staticmethod
    def heads(r, t, E):
        return -np.linalg.norm(E + (r - t)[None, :], axis=-1)


_FAMILY_IMPL = {"distmult": _DistMult, "complex": _ComplEx, "transe": _TransE}


@dataclass
class EmbeddingModel:
    config: ModelConfig
    entities: np.ndarray
    relations: np.ndarray

    @property
    def impl(self):
        return _FAMILY_IMPL[self.config.family]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(ModelConfig.from_dict(self.config.to_dict()), self.entities.copy(), self.relations.copy())

    def check_finite(self) -> None:
        if not (np.isfinite(self.entities).all() and np.isfinite(self.relations).all()):
            raise FloatingPointError("non-finite values in embedding tables")

    # vectors are promoted to float64 for scoring so rankings are stable
    def entity_vec(self, e: int) -> np.ndarray:
        return self.entities[e].astype(np.float64)

    def relation_vec(self, r: int) -> np.ndarray:
        return self.relations[r].astype(np.float64)

    def score_vectors(self, h_vec, r: int, t_vec) -> float:
        return float(self.impl.score(np.asarray(h_vec, np.float64), self.relation_vec(r), np.asarray(t_vec, np.float64)))

    def tail_scores(self, h: int, r: int, h_vec=None) -> np.ndarray:
        h_vec = self.entity_vec(h) if h_vec is None else np.asarray(h_vec, np.float64)
        return self.impl.tails(h_vec, self.relation_vec(r), self.entities.astype(np.float64))

    def head_scores(self, r: int, t: int, t_vec=None) -> np.ndarray:
        t_vec = self.entity_vec(t) if t_vec is None else np.asarray(t_vec, np.float64)
        return self.impl.heads(self.relation_vec(r), t_vec, self.entities.astype(np.float64))


def score(model: EmbeddingModel, h: int, r: int, t: int) -> float:
    return model.score_vectors(model.entity_vec(h), r, model.entity_vec(t))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def plausibility(model: EmbeddingModel, h: int, r: int, t: int) -> float:
    """Logistic transform of the raw score; always in (0, 1)."""
    return sigmoid(score(model, h, r, t))


# --- training ----------------------------------------------------------------


def init_model(n_entities: int, n_relations: int, config: ModelConfig) -> EmbeddingModel:
    rng = np.random.default_rng(config.seed)
    ent = rng.uniform(-0.1, 0.1, size=(n_entities, config.dim)).astype(_DT)
    rel = rng.uniform(-0.1, 0.1, size=(n_relations, config.dim)).astype(_DT)
    return EmbeddingModel(config, ent, rel)


def _loss_slopes(family: str, s_pos, s_neg, margin: float):
    """dLoss/dscore for positives (B,) and negatives (B, k), averaged over the batch."""
    b, k = s_neg.shape
    if family == "transe":
        active = ((margin - s_pos[:, None] + s_neg) > 0).astype(_DT)
        g_neg = active / _DT(b * k)
        g_pos = -active.sum(axis=1) / _DT(b * k)
    else:
        # softplus(-s) for +1 labels, softplus(s) for -1 labels
        g_pos = -_sigmoid_arr(-s_pos) / _DT(b)
        g_neg = _sigmoid_arr(s_neg) / _DT(b * k)
    # flush negligible slopes: float32 denormals slow every later op by ~10x
    g_pos[np.abs(g_pos) < _TINY] = 0
    g_neg[np.abs(g_neg) < _TINY] = 0
    return g_pos, g_neg


def _sigmoid_arr(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(_DT)


class _Optimizer:
    def __init__(self, kind: str, lr: float, shapes):
        self.kind = kind
        self.lr = _DT(lr)
        self.acc = [np.zeros(s, dtype=_DT) for s in shapes] if kind == "adagrad" else None

    def step(self, which: int, table: np.ndarray, rows: np.ndarray, grad: np.ndarray) -> None:
        if self.kind == "adagrad":
            acc = self.acc[which]
            acc[rows] += grad * grad
            table[rows] -= self.lr * grad / (np.sqrt(acc[rows]) + _DT(1e-10))
        else:
            table[rows] -= self.lr * grad


def _scatter(idx: np.ndarray, grads: np.ndarray):
    """Sum gradient rows sharing an index; returns (unique rows, summed grads)."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    return sidx[starts], np.add.reduceat(grads[order], starts, axis=0)


def _renormalize(table: np.ndarray) -> None:
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    np.divide(table, np.maximum(norms, _DT(1.0)), out=table)


def train(kg: KnowledgeGraph, config: ModelConfig) -> EmbeddingModel:
    """Train from the seeded initialization; identical (kg, config) gives identical tables."""
    if not kg.train:
        raise ValueError("cannot train on an empty train split")
    model = init_model(kg.n_entities, kg.n_relations, config)
    if config.epochs == 0:
        return model
    impl = model.impl
    E, R = model.entities, model.relations
    positives = np.array(kg.train, dtype=np.int64)
    n, k, n_ent = len(positives), config.negatives, kg.n_entities
    rng = np.random.default_rng([config.seed, 1])
    opt = _Optimizer(config.optimizer, config.lr, [E.shape, R.shape])
    reg = _DT(config.reg)

    for _ in range(config.epochs):
        if config.family == "transe":
            _renormalize(E)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            pos = positives[order[start:start + config.batch_size]]
            b = len(pos)
            corrupt_head = rng.random((b, k)) < 0.5
            random_ent = rng.integers(0, n_ent, size=(b, k))
            neg_h = np.where(corrupt_head, random_ent, pos[:, 0:1])
            neg_t = np.where(corrupt_head, pos[:, 2:3], random_ent)
            neg_r = np.broadcast_to(pos[:, 1:2], (b, k))

            h_idx = np.concatenate([pos[:, 0], neg_h.ravel()])
            r_idx = np.concatenate([pos[:, 1], neg_r.ravel()])
            t_idx = np.concatenate([pos[:, 2], neg_t.ravel()])
            H, Rv, T = E[h_idx], R[r_idx], E[t_idx]
            s = impl.score(H, Rv, T)
            g_pos, g_neg = _loss_slopes(config.family, s[:b], s[b:].reshape(b, k), config.margin)
            g = np.concatenate([g_pos, g_neg.ravel()])[:, None]
            dH, dR, dT = impl.grad(H, Rv, T)
            dH, dR, dT = g * dH, g * dR, g * dT
            if reg:
                scale = _DT(2.0) * reg / _DT(b)
                dH[:b] += scale * H[:b]
                dR[:b] += scale * Rv[:b]
                dT[:b] += scale * T[:b]
            ent_rows, ent_grad = _scatter(np.concatenate([h_idx, t_idx]), np.concatenate([dH, dT]))
            rel_rows, rel_grad = _scatter(r_idx, dR)
            opt.step(0, E, ent_rows, ent_grad)
            opt.step(1, R, rel_rows, rel_grad)
    model.check_finite()
    return model


# --- ranking -----------------------------------------------------------------


@dataclass(frozen=True)
class RankResult:
    fact: Fact
    head_rank: int
    tail_rank: int

    @property
    def rr(self) -> float:
        return 0.5 * (1.0 / self.head_rank + 1.0 / self.tail_rank)

    @property
    def h1(self) -> float:
        return 0.5 * ((self.head_rank == 1) + (self.tail_rank == 1))


class _FilterIndex:
    def __init__(self, kg: KnowledgeGraph):
        self.tails: dict[tuple[int, int], list[int]] = {}
        self.heads: dict[tuple[int, int], list[int]] = {}
        for f in kg.all_true_facts():
            self.tails.setdefault((f.head, f.relation), []).append(f.tail)
            self.heads.setdefault((f.relation, f.tail), []).append(f.head)


def _filter_index(kg: KnowledgeGraph) -> _FilterIndex:
    idx = getattr(kg, "_filter_index", None)
    if idx is None:
        idx = _FilterIndex(kg)
        kg._filter_index = idx
    return idx


def _rank_from_scores(scores: np.ndarray, target: int, known) -> int:
    better = scores > scores[target]
    if known is not None:
        others = [e for e in known if e != target]
        if others:
            better[others] = False
    return int(better.sum()) + 1


def rank(model: EmbeddingModel, kg: KnowledgeGraph, f: Fact, side: str, filtered: bool = True) -> int:
    """Rank of the true entity among all candidates; ties never hurt the target."""
    if side == "tail":
        scores = model.tail_scores(f.head, f.relation)
        known = _filter_index(kg).tails.get((f.head, f.relation)) if filtered else None
        return _rank_from_scores(scores, f.tail, known)
    if side == "head":
        scores = model.head_scores(f.relation, f.tail)
        known = _filter_index(kg).heads.get((f.relation, f.tail)) if filtered else None
        return _rank_from_scores(scores, f.head, known)
    raise ValueError(f"side must be 'head' or 'tail', got {side!r}")


def rank_fact(model, kg, f: Fact, filtered: bool = True) -> RankResult:
    return RankResult(f, rank(model, kg, f, "head", filtered), rank(model, kg, f, "tail", filtered))


def mrr_h1(model, kg, facts, filtered: bool = True):
    facts = list(facts)
    if not facts:
        raise ValueError("need at least one fact")
    results = [rank_fact(model, kg, f, filtered) for f in facts]
    mrr = sum(r.rr for r in results) / len(results)
    h1 = sum(r.h1 for r in results) / len(results)
    return mrr, h1, results


# --- mimic post-training -----------------------------------------------------


def post_train_mimic(model: EmbeddingModel, kg: KnowledgeGraph, e: int, excluded=(), epochs: int | None = None) -> np.ndarray:
    """Re-fit a fresh copy of ``e``'s vector on its train facts minus ``excluded``.

    Every other embedding stays frozen. Starts from ``e``'s current vector and
    uses the family's loss with the other endpoint corrupted for negatives.
    """
    config = model.config
    excluded = set(excluded)
    local = sorted({f for _, f, _ in kg.incident(e)} - excluded)
    if not local:
        raise DegenerateEntityError(f"entity {e} has no train facts left after exclusion")
    epochs = config.mimic_epochs if epochs is None else epochs
    impl = model.impl
    E, R = model.entities, model.relations
    facts = np.array(local, dtype=np.int64)
    n, k, n_ent = len(facts), config.negatives, kg.n_entities
    as_head = facts[:, 0] == e
    as_tail = facts[:, 2] == e
    rng = np.random.default_rng([config.seed, 2, e])
    vec = E[e].copy()
    acc = np.zeros_like(vec)
    lr = _DT(config.lr * config.mimic_lr_scale)
    reg = _DT(config.reg)

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            pos = facts[sel]
            hmask, tmask = as_head[sel], as_tail[sel]
            b = len(pos)
            random_ent = rng.integers(0, n_ent, size=(b, k))
            # the mimic keeps its role; corrupt the opposite endpoint
            H_pos = np.where(hmask[:, None], vec[None, :], E[pos[:, 0]])
            T_pos = np.where(tmask[:, None], vec[None, :], E[pos[:, 2]])
            Rv = R[pos[:, 1]]
            H_neg = np.where(hmask[:, None, None], H_pos[:, None, :], E[random_ent])
            T_neg = np.where(hmask[:, None, None], E[random_ent], T_pos[:, None, :])
            R_neg = np.broadcast_to(Rv[:, None, :], H_neg.shape)

            s_pos = impl.score(H_pos, Rv, T_pos)
            s_neg = impl.score(H_neg, R_neg, T_neg)
            g_pos, g_neg = _loss_slopes(config.family, s_pos, s_neg, config.margin)
            dHp, _, dTp = impl.grad(H_pos, Rv, T_pos)
            dHn, _, dTn = impl.grad(H_neg, R_neg, T_neg)
            neg_is_head = hmask[:, None, None]
            grad = (
                (g_pos[:, None] * (dHp * hmask[:, None] + dTp * tmask[:, None])).sum(axis=0)
                + (g_neg[:, :, None] * np.where(neg_is_head, dHn, dTn)).sum(axis=(0, 1))
            )
            if reg:
                grad += _DT(2.0) * reg * vec * _DT((hmask.sum() + tmask.sum()) / b)
            grad = grad.astype(_DT)
            if config.optimizer == "adagrad":
                acc += grad * grad
                vec -= lr * grad / (np.sqrt(acc) + _DT(1e-10))
            else:
                vec -= lr * grad
        if config.family == "transe":
            norm = np.linalg.norm(vec)
            if norm > 1:
                vec /= norm
    if not np.isfinite(vec).all():
        raise FloatingPointError(f"mimic for entity {e} diverged")
    return vec


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(model: EmbeddingModel, prefix, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.meta.json`` and ``<prefix>.emb.bin`` (little-endian float32, row-major)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    bin_path = prefix.with_name(prefix.name + ".emb.bin")
    meta = {
        "family": model.config.family,
        "dimension": model.config.dim,
        "seed": model.config.seed,
        "n_entities": int(model.entities.shape[0]),
        "n_relations": int(model.relations.shape[0]),
        "config": model.config.to_dict(),
        "payload": bin_path.name,
        "dtype": "<f4",
    }
    if extra:
        meta.update(extra)
    payload = np.concatenate([model.entities.ravel(), model.relations.ravel()]).astype("<f4")
    bin_path.write_bytes(payload.tobytes(order="C"))
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta_path, bin_path


def load_checkpoint(prefix) -> EmbeddingModel:
    prefix = Path(prefix)
    if prefix.name.endswith(".meta.json"):
        prefix = prefix.with_name(prefix.name[: -len(".meta.json")])
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = ModelConfig.from_dict(meta["config"])
    raw = np.frombuffer((meta_path.parent / meta["payload"]).read_bytes(), dtype="<f4")
    n_e, n_r, d = meta["n_entities"], meta["n_relations"], meta["dimension"]
    if raw.size != (n_e + n_r) * d:
        raise ValueError(f"checkpoint payload has {raw.size} values, expected {(n_e + n_r) * d}")
    ent = raw[: n_e * d].reshape(n_e, d).astype(_DT)
    rel = raw[n_e * d:].reshape(n_r, d).astype(_DT)
    return EmbeddingModel(config, ent, rel)
