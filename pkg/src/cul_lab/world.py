"""Synthetic concept universe: Gaussian-mixture concepts, context offsets,
related-concept graph, mapping strategies and the exact Bayes oracle."""

from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.special import logsumexp

from .errors import ConfigError, UnknownIdError, UsageError
from .seeding import rng_for

NULL_CONCEPT = "null"
MAPPING_KINDS = ("fixed", "adaptive", "null")


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple
    cov: tuple  # row-major D x D


@dataclass(frozen=True)
class Concept:
    id: str
    components: tuple
    related: tuple = ()

    def __post_init__(self):
        w = np.array([c.weight for c in self.components])
        if len(w) == 0 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"concept {self.id}: mixture weights must be positive and sum to 1")
        for c in self.components:
            cov = np.asarray(c.cov)
            if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ConfigError(f"concept {self.id}: covariance is not SPD")
        if self.id in self.related:
            raise ConfigError(f"concept {self.id} lists itself as related")

    @property
    def mean(self):
        return sum(c.weight * np.asarray(c.mean) for c in self.components)


@dataclass(frozen=True)
class Condition:
    concept_id: str
    context_id: str

    @property
    def is_null(self):
        return self.concept_id == NULL_CONCEPT


@dataclass(frozen=True)
class MappingStrategy:
    kind: str = "fixed"

    def __post_init__(self):
        if self.kind not in MAPPING_KINDS:
            raise ConfigError(f"unknown mapping kind {self.kind!r}; expected one of {MAPPING_KINDS}")


@dataclass(frozen=True)
class ConceptUniverse:
    concepts: tuple
    contexts: tuple  # ((id, offset), ...)
    forget_schedule: tuple
    fixed_map: dict = field(hash=False)
    seed: int = 0

    def __post_init__(self):
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids) or NULL_CONCEPT in ids:
            raise ConfigError("concept ids must be unique and not 'null'")
        ctx_ids = [k for k, _ in self.contexts]
        if len(set(ctx_ids)) != len(ctx_ids):
            raise ConfigError("context ids must be unique")
        for c in self.concepts:
            for r in c.related:
                if r not in ids:
                    raise ConfigError(f"concept {c.id} related to unknown {r}")
        if len(set(self.forget_schedule)) != len(self.forget_schedule):
            raise ConfigError("forget schedule repeats a concept")
        for f in self.forget_schedule:
            if f not in ids:
                raise ConfigError(f"forget schedule names unknown concept {f}")
        for src, dst in self.fixed_map.items():
            if dst == src or dst in self.forget_schedule or dst not in ids:
                raise ConfigError(f"fixed_map {src}->{dst} must target a retained concept")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(ids)})
        object.__setattr__(self, "_ctx_index", {k: i for i, k in enumerate(ctx_ids)})
        self._build_oracle_tables()

    # -- lookup -----------------------------------------------------------
    @property
    def concept_ids(self):
        return [c.id for c in self.concepts]

    @property
    def context_ids(self):
        return [k for k, _ in self.contexts]

    @property
    def K(self):
        return len(self.forget_schedule)

    @property
    def cond_dim(self):
        return len(self.concepts) + 1 + len(self.contexts)

    def concept(self, cid):
        try:
            return self.concepts[self._index[cid]]
        except KeyError:
            raise UnknownIdError(f"unknown concept {cid!r}") from None

    def offset(self, kid):
        try:
            return np.asarray(self.contexts[self._ctx_index[kid]][1], dtype=np.float64)
        except KeyError:
            raise UnknownIdError(f"unknown context {kid!r}") from None

    def forgotten_through(self, i):
        """Cumulative forget set after step ``i`` (0 = nothing forgotten)."""
        return tuple(self.forget_schedule[:i])

    def related_set(self, i):
        """Cumulative related set after step ``i``, minus anything forgotten."""
        gone = set(self.forgotten_through(i))
        out = []
        for f in self.forgotten_through(i):
            for r in self.concept(f).related:
                if r not in gone and r not in out:
                    out.append(r)
        return out

    def general_set(self):
        """Concepts neither scheduled for forgetting nor related to any target."""
        excluded = set(self.forget_schedule)
        for f in self.forget_schedule:
            excluded.update(self.concept(f).related)
        return [c for c in self.concept_ids if c not in excluded]

    def all_conditions(self):
        return [Condition(c, k) for c in self.concept_ids for k in self.context_ids]

    # -- conditioning -----------------------------------------------------
    def embed(self, cond):
        """one-hot(concept or null slot) ++ one-hot(context); the null
        concept carries no context, like an empty prompt."""
        e = np.zeros(self.cond_dim)
        if cond.is_null:
            self.offset(cond.context_id)
            e[len(self.concepts)] = 1.0
            return e
        e[self._index_of(cond.concept_id)] = 1.0
        e[len(self.concepts) + 1 + self._ctx_index_of(cond.context_id)] = 1.0
        return e

    def embed_many(self, conds):
        return np.stack([self.embed(c) for c in conds]) if conds else np.zeros((0, self.cond_dim))

    def _index_of(self, cid):
        if cid not in self._index:
            raise UnknownIdError(f"unknown concept {cid!r}")
        return self._index[cid]

    def _ctx_index_of(self, kid):
        if kid not in self._ctx_index:
            raise UnknownIdError(f"unknown context {kid!r}")
        return self._ctx_index[kid]

    # -- ground truth -----------------------------------------------------
    def _cell_components(self, cond):
        """(weights, means, covs) of the ground-truth mixture for a condition."""
        if cond.is_null:
            self.offset(cond.context_id)
            w, m, c = [], [], []
            n_cells = len(self.concepts) * len(self.contexts)
            for con in self.concepts:
                for _, off in self.contexts:
                    for comp in con.components:
                        w.append(comp.weight / n_cells)
                        m.append(np.asarray(comp.mean) + off)
                        c.append(np.asarray(comp.cov))
            return np.array(w), np.array(m), np.array(c)
        con = self.concept(cond.concept_id)
        off = self.offset(cond.context_id)
        w = np.array([comp.weight for comp in con.components])
        m = np.array([np.asarray(comp.mean) + off for comp in con.components])
        c = np.array([np.asarray(comp.cov) for comp in con.components])
        return w, m, c

    def sample_ground_truth(self, cond, n, seed):
        return self.sample_with_rng(cond, n, rng_for(seed))

    def sample_with_rng(self, cond, n, rng):
        w, m, c = self._cell_components(cond)
        idx = rng.choice(len(w), size=n, p=w)
        L = np.linalg.cholesky(c)
        z = rng.standard_normal((n, m.shape[1]))
        return m[idx] + np.einsum("nij,nj->ni", L[idx], z)

    # -- oracle -----------------------------------------------------------
    def _build_oracle_tables(self):
        rows = []  # (concept idx, context idx, log weight, mean, chol-inv, logdet)
        for ci, con in enumerate(self.concepts):
            for ki, (_, off) in enumerate(self.contexts):
                for comp in con.components:
                    cov = np.asarray(comp.cov, dtype=np.float64)
                    L = np.linalg.cholesky(cov)
                    rows.append((ci, ki, np.log(comp.weight), np.asarray(comp.mean) + np.asarray(off),
                                 np.linalg.inv(L), 2.0 * np.log(np.diag(L)).sum()))
        object.__setattr__(self, "_oracle", {
            "concept": np.array([r[0] for r in rows]),
            "context": np.array([r[1] for r in rows]),
            "logw": np.array([r[2] for r in rows]),
            "mean": np.array([r[3] for r in rows]),
            "Linv": np.array([r[4] for r in rows]),
            "logdet": np.array([r[5] for r in rows]),
        })

    def cell_log_likelihood(self, points):
        """log p(x | concept, context) for every row: array (n, concepts, contexts)."""
        o = self._oracle
        x = np.atleast_2d(np.asarray(points, dtype=np.float64))
        D = x.shape[1]
        diff = x[:, None, :] - o["mean"][None]
        y = np.einsum("kij,nkj->nki", o["Linv"], diff)
        comp_ll = o["logw"] - 0.5 * (np.sum(y * y, axis=-1) + o["logdet"] + D * np.log(2 * np.pi))
        nc, nk = len(self.concepts), len(self.contexts)
        cell = np.full((x.shape[0], nc * nk), -np.inf)
        flat = o["concept"] * nk + o["context"]
        for cell_idx in np.unique(flat):
            cell[:, cell_idx] = logsumexp(comp_ll[:, flat == cell_idx], axis=1)
        return cell.reshape(x.shape[0], nc, nk)

    def classify_batch(self, points):
        """Bayes posterior under a uniform prior over (concept, context).

        Returns ``(concept_idx, concept_posterior, context_idx)`` arrays.
        """
        ll = self.cell_log_likelihood(points)
        joint = ll - logsumexp(ll, axis=(1, 2), keepdims=True)
        post = np.exp(joint)
        concept_post = post.sum(axis=2)
        context_post = post.sum(axis=1)
        return concept_post.argmax(axis=1), concept_post, context_post.argmax(axis=1)

    def oracle_classify(self, point):
        ci, post, ki = self.classify_batch(np.asarray(point)[None])
        return self.concept_ids[int(ci[0])], post[0], self.context_ids[int(ki[0])]

    # -- mapping ----------------------------------------------------------
    def mixture_distance(self, a, b):
        """Symmetrized weighted nearest-component mean distance between concepts."""
        ca, cb = self.concept(a), self.concept(b)
        ma = np.array([c.mean for c in ca.components])
        mb = np.array([c.mean for c in cb.components])
        wa = np.array([c.weight for c in ca.components])
        wb = np.array([c.weight for c in cb.components])
        d = np.linalg.norm(ma[:, None] - mb[None], axis=-1)
        return 0.5 * (wa @ d.min(axis=1) + wb @ d.min(axis=0))

    def map_condition(self, strategy, cond, step=None):
        """Surrogate condition for a forget condition. ``step`` (1-based)
        bounds the set of concepts considered forgotten; default: all."""
        if isinstance(strategy, str):
            strategy = MappingStrategy(strategy)
        step = self.K if step is None else step
        if cond.concept_id not in self.forgotten_through(step):
            raise UsageError(f"{cond.concept_id} is not in the forget set at step {step}")
        if strategy.kind == "fixed":
            if cond.concept_id not in self.fixed_map:
                raise ConfigError(f"fixed_map has no entry for {cond.concept_id}")
            return Condition(self.fixed_map[cond.concept_id], cond.context_id)
        if strategy.kind == "null":
            return Condition(NULL_CONCEPT, cond.context_id)
        # never map onto anything scheduled for forgetting, past or future
        candidates = [c for c in self.concept_ids if c not in self.forget_schedule]
        if not candidates:
            raise ConfigError("no retained concept available for adaptive mapping")
        dists = [self.mixture_distance(cond.concept_id, c) for c in candidates]
        return Condition(candidates[int(np.argmin(dists))], cond.context_id)

    def build_prompt_sets(self, i, strategy="fixed", per_context=10, retain_count=96):
        """(D_forget, D_map, D_retain) for step ``i`` (1-based)."""
        if not 1 <= i <= self.K:
            raise UsageError(f"step {i} outside 1..{self.K}")
        target = self.forget_schedule[i - 1]
        forget = [Condition(target, k) for k in self.context_ids for _ in range(per_context)]
        mapped = [self.map_condition(strategy, c, step=i) for c in forget]
        gone = set(self.forgotten_through(i))
        related = [r for r in self.concept(target).related if r not in gone]
        base = []
        for cid in self.concept_ids:
            if cid in gone:
                continue
            reps = 2 if cid in related else 1
            base.extend(Condition(cid, k) for k in self.context_ids for _ in range(reps))
        reps = max(1, int(round(retain_count / len(base)))) if base else 0
        retain = base * reps
        return forget, mapped, retain

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        return {
            "seed": int(self.seed),
            "concepts": [
                {"id": c.id, "related": list(c.related),
                 "components": [{"weight": float(p.weight), "mean": [float(v) for v in p.mean],
                                 "cov": [[float(v) for v in row] for row in np.asarray(p.cov)]}
                                for p in c.components]}
                for c in self.concepts],
            "contexts": [{"id": k, "offset": [float(v) for v in off]} for k, off in self.contexts],
            "forget_schedule": list(self.forget_schedule),
            "fixed_map": dict(self.fixed_map),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            concepts = tuple(
                Concept(c["id"],
                        tuple(Component(float(p["weight"]), tuple(p["mean"]),
                                        tuple(tuple(r) for r in p["cov"])) for p in c["components"]),
                        tuple(c.get("related", ())))
                for c in d["concepts"])
            contexts = tuple((k["id"], tuple(float(v) for v in k["offset"])) for k in d["contexts"])
            return cls(concepts, contexts, tuple(d["forget_schedule"]), dict(d.get("fixed_map", {})),
                       int(d.get("seed", 0)))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed universe description: {e}") from None

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def with_schedule(self, k):
        """Copy with the forget schedule truncated/extended to length ``k``."""
        order = list(self.forget_schedule)
        if k <= len(order):
            return ConceptUniverse(self.concepts, self.contexts, tuple(order[:k]),
                                   {s: t for s, t in self.fixed_map.items() if s in order[:k]},
                                   self.seed)
        raise ConfigError(f"universe only schedules {len(order)} concepts, asked for {k}")


# Ring angles and interior points were chosen by maximizing the minimum
# distance between all (concept, context) cells; min separation ~1.8.
_RING_DEG = (0.0, 40.0, 92.0, 128.0, 143.5, 180.0, 216.5, 232.0, 268.0, 320.0)
_INTERIOR = ((0.8, -2.7), (0.8, 2.7))
_SPLIT_DEG = {0: 0.0, 1: 15.0, 5: 0.0, 9: 40.0, 10: 115.0, 11: 15.0}
_OFFSETS = ((0.0, 0.0), (3.0, 0.0), (0.0, 3.0), (-3.0, 0.0))


def default_universe(seed=0, scale=0.3, radius=8.0, split=0.35, n_related=2,
                     forget_schedule=("c04", "c07", "c02", "c05", "c10"),
                     fixed_map=None):
    """12 concepts (10 on a ring, 2 interior), 4 contexts, 5-step schedule."""
    ang = np.deg2rad(_RING_DEG)
    means = np.vstack([radius * np.c_[np.cos(ang), np.sin(ang)], np.array(_INTERIOR)])
    means = np.round(means, 6)
    ids = [f"c{i:02d}" for i in range(len(means))]
    cov = ((scale ** 2, 0.0), (0.0, scale ** 2))
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    concepts = []
    for i, m in enumerate(means):
        if i in _SPLIT_DEG:
            th = np.deg2rad(_SPLIT_DEG[i])
            u = split * np.array([np.cos(th), np.sin(th)])
            comps = (Component(0.5, tuple(np.round(m + u, 6)), cov),
                     Component(0.5, tuple(np.round(m - u, 6)), cov))
        else:
            comps = (Component(1.0, tuple(m), cov),)
        related = tuple(ids[j] for j in np.argsort(dist[i], kind="stable")[:n_related])
        concepts.append(Concept(ids[i], comps, related))
    contexts = tuple((f"k{j}", off) for j, off in enumerate(_OFFSETS))
    if fixed_map is None:
        fixed_map = {"c04": "c03", "c07": "c06", "c02": "c03", "c05": "c06", "c10": "c11"}
    fixed_map = {s: t for s, t in fixed_map.items() if s in forget_schedule}
    return ConceptUniverse(tuple(concepts), contexts, tuple(forget_schedule), fixed_map, seed)
