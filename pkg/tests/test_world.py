from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from cul_lab.errors import ConfigError, UnknownIdError, UsageError
from cul_lab.world import (
    Component,
    Concept,
    ConceptUniverse,
    Condition,
    MappingStrategy,
    default_universe,
)


def gaussian(cid, mean, var=0.09, related=()):
    return Concept(cid, (Component(1.0, tuple(mean), ((var, 0.0), (0.0, var))),), tuple(related))


def small_universe(schedule=("dog",), fixed_map=None, var=0.09, contexts=None):
    concepts = (gaussian("dog", (0.0, 0.0), var, ("cat",)),
                gaussian("cat", (2.0, 0.0), var),
                gaussian("car", (20.0, 20.0), var))
    contexts = contexts or (("k0", (0.0, 0.0)), ("k1", (0.0, 50.0)))
    return ConceptUniverse(concepts, contexts, schedule,
                           fixed_map if fixed_map is not None else {"dog": "cat"})


# -- structure ----------------------------------------------------------------------

def test_default_universe_shape(universe):
    assert len(universe.concepts) == 12 and len(universe.contexts) == 4 and universe.K == 5
    assert universe.cond_dim == 17
    for c in universe.concepts:
        assert c.id not in c.related


def test_embedding_is_two_hot(universe):
    for cond in universe.all_conditions():
        e = universe.embed(cond)
        assert sorted(set(e.tolist())) == [0.0, 1.0] and e.sum() == 2.0
    null = universe.embed(Condition("null", "k2"))
    assert null.sum() == 1.0 and null[len(universe.concepts)] == 1.0


def test_embedding_unknown_ids(universe):
    with pytest.raises(UnknownIdError):
        universe.embed(Condition("nope", "k0"))
    with pytest.raises(UnknownIdError):
        universe.embed(Condition("c00", "k9"))


@pytest.mark.parametrize("bad", [
    dict(schedule=("dog", "dog")),
    dict(fixed_map={"dog": "dog"}),
    dict(schedule=("dog", "cat"), fixed_map={"dog": "cat", "cat": "car"}),
    dict(schedule=("fish",)),
])
def test_universe_invariants(bad):
    with pytest.raises(ConfigError):
        small_universe(**bad)


def test_concept_invariants():
    with pytest.raises(ConfigError):
        Concept("a", (Component(0.6, (0.0, 0.0), ((1.0, 0.0), (0.0, 1.0))),))
    with pytest.raises(ConfigError):
        Concept("a", (Component(1.0, (0.0, 0.0), ((1.0, 2.0), (2.0, 1.0))),))
    with pytest.raises(ConfigError):
        gaussian("a", (0, 0), related=("a",))


def test_default_cells_are_separated(universe):
    o = universe._oracle
    means = o["mean"]
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    same = (o["concept"][:, None] == o["concept"][None]) & (o["context"][:, None] == o["context"][None])
    assert d[~same].min() > 1.5


def test_yaml_round_trip(universe, tmp_path):
    p = tmp_path / "u.yaml"
    universe.dump(p)
    back = ConceptUniverse.load(p)
    assert back.to_dict() == universe.to_dict()


def test_malformed_description():
    with pytest.raises(ConfigError):
        ConceptUniverse.from_dict({"concepts": [{"id": "a"}]})


def test_with_schedule(universe):
    u3 = universe.with_schedule(3)
    assert u3.forget_schedule == universe.forget_schedule[:3]
    assert set(u3.fixed_map) == set(u3.forget_schedule)
    with pytest.raises(ConfigError):
        universe.with_schedule(6)


# -- ground truth ---------------------------------------------------------------------

def test_degenerate_gaussian_samples():
    u = small_universe(var=1e-6)
    x = u.sample_ground_truth(Condition("cat", "k1"), 500, 0)
    assert np.all(np.linalg.norm(x - np.array([2.0, 50.0]), axis=1) < 0.01)


def test_ground_truth_mean(universe):
    n = 10_000
    cond = Condition("c03", "k0")
    x = universe.sample_ground_truth(cond, n, 5)
    sigma = 0.3
    mean = np.asarray(universe.concept("c03").components[0].mean)
    assert np.all(np.abs(x.mean(0) - mean) < 4 * sigma / np.sqrt(n))


def test_context_shift_matches_offsets(universe):
    n = 10_000
    a = universe.sample_ground_truth(Condition("c00", "k1"), n, 1)
    b = universe.sample_ground_truth(Condition("c00", "k3"), n, 2)
    # c00 is a two-component mixture: per-coordinate sd below 0.5
    want = universe.offset("k1") - universe.offset("k3")
    assert np.all(np.abs((a.mean(0) - b.mean(0)) - want) < 4 * 0.5 * np.sqrt(2.0 / n))


def test_ground_truth_deterministic(universe):
    c = Condition("c05", "k2")
    assert np.array_equal(universe.sample_ground_truth(c, 10, 3), universe.sample_ground_truth(c, 10, 3))


# -- oracle ---------------------------------------------------------------------------

def test_oracle_at_isolated_mean():
    u = small_universe()
    cid, post, kid = u.oracle_classify(np.array([20.0, 70.0]))
    assert cid == "car" and kid == "k1" and post[2] > 0.99


def test_oracle_on_default_component_means(universe):
    for c in universe.concepts:
        for k in universe.context_ids:
            for comp in c.components:
                cid, post, kid = universe.oracle_classify(np.asarray(comp.mean) + universe.offset(k))
                assert cid == c.id and kid == k
                assert post[universe.concept_ids.index(c.id)] > 0.99


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_posterior_normalized(seed):
    u = default_universe()
    x = np.random.default_rng(seed).uniform(-12, 12, size=(20, 2))
    _, post, _ = u.classify_batch(x)
    assert np.all(np.abs(post.sum(1) - 1.0) < 1e-12)


def test_oracle_matches_brute_force_density(universe):
    rng = np.random.default_rng(8)
    x = np.vstack([rng.uniform(-12, 12, size=(40, 2)),
                   universe.sample_ground_truth(Condition("c07", "k2"), 40, 1)])
    nc, nk = len(universe.concepts), len(universe.contexts)
    logp = np.full((len(x), nc, nk), -np.inf)
    for ci, con in enumerate(universe.concepts):
        for ki, (_, off) in enumerate(universe.contexts):
            terms = [np.log(comp.weight) + multivariate_normal(np.asarray(comp.mean) + off,
                                                               np.asarray(comp.cov)).logpdf(x)
                     for comp in con.components]
            logp[:, ci, ki] = logsumexp(np.stack(terms), axis=0)
    np.testing.assert_allclose(universe.cell_log_likelihood(x), logp, rtol=1e-10, atol=1e-10)
    joint = np.exp(logp - logsumexp(logp, axis=(1, 2), keepdims=True))
    ci, post, ki = universe.classify_batch(x)
    np.testing.assert_allclose(post, joint.sum(2), atol=1e-12)
    assert np.array_equal(ci, joint.sum(2).argmax(1))
    assert np.array_equal(ki, joint.sum(1).argmax(1))


def test_oracle_accuracy_on_large_ground_truth_sample(universe):
    n = 10_000
    per_cell = n // len(universe.context_ids)
    for ci, c in enumerate(universe.concept_ids):
        concept_hits = context_hits = 0
        for ki, k in enumerate(universe.context_ids):
            got_c, _, got_k = universe.classify_batch(
                universe.sample_ground_truth(Condition(c, k), per_cell, 100 + ki))
            concept_hits += int(np.sum(got_c == ci))
            context_hits += int(np.sum(got_k == ki))
        assert concept_hits / n >= 0.99 and context_hits / n >= 0.95


def test_ground_truth_is_classified_correctly(universe):
    for cond in universe.all_conditions():
        ci, _, ki = universe.classify_batch(universe.sample_ground_truth(cond, 200, 0))
        assert np.mean(ci == universe.concept_ids.index(cond.concept_id)) > 0.97
        assert np.mean(ki == universe.context_ids.index(cond.context_id)) > 0.97


# -- mapping ------------------------------------------------------------------------

def test_fixed_map_keeps_context():
    u = small_universe()
    for k in ("k0", "k1"):
        assert u.map_condition("fixed", Condition("dog", k)) == Condition("cat", k)


def test_null_map():
    u = small_universe()
    assert u.map_condition("null", Condition("dog", "k1")).is_null


def test_adaptive_single_candidate():
    concepts = (gaussian("a", (0, 0)), gaussian("b", (1, 0)), gaussian("c", (100, 0)))
    u = ConceptUniverse(concepts, (("k0", (0.0, 0.0)),), ("a", "b"), {"a": "c", "b": "c"})
    assert u.map_condition("adaptive", Condition("a", "k0")).concept_id == "c"


def test_adaptive_nearest_mean_table():
    pts = {"f": (0.0, 0.0), "p": (3.0, 4.0), "q": (-2.0, 2.0), "r": (6.0, 0.0)}
    concepts = tuple(gaussian(k, v) for k, v in pts.items())
    u = ConceptUniverse(concepts, (("k0", (0.0, 0.0)), ("k1", (9.0, 9.0))), ("f",), {"f": "r"})
    # distances from f: p = 5, q = sqrt(8) ~ 2.83, r = 6
    for k in ("k0", "k1"):
        assert u.map_condition("adaptive", Condition("f", k)) == Condition("q", k)


def test_adaptive_never_targets_scheduled(universe):
    for f in universe.forget_schedule:
        m = universe.map_condition(MappingStrategy("adaptive"), Condition(f, "k0"))
        assert m.concept_id not in universe.forget_schedule


@given(st.sampled_from(["fixed", "adaptive"]), st.integers(0, 4), st.integers(0, 3))
def test_mapping_preserves_context(kind, j, k):
    u = default_universe()
    cond = Condition(u.forget_schedule[j], u.context_ids[k])
    assert u.map_condition(kind, cond).context_id == cond.context_id


def test_mapping_requires_forget_member(universe):
    with pytest.raises(UsageError):
        universe.map_condition("fixed", Condition("c00", "k0"))
    with pytest.raises(UsageError):
        universe.map_condition("fixed", Condition(universe.forget_schedule[2], "k0"), step=2)
    with pytest.raises(ConfigError):
        MappingStrategy("random")


# -- prompt sets -------------------------------------------------------------------

def test_prompt_set_counts(universe):
    forget, mapped, retain = universe.build_prompt_sets(1, per_context=5)
    assert len(forget) == 20 and len(mapped) == 20
    for f, m in zip(forget, mapped):
        assert f.concept_id == universe.forget_schedule[0]
        assert m == Condition(universe.fixed_map[f.concept_id], f.context_id)
    assert Counter(f.context_id for f in forget) == {k: 5 for k in universe.context_ids}


@pytest.mark.parametrize("kind", ["fixed", "adaptive", "null"])
def test_retain_set_excludes_forgotten(universe, kind):
    for i in range(1, universe.K + 1):
        _, _, retain = universe.build_prompt_sets(i, kind)
        gone = set(universe.forget_schedule[:i])
        assert retain and all(c.concept_id not in gone for c in retain)


def test_related_concepts_doubled(universe):
    for i in range(1, universe.K + 1):
        _, _, retain = universe.build_prompt_sets(i)
        counts = Counter(c.concept_id for c in retain)
        target = universe.forget_schedule[i - 1]
        gone = set(universe.forget_schedule[:i])
        related = [r for r in universe.concept(target).related if r not in gone]
        unrelated = [c for c in universe.concept_ids if c not in gone and c not in related]
        base = counts[unrelated[0]]
        assert all(counts[c] == base for c in unrelated)
        assert all(counts[r] == 2 * base for r in related)


def test_prompt_set_step_range(universe):
    for i in (0, universe.K + 1):
        with pytest.raises(UsageError):
            universe.build_prompt_sets(i)


def test_related_and_general_sets(universe):
    gone = set()
    for i in range(1, universe.K + 1):
        gone.add(universe.forget_schedule[i - 1])
        rel = universe.related_set(i)
        assert not set(rel) & gone
    gen = universe.general_set()
    assert gen and not set(gen) & set(universe.forget_schedule)
    for f in universe.forget_schedule:
        assert not set(gen) & set(universe.concept(f).related)
