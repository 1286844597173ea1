"""Metric suite: oracle-judged accuracies, context alignment, Frechet
distance, parameter drift and concept-revival scans."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .diffusion import ddim_sample_batch, initial_noise
from .errors import StructuralError, UsageError
from .seeding import key_of
from .world import Condition


def sample_conditions(net, universe, conds, n, sched, ddim_steps, seed):
    """``n`` DDIM samples for each condition, as a list of (n, D) arrays.

    The starting noise of each cell depends only on (seed, condition), so a
    cell's samples do not change when other cells are added or removed.
    """
    if not conds:
        return []
    seed = seed if isinstance(seed, tuple) else (seed,)
    D = net.arch.data_dim
    z_T = np.concatenate([initial_noise((*seed, key_of(c.concept_id), key_of(c.context_id)), n, D)
                          for c in conds])
    emb = np.repeat(universe.embed_many(conds), n, axis=0)
    z0 = ddim_sample_batch(net, emb, sched, ddim_steps, z_T)
    return [z0[i * n:(i + 1) * n] for i in range(len(conds))]

CSV_HEADER = ("step", "concept", "UA", "CAS", "RRA", "GRA", "FRECHET", "D_STEP", "D_CUM", "SLACK")


@dataclass(frozen=True)
class EvalConfig:
    n: int = 200
    ddim_steps: int = 20
    seed: int = 7919
    revival_threshold: float = 0.15
    cov_reg: float = 1e-8

    def to_dict(self):
        return asdict(self)


class SampleTable:
    """DDIM samples of one model for a set of (concept, context) cells, drawn
    lazily and memoized. Cell noise depends only on (seed, cell)."""

    def __init__(self, net, universe, sched, n, ddim_steps, seed):
        self.net, self.universe, self.sched = net, universe, sched
        self.n, self.ddim_steps, self.seed = n, ddim_steps, seed
        self._cells = {}

    def fill(self, conds):
        todo = [c for c in dict.fromkeys(conds) if c not in self._cells]
        for c, x in zip(todo, sample_conditions(self.net, self.universe, todo, self.n, self.sched,
                                                self.ddim_steps, (self.seed, "eval"))):
            self._cells[c] = x

    def get(self, cond):
        self.fill([cond])
        return self._cells[cond]

    def classified(self, cond):
        ci, _, ki = self.universe.classify_batch(self.get(cond))
        return ci, ki


def _table(model, universe, sched, n, seed, ddim_steps=20):
    if isinstance(model, SampleTable):
        return model
    if n < 1:
        raise UsageError("need n >= 1 samples per cell")
    return SampleTable(model, universe, sched, n, ddim_steps, seed)


def _conds(universe, concept):
    universe.concept(concept)
    return [Condition(concept, k) for k in universe.context_ids]


def unlearning_accuracy(model, concept, universe, n=200, seed=0, sched=None, ddim_steps=20):
    """Fraction of samples conditioned on ``concept`` (all contexts) that the
    oracle does NOT attribute to ``concept``."""
    tab = _table(model, universe, sched, n, seed, ddim_steps)
    idx = universe.concept_ids.index(concept) if concept in universe.concept_ids else None
    conds = _conds(universe, concept)
    tab.fill(conds)
    return float(np.mean([np.mean(tab.classified(c)[0] != idx) for c in conds]))


def context_alignment(model, concept, universe, n=200, seed=0, sched=None, ddim_steps=20):
    """Fraction of samples whose inferred context equals the requested one."""
    tab = _table(model, universe, sched, n, seed, ddim_steps)
    conds = _conds(universe, concept)
    tab.fill(conds)
    return float(np.mean([np.mean(tab.classified(c)[1] == universe.context_ids.index(c.context_id))
                          for c in conds]))


def retention_accuracy(model, concepts, universe, n=200, seed=0, sched=None, ddim_steps=20,
                       forgotten=()):
    """Fraction of samples attributed to their own conditioning concept,
    averaged over ``concepts`` x contexts."""
    concepts = list(concepts)
    if not concepts:
        raise UsageError("retention accuracy needs at least one concept")
    overlap = set(concepts) & set(forgotten)
    if overlap:
        raise UsageError(f"retention set overlaps the forget set: {sorted(overlap)}")
    tab = _table(model, universe, sched, n, seed, ddim_steps)
    conds = [c for cid in concepts for c in _conds(universe, cid)]
    tab.fill(conds)
    return float(np.mean([np.mean(tab.classified(c)[0] == universe.concept_ids.index(c.concept_id))
                          for c in conds]))


def set_context_alignment(model, concepts, universe, n=200, seed=0, sched=None, ddim_steps=20):
    tab = _table(model, universe, sched, n, seed, ddim_steps)
    return float(np.mean([context_alignment(tab, c, universe) for c in concepts]))


# -- Frechet distance ----------------------------------------------------------

def matrix_sqrt(a):
    """Principal square root of a matrix with positive real spectrum."""
    r = linalg.sqrtm(np.atleast_2d(a))
    r = r[0] if isinstance(r, tuple) else r
    return np.real(r)


def frechet_from_moments(mu1, s1, mu2, s2):
    diff = np.atleast_1d(mu1) - np.atleast_1d(mu2)
    covmean = matrix_sqrt(np.atleast_2d(s1) @ np.atleast_2d(s2))
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(covmean))


def frechet_distance(samples_a, samples_b, cov_reg=1e-8):
    """Squared Frechet distance between Gaussian fits of two sample sets."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise StructuralError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    D = a.shape[1]
    if len(a) < D + 1 or len(b) < D + 1:
        raise UsageError(f"need at least {D + 1} samples per set")
    reg = cov_reg * np.eye(D)
    s1 = np.atleast_2d(np.cov(a, rowvar=False)) + reg
    s2 = np.atleast_2d(np.cov(b, rowvar=False)) + reg
    return max(frechet_from_moments(a.mean(0), s1, b.mean(0), s2), 0.0)


# -- drift and revival ---------------------------------------------------------

def drift_metrics(checkpoints):
    """Per-step distance, distance to the base, and triangle-bound slack."""
    if len(checkpoints) < 2:
        raise UsageError("drift needs at least two checkpoints")
    params = [np.asarray(getattr(c, "params", c)) for c in checkpoints]
    n = params[0].shape
    if any(p.shape != n for p in params):
        raise StructuralError("checkpoints have mismatched parameter lengths")
    d_step = [0.0] + [float(np.linalg.norm(params[i] - params[i - 1])) for i in range(1, len(params))]
    d_cum = [float(np.linalg.norm(p - params[0])) for p in params]
    running = np.cumsum(d_step)
    slack = [float(running[i] - d_cum[i]) for i in range(len(params))]
    return {"d_step": d_step, "d_cum": d_cum, "slack": slack}


def revival_scan(checkpoints, universe, n=200, seed=0, sched=None, ddim_steps=20, threshold=0.15,
                 tables=None):
    """UA of every concept forgotten at step j, re-measured at each later step i.

    Returns ``(matrix, events)``: ``matrix[i-1][j-1]`` for ``j <= i`` (NaN
    above the diagonal), and events ``(i, j, ua)`` where UA fell more than
    ``threshold`` below its value right after step j.
    """
    steps = [c for c in checkpoints if c.step >= 1]
    K = len(steps)
    mat = np.full((K, K), np.nan)
    for a, ck in enumerate(steps):
        tab = tables[ck.step] if tables else _table(ck.net, universe, sched, n, seed, ddim_steps)
        for b in range(a + 1):
            concept = universe.forget_schedule[steps[b].step - 1]
            mat[a, b] = unlearning_accuracy(tab, concept, universe)
    events = [(steps[a].step, steps[b].step, float(mat[a, b]))
              for a in range(K) for b in range(a)
              if mat[a, b] < mat[b, b] - threshold]
    return mat, events


# -- report assembly -----------------------------------------------------------

def evaluate_checkpoint(ckpt, universe, cfg, sched, base_table, table=None, drift=None):
    """One report row. ``base_table`` holds the base model's samples for the
    Frechet comparison; ``drift`` is this step's (d_step, d_cum, slack)."""
    tab = table or SampleTable(ckpt.net, universe, sched, cfg.n, cfg.ddim_steps, cfg.seed)
    i = ckpt.step
    forgotten = universe.forgotten_through(i)
    related = universe.related_set(i)
    general = universe.general_set()
    retained = [c for c in universe.concept_ids if c not in forgotten]
    tab.fill(universe.all_conditions())
    base_table.fill(universe.all_conditions())
    row = {"step": i, "concept": universe.forget_schedule[i - 1] if i else ""}
    row["UA"] = unlearning_accuracy(tab, row["concept"], universe) if i else None
    row["CAS"] = context_alignment(tab, row["concept"], universe) if i else None
    row["RRA"] = retention_accuracy(tab, related, universe, forgotten=forgotten) if related else None
    row["GRA"] = retention_accuracy(tab, general, universe, forgotten=forgotten) if general else None
    row["RRCS"] = set_context_alignment(tab, related, universe) if related else None
    row["GRCS"] = set_context_alignment(tab, general, universe) if general else None
    row["FRECHET"] = float(np.mean([
        frechet_distance(tab.get(c), base_table.get(c), cfg.cov_reg)
        for cid in retained for c in _conds(universe, cid)]))
    row["UA_prior"] = {f: unlearning_accuracy(tab, f, universe) for f in forgotten}
    d = drift or (0.0, 0.0, 0.0)
    row["D_STEP"], row["D_CUM"], row["SLACK"] = (float(x) for x in d)
    row["n_samples"] = len(universe.all_conditions()) * cfg.n
    return row


def evaluate_run(checkpoints, universe, cfg, sched):
    """Rows for every checkpoint plus the revival matrix."""
    base = checkpoints[0]
    if base.step != 0:
        raise UsageError("first checkpoint of a run must be the base model (step 0)")
    base_table = SampleTable(base.net, universe, sched, cfg.n, cfg.ddim_steps, cfg.seed)
    dm = drift_metrics(checkpoints)
    tables = {0: base_table}
    rows = []
    for j, ck in enumerate(checkpoints):
        tab = base_table if j == 0 else SampleTable(ck.net, universe, sched, cfg.n, cfg.ddim_steps,
                                                    cfg.seed)
        tables[ck.step] = tab
        rows.append(evaluate_checkpoint(ck, universe, cfg, sched, base_table, tab,
                                        (dm["d_step"][j], dm["d_cum"][j], dm["slack"][j])))
    mat, events = revival_scan(checkpoints, universe, threshold=cfg.revival_threshold,
                               tables=tables)
    return {"rows": rows, "revival_matrix": mat, "revival_events": events, "drift": dm}
