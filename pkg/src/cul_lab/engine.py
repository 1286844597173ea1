"""Teacher-student continual unlearning: pretraining, the three distillation
losses, the per-step training loop, sequencing, checkpoints and ablations."""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import (
    ddim_sample_batch,
    forward_diffuse,
    initial_noise,
    make_schedule,
    sample_training_timestep,
)
from .errors import ConfigError, GateError, NumericalError, StructuralError, UsageError
from .nn import BACKEND, AdamState, Architecture, DenoiserNet, adam_step, init_params
from .nn import forward as net_forward
from .nn import loss_and_grad
from .seeding import key_of, rng_for
from .world import MAPPING_KINDS, Condition

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cul-lab-checkpoint/1"


@dataclass(frozen=True)
class UnlearnStepConfig:
    lambda_unlearn: float = 1.0
    lambda_retain: float = 10.0
    lambda_reg: float = 1e-4
    lr: float = 3e-4
    iterations: int = 1000
    unlearn_batch: int = 8
    retain_batch: int = 16
    t_range: tuple = (1, 120)
    ddim_steps: int = 20
    replay_per_condition: int = 4
    mapping: str = "fixed"
    per_context: int = 10
    retain_count: int = 96
    divergence_limit: float = 1e6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "t_range", tuple(int(x) for x in self.t_range))
        if min(self.lambda_unlearn, self.lambda_retain, self.lambda_reg) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.unlearn_batch < 1 or self.retain_batch < 1 or self.replay_per_condition < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not (1 <= self.t_range[0] <= self.t_range[1]):
            raise ConfigError(f"invalid timestep range {self.t_range}")
        if self.mapping not in MAPPING_KINDS:
            raise ConfigError(f"unknown mapping {self.mapping!r}")

    def to_dict(self):
        d = asdict(self)
        d["t_range"] = list(self.t_range)
        return d


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 8000
    batch_size: int = 512
    lr: float = 2e-3
    lr_final: float = 1e-4
    null_fraction: float = 0.1
    pool_per_cell: int = 2000
    hidden: tuple = (256, 256)
    time_dim: int = 16
    cond_scale: float = 4.0
    gate_n: int = 200
    gate_concept: float = 0.9
    gate_context: float = 0.8
    gate_loss_ratio: float = 5.0
    ddim_steps: int = 20
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def params_hash(params):
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


# -- checkpoints ---------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    step: int
    net: DenoiserNet
    config: dict
    schedule: dict
    forget_set: tuple
    provenance: dict = field(default_factory=dict)
    wall_time: float = 0.0  # kept out of the file so artifacts stay byte-reproducible

    @property
    def params(self):
        return self.net.params

    def to_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "step": self.step,
            "config_hash": config_hash(self.config),
            "schedule": self.schedule,
            "architecture": self.net.arch.to_dict(),
            "forget_set": list(self.forget_set),
            "config": self.config,
            "provenance": self.provenance,
            "params_sha256": params_hash(self.params),
            "params": [float(x) for x in self.params],
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        if d.get("format") != CHECKPOINT_FORMAT:
            raise StructuralError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        a = d["architecture"]
        arch = Architecture(a["data_dim"], a["time_dim"], a["cond_dim"], tuple(a["hidden"]),
                            a["cond_scale"])
        net = DenoiserNet(arch, np.array(d["params"], dtype=np.float64))
        if params_hash(net.params) != d["params_sha256"]:
            raise StructuralError(f"{path}: parameter checksum mismatch")
        return cls(d["step"], net, d["config"], d["schedule"], tuple(d["forget_set"]),
                   d.get("provenance", {}))


def schedule_of(ckpt):
    s = ckpt.schedule
    return make_schedule(s["T"], s["beta_start"], s["beta_end"])


# -- pretraining ---------------------------------------------------------------

def _ground_truth_pool(universe, n_per_cell, seed):
    conds = universe.all_conditions()
    pool = np.stack([universe.sample_ground_truth(c, n_per_cell, (seed, "pool", j))
                     for j, c in enumerate(conds)])
    return conds, pool


def pretrain_base(universe, cfg=None, sched=None, check_gates=True):
    """Train the base model on ground truth for every condition (plus the
    null condition) with the simple epsilon-prediction objective.

    Returns ``(checkpoint, report)``. Raises :class:`GateError` (carrying the
    report) when the quality gates fail and ``check_gates`` is set.
    """
    cfg = cfg or PretrainConfig()
    sched = sched or make_schedule()
    t0 = time.perf_counter()
    arch = Architecture(2, cfg.time_dim, universe.cond_dim, tuple(cfg.hidden), cfg.cond_scale)
    theta = init_params(arch, rng_for(cfg.seed, "init"))
    conds, pool = _ground_truth_pool(universe, cfg.pool_per_cell, cfg.seed)
    embs = universe.embed_many(conds)
    null_emb = universe.embed(Condition("null", universe.context_ids[0]))
    n_cells, n_pool = pool.shape[:2]

    def draw(rng, B):
        cell = rng.integers(0, n_cells, size=B)
        z0 = pool[cell, rng.integers(0, n_pool, size=B)]
        cond = embs[cell].copy()
        is_null = rng.random(B) < cfg.null_fraction
        cond[is_null] = null_emb
        t = sample_training_timestep((1, sched.T), rng, size=B)
        eps = rng.standard_normal((B, 2))
        return forward_diffuse(z0, t, eps, sched), t, cond, eps

    probe = draw(rng_for(cfg.seed, "probe"), 4096)
    net = DenoiserNet(arch, theta)
    probe_initial = loss_and_grad(net, *probe)[0]
    state = AdamState.zeros(arch.n_params, lr=cfg.lr)
    curve = []
    for it in range(cfg.iterations):
        frac = it / max(cfg.iterations - 1, 1)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
        loss, grad = loss_and_grad(net, *draw(rng_for(cfg.seed, "batch", it), cfg.batch_size))
        theta, state = adam_step(net.params, grad, replace(state, lr=lr))
        net = DenoiserNet(arch, theta)
        curve.append(loss)
    probe_final = loss_and_grad(net, *probe)[0]

    provenance = {"seed": cfg.seed, "iterations": cfg.iterations, "backend": BACKEND}
    ckpt = Checkpoint(0, net, {"pretrain": cfg.to_dict(), "universe": universe.to_dict()},
                      sched.to_dict(), (), provenance, time.perf_counter() - t0)
    ckpt = replace(ckpt, provenance={**provenance, "base_sha256": params_hash(net.params)})
    report = base_quality_report(ckpt, universe, cfg, sched)
    report.update({"probe_loss_initial": probe_initial, "probe_loss_final": probe_final,
                   "loss_curve": curve})
    report["gate_loss"] = probe_initial >= cfg.gate_loss_ratio * probe_final
    report["passed"] = report["gate_sampling"] and report["gate_loss"]
    if check_gates and not report["passed"]:
        raise GateError("base model failed quality gates", report)
    return ckpt, report


def base_quality_report(ckpt, universe, cfg, sched):
    from .evaluation import sample_conditions

    conds = universe.all_conditions()
    per_cond = {}
    samples = sample_conditions(ckpt.net, universe, conds, cfg.gate_n, sched, cfg.ddim_steps,
                                (cfg.seed, "gate"))
    ok = True
    for cond, x in zip(conds, samples):
        ci, _, ki = universe.classify_batch(x)
        ca = float(np.mean(ci == universe.concept_ids.index(cond.concept_id)))
        ka = float(np.mean(ki == universe.context_ids.index(cond.context_id)))
        per_cond[f"{cond.concept_id}/{cond.context_id}"] = {"concept_acc": ca, "context_acc": ka}
        ok &= ca >= cfg.gate_concept and ka >= cfg.gate_context
    return {"per_condition": per_cond, "gate_sampling": bool(ok),
            "min_concept_acc": min(v["concept_acc"] for v in per_cond.values()),
            "min_context_acc": min(v["context_acc"] for v in per_cond.values())}


# -- replay cache ------------------------------------------------------------

@dataclass
class ReplayCache:
    """Teacher DDIM samples per condition, with the noise seed of each."""

    z0: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def get(self, cond):
        return self.z0[cond]


def build_replay_cache(teacher, universe, conds, sched, cfg, step):
    uniq = list(dict.fromkeys(conds))
    seeds, rows, embs = {}, [], []
    for c in uniq:
        seeds[c] = [(cfg.seed, step, key_of(c.concept_id), key_of(c.context_id), j)
                    for j in range(cfg.replay_per_condition)]
        for s in seeds[c]:
            rows.append(initial_noise(s, 1, teacher.arch.data_dim)[0])
        embs.append(np.repeat(universe.embed(c)[None], cfg.replay_per_condition, axis=0))
    if not uniq:
        return ReplayCache()
    z0 = ddim_sample_batch(teacher, np.concatenate(embs), sched, cfg.ddim_steps, np.array(rows))
    per = cfg.replay_per_condition
    return ReplayCache({c: z0[i * per:(i + 1) * per] for i, c in enumerate(uniq)}, seeds)


# -- losses ------------------------------------------------------------------

def _distill(student, teacher, z0, c_student, c_teacher, sched, cfg, rng):
    B = z0.shape[0]
    t = sample_training_timestep(cfg.t_range, rng, size=B)
    eps = rng.standard_normal(z0.shape)
    z_t = forward_diffuse(z0, t, eps, sched)
    target = net_forward(teacher, z_t, t, c_teacher)
    return loss_and_grad(student, z_t, t, c_student, target)


def _replay_z0(cache, conds, rng):
    return np.stack([cache.get(c)[rng.integers(0, len(cache.get(c)))] for c in conds])


def unlearn_batch_loss(student, teacher, pairs, universe, sched, cfg, rng, cache):
    """Contextual trajectory re-steering on ``pairs`` of (forget, mapped)
    conditions: the student under the forget condition matches the frozen
    teacher under the mapped condition on teacher-generated forget latents."""
    if not pairs:
        raise UsageError("unlearn batch is empty")
    c_f = [p[0] for p in pairs]
    z0 = _replay_z0(cache, c_f, rng)
    return _distill(student, teacher, z0, universe.embed_many(c_f),
                    universe.embed_many([p[1] for p in pairs]), sched, cfg, rng)


def retain_batch_loss(student, teacher, conds, universe, sched, cfg, rng, cache):
    """Generative replay: student and teacher see the same retain condition."""
    if not conds:
        raise UsageError("retain batch is empty")
    z0 = _replay_z0(cache, conds, rng)
    e = universe.embed_many(conds)
    return _distill(student, teacher, z0, e, e, sched, cfg, rng)


def reg_loss(student_params, teacher_params):
    """Squared L2 distance to the teacher and its gradient ``2 (s - t)``."""
    a = np.asarray(student_params, dtype=np.float64)
    b = np.asarray(teacher_params, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StructuralError(f"length mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff), 2.0 * diff


def total_step_loss(student, teacher, batches, universe, sched, cfg, rng, cache):
    """Weighted sum of the three terms. ``batches = (pairs, retain_conds)``.

    Returns ``(total, grad, breakdown)`` with the unweighted terms in the
    breakdown. All terms are always evaluated so every ablation variant
    consumes the same random draws.
    """
    pairs, retain = batches
    lu, gu = unlearn_batch_loss(student, teacher, pairs, universe, sched, cfg, rng, cache)
    lr_, gr = retain_batch_loss(student, teacher, retain, universe, sched, cfg, rng, cache)
    lg, gg = reg_loss(student.params, teacher.params)
    total = cfg.lambda_unlearn * lu + cfg.lambda_retain * lr_ + cfg.lambda_reg * lg
    grad = cfg.lambda_unlearn * gu + cfg.lambda_retain * gr + cfg.lambda_reg * gg
    return total, grad, {"unlearn": lu, "retain": lr_, "reg": lg, "total": total}


# -- training loop -------------------------------------------------------------

def run_unlearn_step(prev, universe, cfg, sched=None, curve=None):
    """One continual-unlearning step starting from ``prev``; returns the new checkpoint."""
    sched = sched or schedule_of(prev)
    i = prev.step + 1
    if i > universe.K:
        raise UsageError(f"step {i} exceeds forget schedule length {universe.K}")
    t_start = time.perf_counter()
    teacher = prev.net
    student = prev.net
    forget, mapped, retain = universe.build_prompt_sets(
        i, cfg.mapping, per_context=cfg.per_context, retain_count=cfg.retain_count)
    pairs = list(zip(forget, mapped))
    cache = build_replay_cache(teacher, universe, forget + retain, sched, cfg, i) \
        if cfg.iterations else ReplayCache()
    state = AdamState.zeros(teacher.arch.n_params, lr=cfg.lr)
    for it in range(cfg.iterations):
        rng = rng_for(cfg.seed, i, it)
        bp = [pairs[j] for j in rng.integers(0, len(pairs), size=cfg.unlearn_batch)]
        br = [retain[j] for j in rng.integers(0, len(retain), size=cfg.retain_batch)]
        total, grad, parts = total_step_loss(student, teacher, (bp, br), universe, sched, cfg,
                                             rng, cache)
        if not all(np.isfinite(v) and abs(v) <= cfg.divergence_limit for v in parts.values()):
            raise NumericalError(f"divergence at step {i}, iteration {it}: {parts}",
                                 {"step": i, "iteration": it, **parts})
        theta, state = adam_step(student.params, grad, state)
        student = student.with_params(theta)
        if curve is not None:
            curve.append({"step": i, "iteration": it, **parts})
    forget_set = tuple(prev.forget_set) + (universe.forget_schedule[i - 1],)
    prov = {**prev.provenance, "seed": cfg.seed, "iterations": cfg.iterations,
            "backend": BACKEND, "parent_sha256": params_hash(prev.params)}
    return Checkpoint(i, student, cfg.to_dict(), sched.to_dict(), forget_set, prov,
                      time.perf_counter() - t_start)


def run_sequence(base, universe, configs, out_dir=None, start=None):
    """Fold :func:`run_unlearn_step` over the schedule. With ``start`` (an
    intermediate checkpoint) the sequence resumes after it.

    Returns ``(checkpoints, run_log)``; ``checkpoints`` includes the base.
    """
    if len(configs) != universe.K:
        raise ConfigError(f"need {universe.K} step configs, got {len(configs)}")
    ckpts = [base] if start is None else [start]
    run_log = {"curves": [], "wall_time": {}}
    sched = schedule_of(base)
    for i in range(ckpts[-1].step + 1, universe.K + 1):
        curve = []
        try:
            nxt = run_unlearn_step(ckpts[-1], universe, configs[i - 1], sched, curve)
        finally:
            run_log["curves"].extend(curve)
        ckpts.append(nxt)
        run_log["wall_time"][i] = nxt.wall_time
        if out_dir is not None:
            nxt.save(Path(out_dir) / f"step_{i:02d}.json")
        log.info("step %d done in %.1fs", i, nxt.wall_time)
    return ckpts, run_log


ABLATION_VARIANTS = ("unlearn_only", "unlearn_retain", "unlearn_reg", "full",
                     "null_mapping", "adaptive_mapping")


def make_ablation_configs(base):
    """The four loss-term ablations plus two mapping baselines, sharing seeds."""
    return {
        "unlearn_only": replace(base, lambda_retain=0.0, lambda_reg=0.0),
        "unlearn_retain": replace(base, lambda_reg=0.0),
        "unlearn_reg": replace(base, lambda_retain=0.0),
        "full": base,
        "null_mapping": replace(base, mapping="null"),
        "adaptive_mapping": replace(base, mapping="adaptive"),
    }


def make_reg_sweep_configs(base, weights=(1e-4, 1e-2, 1.0)):
    """Full method at several regularizer weights."""
    return {f"reg_{w:g}": replace(base, lambda_reg=float(w)) for w in weights}


def make_timestep_configs(base, T):
    """Maximum-timestep sweep at 0.3T, 0.6T, 0.8T and T."""
    return {f"tmax_{int(round(f * T))}": replace(base, t_range=(1, int(round(f * T))))
            for f in (0.3, 0.6, 0.8, 1.0)}
