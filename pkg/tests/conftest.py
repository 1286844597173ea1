import time

import numpy as np
import pytest
import yaml

from cul_lab.cli import main
from cul_lab.diffusion import make_schedule
from cul_lab.engine import Checkpoint, UnlearnStepConfig
from cul_lab.nn import Architecture, DenoiserNet, init_params
from cul_lab.world import default_universe


@pytest.fixture(scope="session")
def universe():
    return default_universe()


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def tiny_arch(universe):
    return Architecture(2, 8, universe.cond_dim, (8, 8))


def random_net(arch, seed=0, out_scale=1.0):
    return DenoiserNet(arch, init_params(arch, np.random.default_rng(seed), out_scale=out_scale))


@pytest.fixture
def tiny_net(tiny_arch):
    return random_net(tiny_arch)


def tiny_base(arch, universe, sched, seed=0):
    net = random_net(arch, seed)
    return Checkpoint(0, net, {"pretrain": {"seed": seed}}, sched.to_dict(), (),
                      {"base_sha256": "tiny"})


@pytest.fixture
def tiny_step_cfg():
    return UnlearnStepConfig(iterations=3, unlearn_batch=4, retain_batch=4, ddim_steps=4,
                             replay_per_condition=2, per_context=2, retain_count=16)


# -- acceptance support -------------------------------------------------------------

CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Store and print one PASS/FAIL line per acceptance criterion."""
    def record(n, ok, detail):
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


SEED_VARIANTS = {
    0: ["unlearn_only", "unlearn_retain", "unlearn_reg", "full", "null_mapping", "adaptive_mapping"],
    1: ["unlearn_only", "unlearn_retain", "full", "null_mapping"],
    2: ["unlearn_only", "unlearn_retain", "full", "null_mapping"],
}


def experiment_config(seed, variants):
    return yaml.safe_dump({"seed": seed, "ablation": {"variants": variants,
                                                      "timestep_sweep": False}})


def run_pipeline(root, seed, variants):
    """pretrain + ablate (train and evaluate each variant) + report, through the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config_in.yaml"
    cfg.write_text(experiment_config(seed, variants))
    out = root / "out"
    t0 = time.perf_counter()
    codes = {"pretrain": main(["pretrain", "--config", str(cfg), "--out", str(out)])}
    t_pre = time.perf_counter() - t0
    if codes["pretrain"] == 0:
        codes["ablate"] = main(["ablate", "--config", str(cfg), "--out", str(out)])
        codes["report"] = main(["report", "--config", str(cfg), "--out", str(out)])
    return {"seed": seed, "out": out, "config": cfg, "codes": codes, "pretrain_time": t_pre,
            "total_time": time.perf_counter() - t0, "variants": variants}


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    """The default experiment for three seeds (each seed re-pretrains its own base)."""
    root = tmp_path_factory.mktemp("experiments")
    return {s: run_pipeline(root / f"seed{s}", s, v) for s, v in SEED_VARIANTS.items()}
