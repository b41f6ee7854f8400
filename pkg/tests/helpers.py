"""Shared experiment fixtures for the learner and acceptance tests."""

import math

import numpy as np

from fscil_forge.config import RunConfig
from fscil_forge.datasets import synthetic_benchmark
from fscil_forge.heads import Heads
from fscil_forge.learner import compute_loss, run_experiment
from fscil_forge.metrics import compile_report
from fscil_forge.rfe import fit_basis
from fscil_forge.rng import SplitMix64

from oracles import central_diff, rel_error

ALL_OFF = dict(rfe_enabled=False, snc_enabled=False, cl_enabled=False)
# the stated defaults before the two documented deviations
LITERAL_DEFAULTS = dict(rotation_range=(0.0, 2 * math.pi), cont_use_rcs=False)


def gradcheck_case(seed, **overrides):
    """Max relative error between analytic and central-difference gradients of the total loss."""
    rng = np.random.default_rng(seed)
    n, c, d3 = int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(2, 6))
    cfg = RunConfig(n_views=n, dim=c, point_dim=d3, hidden=int(rng.integers(2, 6)),
                    point_hidden=int(rng.integers(2, 6)), n_aug=int(rng.integers(1, 3)),
                    alpha=float(rng.uniform(0.5, 2)), tau=float(rng.uniform(0.1, 1)), **overrides)
    heads = Heads.init(n, c, cfg.hidden_dim, d3, cfg.point_hidden_dim, SplitMix64(seed),
                       with_adapter=cfg.snc_enabled)
    for name, p in heads.named_params().items():
        heads.set_param(name, p + 0.1 * rng.normal(size=p.shape))
    b, k = 3, 4
    F2D = rng.normal(size=(b, 1 + cfg.n_aug, n, c))
    f3D = rng.normal(size=(b, 1 + cfg.n_aug, d3))
    labels = rng.integers(0, k, size=b)
    protos = rng.normal(size=(k, c))
    basis = fit_basis(rng.normal(size=(10, c)) * np.linspace(2, 0.2, c), cfg.energy_fraction) if cfg.rfe_enabled else None

    def loss():
        heads.touch()
        return compute_loss(heads, F2D, f3D, labels, protos, basis, cfg).total

    heads.touch()
    grads = compute_loss(heads, F2D, f3D, labels, protos, basis, cfg).grads.params
    worst = 0.0
    for name, p in heads.named_params(include_adapter=cfg.snc_enabled).items():
        worst = max(worst, rel_error(grads[name], central_diff(loss, p, 1e-5)))
    return worst


def toy_overfit(seed, **overrides):
    """4 synthetic classes x 5 shots, 20 epochs; returns (train accuracy, epoch-mean losses)."""
    schedule, clouds = synthetic_benchmark(4, 0, 1, 5, 2, 256, seed)
    cfg = RunConfig(master_seed=seed, base_epochs=20).replace(**overrides)
    state, _, _ = run_experiment(schedule, clouds, cfg)
    h = state.history[0]
    return h["train_accuracy"], h["epoch_losses"]


def synthetic_run(seed, sessions=None, **overrides):
    """10 base classes plus 3 incremental sessions of 2; returns (report, state, log)."""
    schedule, clouds = synthetic_benchmark(10, 6, 2, 5, 5, 256, seed)
    cfg = RunConfig(master_seed=seed).replace(**overrides)
    state, _, log = run_experiment(schedule, clouds, cfg, sessions=sessions)
    return compile_report(log, schedule, cfg.to_dict(), cfg.ncacc_literal), state, log
