import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fscil_forge.config import RunConfig
from fscil_forge.datasets import synthetic_benchmark
from fscil_forge.encoders import build_prototype_bank, depth_encoder_weights, point_encoder_weights
from fscil_forge.errors import ConfigError, DataError, FormatError, ProtocolError, ShapeError
from fscil_forge.heads import Heads
from fscil_forge.learner import (WARNINGS, ExemplarMemory, FeatureExtractor, ModelState, OptimizerState, adamw_step,
                                 ce_loss, compute_loss, decode_checkpoint, encode_checkpoint, infonce_loss,
                                 load_checkpoint, predict, run_experiment, run_session, sample_shots,
                                 save_checkpoint, session_training_ids, softmax_ce, total_loss)
from fscil_forge.rfe import predict_probs, similarity_logits
from fscil_forge.rng import SplitMix64

from helpers import ALL_OFF, gradcheck_case, synthetic_run
from oracles import central_diff, rel_error, scalar_adamw


def test_ce_examples():
    assert ce_loss([0.0, 1.0, 0.0], 1) == 0.0
    assert ce_loss([0.25] * 4, 2) == pytest.approx(math.log(4))
    before = WARNINGS["ce_clamp"]
    assert ce_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    assert WARNINGS["ce_clamp"] == before + 1
    with pytest.raises(ShapeError):
        ce_loss([0.5, 0.5], 2)


def test_softmax_ce_gradient(rng):
    z = rng.normal(size=(3, 5))
    labels = np.array([0, 4, 2])
    loss, grad = softmax_ce(z, labels)
    assert loss == pytest.approx(np.mean([ce_loss(predict_probs(z[i]), labels[i]) for i in range(3)]))
    onehot = np.eye(5)[labels]
    assert np.allclose(grad, (predict_probs(z) - onehot) / 3)
    num = central_diff(lambda: softmax_ce(z, labels)[0], z)
    assert rel_error(grad, num) <= 1e-6


def test_infonce_examples():
    f = np.array([1.0, 0.0])
    ps = [np.array([np.cos(t), np.sin(t)]) for t in (0.5, -0.5, 0.5, -0.5)]
    assert infonce_loss(f, ps[0], ps[1:], 0.1) == pytest.approx(math.log(4))
    # unit prototypes with cosines 0.9 and 0.1
    pos = np.array([0.9, math.sqrt(1 - 0.81)])
    neg = np.array([0.1, math.sqrt(1 - 0.01)])
    expected = math.log(1 + math.exp(-8))
    assert infonce_loss(f, pos, [neg], 0.1) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(3.354e-4, rel=1e-3)
    with pytest.raises(DataError):
        infonce_loss(f, pos, [neg], 0.0)


def test_infonce_gradient_through_cosine(rng):
    f = rng.normal(size=6)
    protos = rng.normal(size=(4, 6))
    tau = 0.2
    logits, ctx = similarity_logits(f, protos)
    _, g = softmax_ce(logits / tau, [0])
    from fscil_forge.rfe import similarity_backward
    analytic = similarity_backward(g / tau, ctx)[0]
    num = central_diff(lambda: infonce_loss(f, protos[0], protos[1:], tau), f)
    assert rel_error(analytic, num) <= 1e-4


@given(st.floats(0, 10), st.floats(0, 10))
def test_total_loss_linear(l_cls, l_cont):
    assert total_loss(l_cls, l_cont, 0.0) == l_cls
    assert total_loss(l_cls, l_cont, 1.0) == l_cls + l_cont
    assert total_loss(l_cls, l_cont, 2.0) - total_loss(l_cls, l_cont, 0.0) == pytest.approx(2 * l_cont)


def test_adamw_matches_scalar_oracle(rng):
    cfg = RunConfig(lr=1e-2, weight_decay=0.05)
    p = {"w": rng.normal(size=(3, 2))}
    state = OptimizerState.for_config(cfg)
    ref_p = p["w"].copy()
    ref_m = np.zeros_like(ref_p)
    ref_v = np.zeros_like(ref_p)
    for t in range(1, 6):
        g = rng.normal(size=(3, 2))
        p = adamw_step(p, {"w": g}, state, cfg)
        for idx in np.ndindex(ref_p.shape):
            ref_p[idx], ref_m[idx], ref_v[idx] = scalar_adamw(ref_p[idx], g[idx], ref_m[idx], ref_v[idx], t,
                                                              cfg.lr, cfg.weight_decay)
        assert np.abs(p["w"] - ref_p).max() <= 1e-12
    assert state.step == 5


def test_adamw_first_step_magnitude():
    cfg = RunConfig(lr=1e-3, weight_decay=0.0)
    out = adamw_step({"w": np.array([1.0, -2.0])}, {"w": np.array([0.3, -5.0])}, OptimizerState(), cfg)
    # bias correction makes the first step lr * g / (|g| + eps') = lr * sign(g)
    assert np.allclose(out["w"], [1.0 - 1e-3, -2.0 + 1e-3], atol=1e-10)


def test_adamw_zero_gradient():
    p = {"w": np.array([1.0, -3.0])}
    out = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), RunConfig(weight_decay=0.0))
    assert np.array_equal(out["w"], p["w"])
    cfg = RunConfig(lr=1e-3, weight_decay=1e-2)
    out = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), cfg)
    assert np.allclose(out["w"], p["w"] * (1 - 1e-5), rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.zeros(3)}, OptimizerState(), cfg)


def test_sample_shots():
    pool = [f"s{i}" for i in range(20)]
    pick = sample_shots(pool, 5, 7)
    assert len(set(pick)) == 5 and set(pick) <= set(pool)
    assert pick == sample_shots(pool, 5, 7)
    before = WARNINGS["shot_shortage"]
    assert sorted(sample_shots(["a", "b", "c"], 5, 1)) == ["a", "b", "c"]
    assert WARNINGS["shot_shortage"] == before + 1
    with pytest.raises(DataError):
        sample_shots([], 5, 1)


@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 2**64 - 1))
def test_sample_shots_is_partial_fisher_yates(n, shots, seed):
    pool = list(range(n))
    k = min(n, shots)
    rng = SplitMix64(seed)
    ref = list(pool)
    for i in range(k):
        j = i + rng.below(n - i)
        ref[i], ref[j] = ref[j], ref[i]
    assert sample_shots(pool, shots, seed, warn=False) == ref[:k]


def test_memory_rules():
    mem = ExemplarMemory()
    mem.add("a", ["a1", "a2"], 1)
    assert mem.sample_ids() == ["a1"]
    with pytest.raises(ProtocolError):
        mem.add("a", ["a3"], 1)


def _small_cfg(**kw):
    base = dict(base_epochs=2, inc_epochs=2, dim=16, point_dim=16, resolution=16, n_aug=1)
    base.update(kw)
    return RunConfig(**base)


def test_full_run_protocol():
    schedule, clouds = synthetic_benchmark(4, 4, 2, 4, 2, 96, 0)
    cfg = _small_cfg()
    seen = []

    def check(b, state, memory, rows):
        assert all(len(ids) <= cfg.memory_per_class for ids in memory.slots.values())
        assert set(memory.classes) == set(schedule.visible_classes(b))
        seen.append(len(rows))

    state, memory, log = run_experiment(schedule, clouds, cfg, on_session=check)
    assert state.session == 3 and [h["session"] for h in state.history] == [1, 2, 3]
    expected = [sum(len(schedule.session(k).test) for k in range(1, b + 1)) for b in (1, 2, 3)]
    assert seen == expected
    # pools of 4 are below 5 shots, so each class contributes 4, plus one exemplar per base class
    assert state.history[1]["n_train"] == 2 * 4 + 4


def test_session_order_enforced():
    schedule, clouds = synthetic_benchmark(2, 2, 1, 2, 1, 64, 0)
    cfg = _small_cfg()
    state = ModelState.init(cfg)
    with pytest.raises(ProtocolError):
        run_session(2, schedule, state, ExemplarMemory(), FeatureExtractor(cfg, clouds), cfg)


def test_memory_cannot_hold_current_classes():
    schedule, clouds = synthetic_benchmark(2, 2, 1, 2, 1, 64, 0)
    cfg = _small_cfg()
    mem = ExemplarMemory()
    mem.add(schedule.session(1).classes[0], ["x"], 1)
    with pytest.raises(ProtocolError):
        run_session(1, schedule, ModelState.init(cfg), mem, FeatureExtractor(cfg, clouds), cfg)


def test_shot_selection_deterministic():
    schedule, _ = synthetic_benchmark(2, 2, 1, 8, 1, 64, 0)
    cfg = RunConfig(shots=3)
    a = session_training_ids(2, schedule, cfg)
    assert a == session_training_ids(2, schedule, cfg) and len(a) == 3
    assert session_training_ids(1, schedule, cfg) == schedule.session(1).train


def test_encoders_stay_frozen():
    w0 = depth_encoder_weights(16, 0).copy()
    p0 = [a.copy() for a in point_encoder_weights(16, 0)]
    schedule, clouds = synthetic_benchmark(3, 2, 2, 3, 1, 64, 0)
    fx = FeatureExtractor(_small_cfg(), clouds)
    before = fx._compute(schedule.session(1).train[0])
    run_experiment(schedule, clouds, _small_cfg())
    after = fx._compute(schedule.session(1).train[0])
    assert all(np.array_equal(x, y) for x, y in zip(before, after))
    assert np.array_equal(depth_encoder_weights(16, 0), w0)
    assert all(np.array_equal(a, b) for a, b in zip(point_encoder_weights(16, 0), p0))


def test_worker_count_does_not_change_results():
    schedule, clouds = synthetic_benchmark(3, 2, 2, 3, 1, 64, 0)
    cfg = _small_cfg()
    _, _, a = run_experiment(schedule, clouds, cfg, workers=1)
    _, _, b = run_experiment(schedule, clouds, cfg, workers=3)
    assert a.to_csv() == b.to_csv()


def test_run_determinism():
    r1, s1, l1 = synthetic_run(1, sessions=2, base_epochs=2, inc_epochs=2)
    r2, s2, l2 = synthetic_run(1, sessions=2, base_epochs=2, inc_epochs=2)
    assert r1.to_json() == r2.to_json()
    assert l1.to_csv() == l2.to_csv()
    assert encode_checkpoint(s1) == encode_checkpoint(s2)


def test_all_off_reduces_to_merger_plus_cosine(rng):
    cfg = RunConfig(n_views=2, dim=4, **ALL_OFF)
    heads = Heads.init(2, 4, 4, 3, 4, SplitMix64(0), with_adapter=False)
    F2D = rng.normal(size=(5, 3, 2, 4))
    labels = rng.integers(0, 3, size=5)
    protos = rng.normal(size=(3, 4))
    parts = compute_loss(heads, F2D, None, labels, protos, None, cfg)
    fd = np.stack([heads.merger.W1.T @ np.maximum(heads.merger.W2.T @ x.reshape(-1) + heads.merger.b2, 0)
                   + heads.merger.b1 for x in F2D[:, 0]])
    cos = (fd / np.linalg.norm(fd, axis=1, keepdims=True)) @ (protos / np.linalg.norm(protos, axis=1,
                                                                                     keepdims=True)).T
    expected = np.mean([ce_loss(predict_probs(cos[i]), labels[i]) for i in range(5)])
    assert parts.total == pytest.approx(expected, abs=1e-12)
    assert parts.cont == 0.0
    assert set(parts.grads.params) == {"W1", "b1", "W2", "b2"}


@pytest.mark.parametrize("overrides", [
    {}, dict(rfe_target="fd"), dict(snc_enabled=False), dict(cont_use_rcs=False), ALL_OFF,
    dict(rfe_enabled=False), dict(cl_enabled=False),
])
def test_loss_gradients(overrides):
    for seed in range(3):
        assert gradcheck_case(seed, **overrides) <= 1e-4


def test_rfe_requires_basis(rng):
    cfg = RunConfig(n_views=1, dim=3, point_dim=2, n_aug=1)
    heads = Heads.init(1, 3, 3, 2, 3, SplitMix64(0))
    with pytest.raises(DataError):
        compute_loss(heads, rng.normal(size=(1, 2, 1, 3)), rng.normal(size=(1, 2, 2)), [0],
                     rng.normal(size=(2, 3)), None, cfg)


def test_full_basis_equivalence_small():
    schedule, clouds = synthetic_benchmark(3, 2, 2, 3, 2, 64, 0)
    cfg = _small_cfg(energy_fraction=1.0)
    state, _, log_rfe = run_experiment(schedule, clouds, cfg)
    fx = FeatureExtractor(cfg, clouds)
    sids = [s for sess in schedule.sessions for s in sess.test]
    classes = schedule.visible_classes(3)
    rfe = predict(state, sids, fx, classes, cfg)
    cos = predict(state, sids, fx, classes, cfg.replace(rfe_enabled=False))
    assert rfe == cos


def test_checkpoint_round_trip(tmp_path):
    _, state, _ = synthetic_run(2, sessions=1, base_epochs=1, dim=8, point_dim=8, n_aug=1)
    raw = encode_checkpoint(state)
    save_checkpoint(tmp_path / "c.ckpt", state)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert encode_checkpoint(back) == raw
    assert back.opt.step == state.opt.step and back.session == 1
    for k in state.opt.m:
        assert np.array_equal(back.opt.m[k], state.opt.m[k]) and np.array_equal(back.opt.v[k], state.opt.v[k])
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b"x")
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:len(raw) - 3])


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(lr=0)
    with pytest.raises(ConfigError):
        RunConfig(rfe_target="fx")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": 1})
    cfg = RunConfig(alpha=0.5)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(alpha=2.0).alpha == 2.0
