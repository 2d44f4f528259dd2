import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamex import numerics as nx
from mamex.data import Dataset, TripletBatch, generate_synthetic, random_recall_baseline
from mamex.errors import CheckpointMismatch, ConfigError, DataError, IntegrityError, NumericError, ShapeError
from mamex.training import (VARIANTS, MamexModel, ModelConfig, TrainState, adam_step, bpr_loss,
                            load_checkpoint, save_checkpoint, score, total_loss, train)

from toy import frozen_loss_fn, toy_batch, toy_dataset, toy_model


def test_score():
    assert score([1, 2], [3, 4]) == 11
    assert score([1, 0], [0, 1]) == 0
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 16))
    loop = 0.0
    for x, y in zip(a, b):
        loop += x * y
    assert score(a, b) == pytest.approx(loop, abs=1e-13)
    with pytest.raises(ShapeError):
        score([1, 2], [1, 2, 3])


def test_bpr_examples():
    total, mean = bpr_loss([(0.3, 0.3), (1.0, 1.0)])
    assert mean == pytest.approx(math.log(2)) and total == pytest.approx(2 * math.log(2))
    assert bpr_loss([(1.0, 0.0)])[0] == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert bpr_loss([(1.0, 0.0)])[0] == pytest.approx(0.3133, abs=1e-4)
    hi, lo = bpr_loss([(50.0, 0.0)])[0], bpr_loss([(0.0, 50.0)])[0]
    assert math.isfinite(hi) and hi == pytest.approx(0.0, abs=1e-20)
    assert lo == pytest.approx(50.0, abs=1e-12)


@given(st.floats(-30, 30))
def test_bpr_swap_bound(d):
    total = bpr_loss([(d, 0.0)])[0] + bpr_loss([(0.0, d)])[0]
    assert total >= 2 * math.log(2) - 1e-12
    if d == 0:
        assert total == pytest.approx(2 * math.log(2))


def test_zero_weights_leave_pure_bpr():
    model, ds = toy_model(lambda1=0, lambda2=0, lambda3=0, lambda4=0)
    batch = toy_batch()
    loss, parts, fwd = total_loss(model, batch, ds)
    e = fwd.e.value
    u = model.user_emb.value[batch.users]
    n = len(batch)
    pairs = [(u[t] @ e[t], u[t] @ e[n + t]) for t in range(n)]
    assert float(loss) == bpr_loss(pairs)[1]


def test_l2_term_matches_parameter_dump():
    model, ds = toy_model(lambda4=1.0)
    base, _ = toy_model(lambda4=0.0)
    batch = toy_batch()
    with_l2 = float(total_loss(model, batch, ds)[0])
    without = float(total_loss(base, batch, ds)[0])
    dump = sum(float(np.sum(v ** 2)) for v in model.snapshot().values())
    assert with_l2 - without == pytest.approx(dump, rel=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_loss_gradient(variant):
    model, ds = toy_model(variant)
    err = nx.finite_difference_check(frozen_loss_fn(model, ds, toy_batch()), model.parameters(), h=1e-5)
    assert err < 1e-4


def test_gradient_with_missing_modality():
    present = np.array([[True, True], [False, True], [True, False], [True, True]])
    model, ds = toy_model("full", dataset=toy_dataset(present=present))
    assert nx.finite_difference_check(frozen_loss_fn(model, ds, toy_batch()), model.parameters()) < 1e-4


def test_item_without_features_is_data_error():
    present = np.array([[True, True], [False, False], [True, True], [True, True]])
    model, ds = toy_model("full", dataset=toy_dataset(present=present))
    with pytest.raises(DataError):
        total_loss(model, toy_batch(), ds)


def _scalar_state(value, grad_value=1.0):
    model, _ = toy_model()
    state = TrainState(model)
    grads = {p.name: np.full_like(p.value, grad_value) for p in model.parameters()}
    for p in model.parameters():
        p.value[...] = value
    return state, grads


def test_adam_first_step():
    state, grads = _scalar_state(0.0)
    adam_step(state, grads, ModelConfig(lr=0.001))
    expected = -0.001 * (1.0 / (1.0 + 1e-8))
    for p in state.model.parameters():
        assert np.allclose(p.value, expected, rtol=1e-12, atol=0)
    assert state.step_count == 1


def test_adam_zero_gradient():
    state, grads = _scalar_state(0.3, grad_value=1.0)
    cfg = ModelConfig()
    adam_step(state, grads, cfg)
    before = state.model.snapshot()
    m_before = {k: v.copy() for k, v in state.m.items()}
    zero = {k: np.zeros_like(v) for k, v in grads.items()}
    # moments decay but the update uses them, so only a zero history leaves parameters fixed
    fresh, _ = _scalar_state(0.3)
    adam_step(fresh, zero, cfg)
    assert all(np.array_equal(p.value, np.full_like(p.value, 0.3)) for p in fresh.model.parameters())
    adam_step(state, zero, cfg)
    for k in m_before:
        assert np.allclose(state.m[k], 0.9 * m_before[k])
    assert any(not np.array_equal(before[k], v) for k, v in state.model.snapshot().items())


def test_adam_nan_names_block():
    state, grads = _scalar_state(0.0)
    grads["user_emb"][0, 0] = np.nan
    with pytest.raises(NumericError, match="user_emb"):
        adam_step(state, grads, ModelConfig())


def _run_steps(seed, steps=10):
    model, ds = toy_model(seed=seed)
    state = TrainState(model)
    cfg = model.config
    for _ in range(steps):
        with nx.Tape() as tape:
            loss, _, _ = total_loss(model, toy_batch(), ds)
        adam_step(state, nx.backward(tape, loss, model.parameters()), cfg)
    return model.snapshot()


def test_adam_determinism():
    a, b = _run_steps(3), _run_steps(3)
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("seed", range(20))
def test_small_step_decreases_loss(seed):
    model, ds = toy_model(seed=seed)
    batch = toy_batch()
    loss_fn = frozen_loss_fn(model, ds, batch)
    with nx.Tape() as tape:
        loss = loss_fn()
    before = float(loss)
    adam_step(TrainState(model), nx.backward(tape, loss, model.parameters()), replace(model.config, lr=1e-4))
    assert float(loss_fn()) < before


def test_no_moe_equals_single_expert_moe():
    full, ds = toy_model("full", num_experts=1, top_k=1)
    plain, _ = toy_model("no_moe")
    for j, m in enumerate(ds.modalities):
        moe = full.adapters[j]
        moe.gate.weight.value[:] = 0.0
        moe.gate.bias.value[:] = 0.0
        moe.experts.weight.value[0] = plain.adapters[j].weight.value
        moe.experts.bias.value[0] = plain.adapters[j].bias.value
    full.user_emb.value[:] = plain.user_emb.value
    full.fusion.affine.weight.value[:] = plain.fusion.affine.weight.value
    full.fusion.affine.bias.value[:] = plain.fusion.affine.bias.value
    batch = toy_batch()
    assert float(total_loss(full, batch, ds)[0]) == pytest.approx(float(total_loss(plain, batch, ds)[0]), rel=1e-12)


def test_config_parsing(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("d = 16\nvariant = no_align\nexpert_bias = false\n# comment\n")
    cfg = ModelConfig.from_file(path)
    assert cfg.d == 16 and cfg.expert_bias is False
    assert cfg.effective().lambda1 == 0.0
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    path.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_file(path)
    with pytest.raises(ConfigError):
        ModelConfig(num_experts=4, top_k=5)


@pytest.fixture(scope="module")
def small_split():
    inter, table = generate_synthetic(60, 120, 8, 1.0, 0.0, 6, seed=1)
    return Dataset.build(inter, table).split(seed=1)


def test_zero_epochs_returns_initialization(small_split):
    cfg = ModelConfig(d=8, epochs=0, seed=2)
    state, logs = train(cfg, small_split)
    init = MamexModel(cfg, small_split.interactions.n_users, small_split.modalities, small_split.dims)
    assert logs == []
    assert all(np.array_equal(v, init.snapshot()[k]) for k, v in state.model.snapshot().items())


def test_no_mmf_logs_uniform_alpha(small_split):
    _, logs = train(ModelConfig(d=8, epochs=3, variant="no_mmf", batch_size=64), small_split)
    assert all(np.array_equal(row["mean_alpha"], [0.5, 0.5]) for row in logs)


def test_best_checkpoint_is_max_over_logs(small_split):
    from mamex.evaluation import evaluate
    state, logs = train(ModelConfig(d=8, epochs=6, batch_size=32, lambda4=1e-4), small_split)
    best = max(row["valid_rec@20"] for row in logs)
    first_best = next(r["epoch"] for r in logs if r["valid_rec@20"] == best)
    assert state.best_epoch == first_best
    assert evaluate(state.model, small_split, "valid").macro["recall@20"] == best


def test_synthetic_training_beats_random():
    inter, table = generate_synthetic(200, 500, 32, 1.0, 0.0, 10, seed=0)
    ds = Dataset.build(inter, table).split(seed=0)
    cfg = ModelConfig(epochs=30, batch_size=64, lambda1=0.01, lambda4=1e-4)
    _, logs = train(cfg, ds)
    n_valid = len(ds.interactions.items_in("valid"))
    assert max(r["valid_rec@10"] for r in logs) > random_recall_baseline(10, n_valid)


def test_checkpoint_round_trip(tmp_path, small_split):
    from mamex.evaluation import evaluate
    state, _ = train(ModelConfig(d=8, epochs=2, batch_size=64), small_split)
    path = tmp_path / "ck.bin"
    save_checkpoint(state, path, "abc")
    loaded = load_checkpoint(path, state.model.config)
    assert loaded.data_hash == "abc"
    for k, v in state.model.snapshot().items():
        assert np.array_equal(v, loaded.model.snapshot()[k])
    assert evaluate(loaded.model, small_split, "test").macro == evaluate(state.model, small_split, "test").macro

    raw = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-100])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "trunc.bin")
    with pytest.raises(CheckpointMismatch, match="num_experts"):
        load_checkpoint(path, replace(state.model.config, num_experts=6))
