import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shira.errors import ParameterError, ShapeError, TrainingError
from shira.masks import Mask, build_random_mask
from shira.model import (
    LoraAdapter,
    TeacherTask,
    ToyModel,
    TrainConfig,
    apply_adapters,
    backward,
    effective_scale,
    evaluate,
    extract_adapters,
    forward,
    fuse_loras,
    init_lora,
    init_model,
    load_loras,
    load_model,
    lora_gradients,
    make_teacher_task,
    mse,
    save_loras,
    save_model,
    train_lora,
    train_shira,
)
from shira.store import SparseAdapter


def finite_difference(model, x, y, name, h=1e-6):
    w = getattr(model, name)
    out = np.zeros_like(w)
    for i in np.ndindex(w.shape):
        plus, minus = w.copy(), w.copy()
        plus[i] += h
        minus[i] -= h
        lp = mse(forward(model.with_weights(**{name: plus}), x), y)
        lm = mse(forward(model.with_weights(**{name: minus}), x), y)
        out[i] = (lp - lm) / (2 * h)
    return out


def small_task(seed=0, n_in=8, n_hidden=16, n_out=4):
    base = init_model(n_in, n_hidden, n_out, seed=seed)
    return base, make_teacher_task(base, 0.02, 1.0, "W1", seed=seed + 1)


def test_model_shapes_and_errors():
    m = init_model(8, 16, 4, seed=0)
    assert m.n_in == 8 and m.n_out == 4 and m.n_params() == 16 * 8 + 16 + 4 * 16 + 4
    assert forward(m, np.zeros((3, 8))).shape == (3, 4)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((3, 7)))
    with pytest.raises(ShapeError):
        ToyModel(np.zeros((4, 3)), np.zeros(4), np.zeros((2, 5)), np.zeros(2))
    with pytest.raises(ParameterError):
        ToyModel(np.zeros((4, 3)), np.zeros(4), np.zeros((2, 4)), np.zeros(2), "relu")
    with pytest.raises(ShapeError):
        backward(m, np.zeros((3, 8)), np.zeros((3, 5)))


def test_zero_model_outputs_zero():
    m = ToyModel(np.zeros((5, 3)), np.zeros(5), np.zeros((2, 5)), np.zeros(2))
    assert not forward(m, np.random.default_rng(0).standard_normal((4, 3))).any()


def test_gradient_zero_at_target():
    m = init_model(8, 16, 4, seed=1)
    x = np.random.default_rng(0).standard_normal((5, 8))
    g = backward(m, x, forward(m, x))
    assert all(not v.any() for v in g.values())


@pytest.mark.parametrize("activation", ["tanh", "identity"])
def test_backward_matches_finite_differences(activation):
    m = init_model(8, 16, 4, seed=2, activation=activation)
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((6, 8)), rng.standard_normal((6, 4))
    g = backward(m, x, y)
    for name in ("W1", "b1", "W2", "b2"):
        np.testing.assert_allclose(g[name], finite_difference(m, x, y, name), atol=1e-5)


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(optimizer="lbfgs")


def test_teacher_task_density_and_support():
    base = init_model(seed=0)
    task = make_teacher_task(base, 0.02, 0.5, "W1", seed=3)
    pert = task.perturbation["W1"]
    assert pert.density <= 0.02
    masks = task.support_masks()
    np.testing.assert_array_equal(masks["W1"].indices(), pert.indices)
    assert masks["W2"].count == 0
    with pytest.raises(ParameterError):
        TeacherTask(base, SparseAdapter("W1", 128, 64, np.arange(200), np.ones(200)))


def test_teacher_task_active_features():
    base = init_model(seed=0)
    task = make_teacher_task(base, 0.02, 0.5, "W1", seed=3, active_features=range(32), leak=0.1)
    cols = task.perturbation["W1"].indices % 64
    assert cols.max() < 32
    assert task.input_scale[40] == 0.1 and task.input_scale[3] == 1.0


def test_zero_mask_freezes_everything():
    base, task = small_task()
    zero = {n: Mask(np.zeros(getattr(base, n).shape, bool)) for n in ("W1", "W2")}
    out, log = train_shira(base, zero, task, TrainConfig(0.1, 20, 16))
    for n in ("W1", "b1", "W2", "b2"):
        assert getattr(out, n).tobytes() == getattr(base, n).tobytes()
    assert len(log.rows) == 20 and all(r["grad_norm_masked"] == 0 for r in log.rows)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_full_mask_equals_unmasked(optimizer):
    base, task = small_task()
    full = {n: Mask(np.ones(getattr(base, n).shape, bool)) for n in ("W1", "W2")}
    cfg = TrainConfig(0.05, 30, 16, optimizer)
    masked, log_m = train_shira(base, full, task, cfg)
    plain, log_p = train_shira(base, None, task, cfg)
    for n in ("W1", "W2"):
        assert getattr(masked, n).tobytes() == getattr(plain, n).tobytes()
    np.testing.assert_array_equal(log_m.losses, log_p.losses)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3), st.sampled_from(["sgd", "adam"]), st.booleans())
def test_frozen_weights_bit_identical(seed, p, optimizer, biases):
    base, task = small_task(seed % 7)
    masks = {n: build_random_mask(*getattr(base, n).shape, p, seed + i) for i, n in enumerate(("W1", "W2"))}
    out, _ = train_shira(base, masks, task, TrainConfig(0.1, 10, 8, optimizer, seed), train_biases=biases)
    changed_params = 0
    for n in ("W1", "W2"):
        before, after = getattr(base, n), getattr(out, n)
        frozen = ~masks[n].bits
        assert after[frozen].tobytes() == before[frozen].tobytes()
        changed_params += int(np.count_nonzero(after != before))
    assert changed_params <= sum(m.count for m in masks.values())
    if not biases:
        assert out.b1.tobytes() == base.b1.tobytes()


def test_training_is_reproducible():
    base, task = small_task()
    masks = task.support_masks()
    cfg = TrainConfig(0.2, 50, 16, "adam", seed=5)
    a, la = train_shira(base, masks, task, cfg)
    b, lb = train_shira(base, masks, task, cfg)
    assert la.losses.tobytes() == lb.losses.tobytes()
    assert a.W1.tobytes() == b.W1.tobytes()


def test_training_reduces_loss_and_extract_fits_mask():
    base = init_model(seed=0)
    task = make_teacher_task(base, 0.02, 0.5, seed=100)
    masks = task.support_masks()
    out, log = train_shira(base, masks, task, TrainConfig(0.5, 300, 64))
    assert evaluate(out, task) < 0.2 * evaluate(base, task)
    adapters = extract_adapters(out, base)
    assert set(adapters) == {"W1"}
    assert adapters["W1"].density <= 0.02
    assert set(adapters["W1"].indices) <= set(masks["W1"].indices())
    restored = apply_adapters(out, adapters, -1.0)
    np.testing.assert_allclose(restored.W1, base.W1, atol=1e-15)


def test_divergence_raises_with_step():
    base, task = small_task()
    with pytest.raises(TrainingError) as exc:
        train_shira(base, None, task, TrainConfig(1e200, 5, 8))
    assert exc.value.step is not None


def test_train_log_csv(tmp_path):
    base, task = small_task()
    _, log = train_shira(base, task.support_masks(), task, TrainConfig(0.1, 5, 8))
    p = tmp_path / "log.csv"
    log.to_csv(p)
    rows = list(csv.DictReader(open(p)))
    assert list(rows[0]) == ["step", "loss", "grad_norm_masked", "grad_norm_total"]
    assert [int(r["step"]) for r in rows] == list(range(5))
    assert float(rows[0]["loss"]) == log.rows[0]["loss"]


# LoRA


def test_effective_scale_examples():
    mk = lambda alpha, r, rule: LoraAdapter("W1", np.zeros((8, r)), np.zeros((r, 8)), alpha, rule)
    assert effective_scale(mk(16, 4, "alpha_over_r")) == 4
    assert effective_scale(mk(16, 4, "alpha_over_sqrt_r")) == 8
    assert effective_scale(mk(123.0, 3, "unit")) == 1
    assert effective_scale(mk(1, 1, "unit")) == effective_scale(mk(1, 1, "alpha_over_r"))
    assert effective_scale(SparseAdapter("W1", 2, 2, [0], [1.0])) == 1.0
    with pytest.raises(ParameterError):
        mk(1, 1, "alpha_squared")
    with pytest.raises(ShapeError):
        LoraAdapter("W1", np.zeros((8, 2)), np.zeros((3, 8)))


def test_init_lora_conventions():
    lora = init_lora("W1", (16, 8), 4, 8.0)
    assert lora.A.shape == (16, 4) and lora.B.shape == (4, 8)
    assert not lora.A.any() and lora.B.any()
    assert not lora.delta().any()
    out = init_lora("W1", (16, 8), 4, init="output_gaussian")
    assert out.A.any() and not out.B.any()
    with pytest.raises(ParameterError):
        init_lora("W1", (16, 8), 9)
    with pytest.raises(ParameterError):
        init_lora("W1", (16, 8), 2, init="orthogonal")


def test_lora_gradients_match_finite_differences():
    base, task = small_task()
    rng = np.random.default_rng(4)
    lora = LoraAdapter("W1", rng.standard_normal((16, 2)), rng.standard_normal((2, 8)), 3.0)
    x, y = task.sample(6, rng)
    _, grads, _ = lora_gradients(base, {"W1": lora}, x, y)
    h = 1e-6
    for factor in ("A", "B"):
        p = getattr(lora, factor)
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            p[i] += h
            lp = mse(forward(fuse_loras(base, [lora]), x), y)
            p[i] -= 2 * h
            lm = mse(forward(fuse_loras(base, [lora]), x), y)
            p[i] += h
            fd[i] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grads[("W1", factor)], fd, atol=1e-5)


def test_lora_saddle_point():
    base, task = small_task()
    lora = init_lora("W1", base.W1.shape, 2, init="zeros")
    x, y = task.sample(8, np.random.default_rng(0))
    _, grads, _ = lora_gradients(base, {"W1": lora}, x, y)
    assert not grads[("W1", "A")].any() and not grads[("W1", "B")].any()


def test_train_lora_freezes_base_and_learns():
    base, task = small_task()
    snapshot = base.copy()
    zero, _ = train_lora(base, ["W1"], 2, 4.0, "alpha_over_r", TrainConfig(0.1, 0, 8), task)
    assert not zero["W1"].delta().any()
    loras, log = train_lora(base, ["W1"], 2, 4.0, "alpha_over_r", TrainConfig(0.2, 200, 32), task)
    assert base.W1.tobytes() == snapshot.W1.tobytes()
    assert log.losses[-20:].mean() < log.losses[:20].mean()
    assert evaluate(fuse_loras(base, loras), task) < evaluate(base, task)
    with pytest.raises(ParameterError):
        train_lora(base, ["b1"], 2, 4.0, "alpha_over_r", TrainConfig(0.1, 1, 8), task)


def test_model_and_lora_files(tmp_path):
    m = init_model(seed=3)
    save_model(m, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    for n in ("W1", "b1", "W2", "b2"):
        assert getattr(back, n).tobytes() == getattr(m, n).tobytes()
    save_model(back, tmp_path / "m2.npz")
    assert (tmp_path / "m.npz").read_bytes() == (tmp_path / "m2.npz").read_bytes()
    lora = init_lora("W2", m.W2.shape, 3, 6.0, "alpha_over_sqrt_r", init="output_gaussian", seed=1)
    save_loras({"W2": lora}, tmp_path / "l.npz")
    lb = load_loras(tmp_path / "l.npz")["W2"]
    assert lb.alpha == 6.0 and lb.scaling_rule == "alpha_over_sqrt_r"
    np.testing.assert_array_equal(lb.A, lora.A)
