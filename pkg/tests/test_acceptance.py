"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from shira.bench import bench, trend_ok
from shira.errors import FormatError
from shira.lemmas import random_sparse_adapter
from shira.masks import Mask, build_grad_mask, build_random_mask, build_snip_mask, collect_gradients, density_to_k
from shira.model import (
    TrainConfig,
    evaluate,
    extract_adapters,
    fuse_loras,
    init_model,
    make_teacher_task,
    train_lora,
    train_shira,
)
from shira.ortho import (
    AdapterStyle,
    null_space_partner,
    pooled_std,
    simulate_fig4,
    simulate_wm_overlap,
    verify_null_space,
    verify_struct_orthogonality,
)
from shira.rank import lora_approximation_of_shira, param_complexity
from shira.store import SparseAdapter, apply, dumps, empty_adapter, fuse_multi, load_all, loads_all, save

SEEDS = range(10)
TRAIN = dict(learning_rate=0.5, steps=2000)
K = density_to_k(128, 64, 0.02)

# every adapter and every (base, trained, masks) triple produced below is
# re-checked by the parameter-count and mask-integrity criteria
SUITE_ADAPTERS = []
SUITE_RUNS = []


def tracked_train(base, masks, task, config):
    trained, log = train_shira(base, masks, task, config)
    SUITE_RUNS.append((base, trained, masks))
    adapters = extract_adapters(trained, base)
    SUITE_ADAPTERS.extend(adapters.values())
    return trained, adapters


def frozen_identical(base, trained, masks):
    for name in ("W1", "W2"):
        before, after = getattr(base, name), getattr(trained, name)
        frozen = ~masks[name].bits if name in masks else np.ones(before.shape, bool)
        if after[frozen].tobytes() != before[frozen].tobytes():
            return False
    return all(getattr(base, b).tobytes() == getattr(trained, b).tobytes() for b in ("b1", "b2"))


def test_criterion_01_eckart_young(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_rel, worst_abs, checks = 0.0, 0.0, 0
    for i in range(100):
        n, m = int(rng.integers(8, 65)), int(rng.integers(8, 65))
        a = random_sparse_adapter(rng, n, m, rng.uniform(0.01, 0.10), f"s{i}")
        dense = np.zeros((n, m))
        dense.ravel()[a.indices] = a.values
        sigma = np.linalg.svd(dense, compute_uv=False)  # independent reference
        for r in sorted({1, 2, min(n, m) // 2}):
            fit = lora_approximation_of_shira(a, r)
            spec, frob2 = sigma[r], float(sigma[r:] @ sigma[r:])
            checks += 1
            if spec <= 1e-10 * sigma[0]:
                # already rank <= r: both errors vanish
                worst_abs = max(worst_abs, fit.spectral_error, fit.frobenius_error)
            else:
                worst_rel = max(
                    worst_rel,
                    abs(fit.spectral_error - spec) / spec,
                    abs(fit.frobenius_error**2 - frob2) / frob2,
                )
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= 1e-6 and worst_abs <= 1e-8 and elapsed < 10
    criterion(1, ok, f"{checks} fits, max rel err {worst_rel:.2e}, max abs (rank<=r) {worst_abs:.2e}, {elapsed:.1f}s")


def test_criterion_02_struct_product(criterion):
    t0 = time.perf_counter()
    worst, bound_ok, n = 0.0, True, 0
    for m in (64, 512, 4096):
        f = AdapterStyle("shira_struct", 0.99).struct_frequency() if m > 100 else 8
        for seed in range(50):
            o1 = seed % f
            o2 = (o1 + 1 + seed % (f - 1)) % f
            c = verify_struct_orthogonality(f, (o1, o2), m, seed=seed)
            worst = max(worst, c.product_error)
            bound_ok = bound_ok and c.bound_ok and c.awor >= c.awor_bound
            n += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and bound_ok and elapsed < 60
    criterion(2, ok, f"{n} pairs, max |A1'A2 - (I+S2+S1')| {worst:.1e}, support bound held={bound_ok}, {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_03_style_ordering(criterion):
    t0 = time.perf_counter()
    rep = simulate_fig4([4096], trials=50, seed=0)
    elapsed = time.perf_counter() - t0
    mean = {s: rep.get(4096, s).awor_mean for s in ("shira_struct", "shira_wm", "sparse_lora", "dense")}
    ordered = mean["shira_struct"] > mean["shira_wm"] > mean["sparse_lora"] > mean["dense"]
    ok = ordered and mean["dense"] < 0.01 and mean["shira_struct"] > 0.95 and elapsed < 300
    detail = ", ".join(f"{k}={v:.5f}" for k, v in mean.items())
    criterion(3, ok, f"AWOR at 4096: {detail}, {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_04_wm_overlap_coincidence(criterion):
    rep = simulate_wm_overlap([256, 1024, 4096], trials=50, seed=0)
    parts, ok = [], True
    for d in (256, 1024, 4096):
        a, b = rep.get(d, "shira_wm", "overlap"), rep.get(d, "shira_wm", "non_overlap")
        sd_awor, sd_awom = pooled_std(a, b)
        z_awor = abs(a.awor_mean - b.awor_mean) / sd_awor
        z_awom = abs(a.awom_mean - b.awom_mean) / sd_awom
        ok = ok and z_awor <= 1 and z_awom <= 1
        parts.append(f"{d}: AWOR {z_awor:.2f} sd, AWOM {z_awom:.2f} sd")
    criterion(4, ok, "overlap vs non-overlap gap in pooled sd; " + "; ".join(parts))


def test_criterion_05_null_space(criterion):
    rng = np.random.default_rng(5)
    worst, gap = 0.0, math.inf
    for seed in range(50):
        n, m = int(rng.integers(16, 65)), int(rng.integers(2, 9))
        s1 = rng.standard_normal((n, m))
        worst = max(worst, verify_null_space(s1, null_space_partner(s1, seed=seed)).residual)
        gap = min(gap, verify_null_space(s1, rng.standard_normal((n, m))).residual)
    criterion(5, worst <= 1e-10 and gap > 1e-3, f"max null residual {worst:.1e}, min non-null residual {gap:.2e}")


def test_criterion_07_alpha_semantics(criterion):
    rng = np.random.default_rng(7)
    ok = True
    for i in range(50):
        rows, cols = int(rng.integers(1, 64)), int(rng.integers(1, 64))
        w = rng.standard_normal((rows, cols))
        a = random_sparse_adapter(rng, rows, cols, rng.uniform(0.0, 0.3), f"a{i}")
        ok &= apply(w, a, 0.0).tobytes() == w.tobytes()
        # exact restore needs W + S to be exact; f32-grid data on both sides makes it so
        w32 = w.astype(np.float32).astype(np.float64)
        ok &= apply(apply(w32, a, 1.0), a, -1.0).tobytes() == w32.tobytes()
        for alpha in (0.5, 2.0, -0.25, 3.0):
            out = apply(w32, a, alpha).ravel()
            ok &= np.array_equal(out[a.indices], w32.ravel()[a.indices] + alpha * a.values)
            untouched = np.setdiff1d(np.arange(w.size), a.indices)
            ok &= out[untouched].tobytes() == w32.ravel()[untouched].tobytes()
    criterion(7, bool(ok), "alpha=0 bit-identical, alpha-linear at touched entries, +1/-1 restores base (50 adapters)")


def test_criterion_08_serialization(criterion, tmp_path):
    rng = np.random.default_rng(8)
    adapters = [empty_adapter("empty", 7, 9)]
    full = rng.standard_normal(30).astype(np.float32).astype(np.float64)
    full[full == 0] = 1.0
    adapters.append(SparseAdapter("full", 5, 6, np.arange(30), full))
    while len(adapters) < 100:
        i = len(adapters)
        adapters.append(random_sparse_adapter(rng, int(rng.integers(1, 80)), int(rng.integers(1, 80)), rng.uniform(0, 0.5), f"t{i}"))
    SUITE_ADAPTERS.extend(adapters)
    path = tmp_path / "all.shra"
    save(adapters, path)
    back = load_all(path)
    roundtrip = all(
        a.name == b.name and a.shape == b.shape and a.indices.tobytes() == b.indices.tobytes()
        and a.values.tobytes() == b.values.tobytes()
        for a, b in zip(adapters, back)
    ) and len(back) == 100
    roundtrip &= dumps(back) == path.read_bytes()
    raw = path.read_bytes()
    bad = tmp_path / "bad.shra"
    bad.write_bytes(b"XHRA" + raw[4:])
    fields = []
    try:
        load_all(bad)
    except FormatError as exc:
        fields.append(exc.field)
    for cut in (3, 9, 40, len(raw) - 1):
        bad.write_bytes(raw[:cut])
        try:
            load_all(bad)
        except FormatError as exc:
            fields.append(exc.field)
    rejected = len(fields) == 5 and fields[0] == "magic" and "magic" not in fields[1:]
    ok = roundtrip and rejected
    criterion(8, ok, f"100 adapters (incl. nnz=0 and full density) round-trip={roundtrip}, corrupt files rejected as {fields}")


def test_criterion_10_switch_benchmark(criterion):
    t0 = time.perf_counter()
    rep = bench(dims=(256, 512, 1024, 2048, 4096), density=0.01, rank=64, repeats=50, seed=0)
    elapsed = time.perf_counter() - t0
    s = rep.speedups
    ok = s[-1] >= 3 and trend_ok(s, allowed_inversions=1) and elapsed < 300
    criterion(10, ok, f"speedups {s} (pinned={rep.pinned}), {elapsed:.0f}s")


def test_criterion_11_teacher_recovery(criterion):
    oracle, wins = [], {"grad": 0, "snip": 0}
    for seed in SEEDS:
        base = init_model(seed=seed)
        task = make_teacher_task(base, 0.02, 0.5, seed=100 + seed)
        cfg = TrainConfig(seed=seed, **TRAIN)
        trained, _ = tracked_train(base, task.support_masks(), task, cfg)
        oracle.append(evaluate(trained, task))
        rng = np.random.default_rng(500 + seed)
        grads = collect_gradients(base, [task.sample(256, rng) for _ in range(4)])["W1"]
        masks = {
            "grad": build_grad_mask(grads, K),
            "snip": build_snip_mask(base.W1, grads, K),
            "rand": Mask.from_indices(128, 64, np.sort(np.random.default_rng(seed).choice(128 * 64, K, replace=False))),
        }
        mse = {name: evaluate(tracked_train(base, {"W1": m}, task, cfg)[0], task) for name, m in masks.items()}
        for name in wins:
            wins[name] += mse[name] < mse["rand"]
    ok = max(oracle) <= 1e-3 and all(w >= 8 for w in wins.values())
    criterion(11, ok, f"oracle max held-out MSE {max(oracle):.2e}; beats random: grad {wins['grad']}/10, snip {wins['snip']}/10")


def test_criterion_12_multi_adapter_fusion(criterion):
    lora_worse, shira_ok, worst_shira = 0, True, 0.0
    for seed in SEEDS:
        base = init_model(seed=seed)
        t1 = make_teacher_task(base, 0.02, 0.5, seed=200 + seed, active_features=np.arange(32), leak=0.1)
        t2 = make_teacher_task(base, 0.02, 0.5, seed=300 + seed, active_features=np.arange(32, 64), leak=0.1)
        rng = np.random.default_rng(seed)
        g1 = collect_gradients(base, [t1.sample(256, rng) for _ in range(4)])["W1"]
        g2 = collect_gradients(base, [t2.sample(256, rng) for _ in range(4)])["W1"]
        m1 = build_grad_mask(g1, K)
        m2 = build_grad_mask(g2, K, exclude=set(m1.indices().tolist()))
        cfg = TrainConfig(seed=seed, **TRAIN)
        s1, a1 = tracked_train(base, {"W1": m1}, t1, cfg)
        s2, a2 = tracked_train(base, {"W1": m2}, t2, cfg)
        fused_w, report = fuse_multi(base.W1, [(a1["W1"], 1.0), (a2["W1"], 1.0)])
        assert report.total_overlap == 0
        fused = base.with_weights(W1=fused_w)
        shira_deg = [evaluate(fused, t1) / evaluate(s1, t1), evaluate(fused, t2) / evaluate(s2, t2)]
        shira_ok &= max(shira_deg) <= 2.0
        worst_shira = max(worst_shira, *shira_deg)

        l1, _ = train_lora(base, ["W1"], 4, 8.0, "alpha_over_r", cfg, t1)
        l2, _ = train_lora(base, ["W1"], 4, 8.0, "alpha_over_r", cfg, t2)
        lf = fuse_loras(base, [l1["W1"], l2["W1"]])
        lora_deg = [evaluate(lf, t1) / evaluate(fuse_loras(base, l1), t1), evaluate(lf, t2) / evaluate(fuse_loras(base, l2), t2)]
        lora_worse += np.mean(lora_deg) > np.mean(shira_deg)
    ok = shira_ok and lora_worse >= 8
    criterion(12, ok, f"SHiRA worst fused/single MSE ratio {worst_shira:.3f}; LoRA degrades more on {lora_worse}/10 seeds")


def test_criterion_13_fuse_contrast(criterion):
    rng = np.random.default_rng(13)
    w = rng.standard_normal((256, 256))
    a, b = rng.standard_normal((256, 1)), rng.standard_normal((1, 256))
    lora_changed = np.count_nonzero(w + a @ b != w) / w.size
    s = random_sparse_adapter(rng, 256, 256, 0.0199)
    shira_changed = np.count_nonzero(apply(w, s) != w)
    ok = lora_changed >= 0.99 and shira_changed == s.nnz and s.nnz <= 0.02 * w.size
    criterion(13, ok, f"rank-1 LoRA fuse changes {lora_changed:.2%}; SHiRA apply changes {shira_changed} = nnz ({s.nnz / w.size:.2%})")


# these two read what the criteria above produced, so they run last


def test_criterion_06_mask_integrity(criterion):
    extra_seeds = range(20)
    for seed in extra_seeds:
        base = init_model(seed=seed)
        task = make_teacher_task(base, 0.02, 0.5, seed=700 + seed)
        masks = {"W1": build_random_mask(128, 64, 0.02, seed), "W2": build_random_mask(32, 128, 0.02, seed + 1)}
        opt = "adam" if seed % 2 else "sgd"
        tracked_train(base, masks, task, TrainConfig(learning_rate=0.01 if opt == "adam" else 0.5, steps=200, optimizer=opt, seed=seed))
    bad = sum(not frozen_identical(*run) for run in SUITE_RUNS)
    criterion(6, bad == 0 and len(SUITE_RUNS) >= 20, f"{len(SUITE_RUNS)} training runs, {bad} with a changed frozen weight")


def test_criterion_09_param_count(criterion):
    bad = 0
    for a in SUITE_ADAPTERS:
        stored = loads_all(dumps([a]))[0]
        dense = np.zeros(a.rows * a.cols)
        dense[a.indices] = a.values
        bad += not (param_complexity(a) == stored.nnz == np.count_nonzero(dense))
    criterion(9, bad == 0 and len(SUITE_ADAPTERS) >= 100, f"{len(SUITE_ADAPTERS)} adapters, {bad} with count != nonzeros")
