"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The two training criteria share one session-scoped run and take roughly
40 minutes on one CPU core.
"""
import time

import numpy as np
import pytest

from flowup import fileio
from flowup.attention import na_aggregate, na_maps
from flowup.checkpoint import save_checkpoint
from flowup.convex import LocalAttentionMaps, convex_aggregate, masks_from_logits
from flowup.evaluation import bucket_report, edge_epe
from flowup.gradcheck import DEFAULT_TOL, run_suite
from flowup.hull import representability_map
from flowup.pipeline import FlowModel
from flowup.synthesis import gen_sample
from flowup.tcu import TCU, UpsamplerConfig
from flowup.tensor import Tensor, no_grad
from flowup.training import TrainConfig, continue_without_interpolation, predict, train
from flowup.windows import window_index

TRAIN_SCENES = 200
VAL_SCENES = 32
TRAIN_STEPS = 2000
SIZE = 96


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def window_bounds(field, m, policy):
    """Per low-res position: channel min and max over its m x m source window."""
    rows, pad = window_index(field.shape[1], m, policy)
    cols, _ = window_index(field.shape[2], m, policy)
    src = np.pad(field, ((0, 0), (pad, pad), (pad, pad))) if pad else field
    win = src[:, rows[:, None, :, None], cols[None, :, None, :]]
    return win.min(axis=(3, 4)), win.max(axis=(3, 4))


def within(out, lo, hi, f):
    lo, hi = lo.repeat(f, axis=1).repeat(f, axis=2), hi.repeat(f, axis=1).repeat(f, axis=2)
    return bool(np.all(out >= lo - 1e-5) and np.all(out <= hi + 1e-5))


# 1 ------------------------------------------------------------------------------

def test_convexity_invariant_suite(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    failures, cases = [], 0
    with no_grad():
        for _ in range(100):
            h, w = rng.integers(4, 13, size=2)
            logits = Tensor(rng.standard_normal((64 * 9, h, w)) * 4, dtype=np.float64)
            lam = masks_from_logits(logits, 8, 3, "zero")
            flow = rng.standard_normal((2, h, w)) * 8
            out = convex_aggregate(lam, Tensor(flow, dtype=np.float64)).data
            const = convex_aggregate(lam, Tensor(np.full((2, h, w), 2.5), dtype=np.float64)).data
            lo, hi = window_bounds(flow, 3, "zero")
            # zero padding contributes 0 to border windows, so the constant check uses interior blocks
            ok = within(out, lo, hi, 8) and np.allclose(const[:, 8:-8, 8:-8], 2.5, atol=1e-5, rtol=0)
            cases += 1
            if not ok:
                failures.append("baseline")
        model = TCU(UpsamplerConfig(), np.random.default_rng(7))
        feat_dims = [model.cfg.hidden_dim] + [d // 2 for d in model.cfg.dims[:-1]]
        for j, step in enumerate(model.steps):
            m = step.m
            for _ in range(100):
                h, w = rng.integers(m, m + 6, size=2)
                feat = Tensor(rng.standard_normal((feat_dims[j], h, w)) * 3)
                img = Tensor(rng.standard_normal((model.cfg.image_channels[j], h, w)) * 3)
                flow = (rng.standard_normal((2, h, w)) * 8).astype(np.float32)
                out = step(Tensor(flow), feat, img)[0].data
                const_in = np.stack([np.full((h, w), 1.0), np.full((h, w), -4.0)]).astype(np.float32)
                const = step(Tensor(const_in), feat, img)[0].data
                lo, hi = window_bounds(flow, m, "clamp")
                ok = within(out, lo, hi, 2) and np.allclose(const[0], 1.0, atol=1e-5, rtol=0) \
                    and np.allclose(const[1], -4.0, atol=1e-5, rtol=0)
                cases += 1
                if not ok:
                    failures.append(f"tcu m={m}")
    dt = time.perf_counter() - t0
    verdict("convexity invariant suite", not failures and dt < 30,
            f"{cases} cases, {len(failures)} violations, {dt:.1f}s (limit 30s)")


# 2 ------------------------------------------------------------------------------

def test_equivalence_oracle(verdict):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        m, f, h, w = int(rng.choice([3, 5, 7, 9])), 2, 16, 16
        q = Tensor(rng.standard_normal((f * f, 8, h, w)), dtype=np.float64)
        k = Tensor(rng.standard_normal((f * f, 8, h, w)), dtype=np.float64)
        lam = na_maps(m, q, k, f=f)
        flow = rng.standard_normal((2, h, w)) * 5
        ours = na_aggregate(lam, Tensor(flow[None], dtype=np.float64)).data
        ref = convex_aggregate(LocalAttentionMaps(lam.weights, f, m, "zero"), Tensor(flow, dtype=np.float64)).data
        r = m // 2
        for i in range(f * f):
            sub = ref[:, i // f :: f, i % f :: f]
            worst = max(worst, float(np.abs(ours[i][:, r : h - r, r : w - r] - sub[:, r : h - r, r : w - r]).max()))
    dt = time.perf_counter() - t0
    verdict("equivalence oracle", worst <= 1e-6 and dt < 10,
            f"50 cases, max interior diff {worst:.2e} (tol 1e-6), {dt:.1f}s (limit 10s)")


# 3 ------------------------------------------------------------------------------

def test_gradient_checks(verdict):
    t0 = time.perf_counter()
    results = run_suite()
    dt = time.perf_counter() - t0
    bad = [r.name for r in results if not r.passed(DEFAULT_TOL)]
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    modules = {"tcu_reduced", "context_encoder"} <= names
    verdict("gradient checks", not bad and modules and dt < 300,
            f"{len(results)} checks, failing {bad or 'none'}, worst {worst.name} {worst.max_rel_error:.2e} "
            f"(tol {DEFAULT_TOL:g}), {dt:.1f}s (limit 300s)")


# 4 ------------------------------------------------------------------------------

def test_hull_monotonicity(verdict):
    t0 = time.perf_counter()
    violations, multi, per_scene_strict = 0, 0, 0
    pooled = {3: 0, 9: 0}
    n_pix = 0
    for seed in range(200):
        k = int(np.random.default_rng([seed, 99]).integers(1, 7))
        flow = gen_sample(seed, SIZE, SIZE, k).flow
        maps = {m: representability_map(flow, 8, m) for m in (3, 5, 7, 9)}
        fr = {m: maps[m].mean() for m in maps}
        violations += not (fr[9] >= fr[7] >= fr[5] >= fr[3])
        if len(np.unique(flow.reshape(2, -1), axis=1).T) >= 2:
            multi += 1
            per_scene_strict += fr[9] > fr[3]
            pooled[3] += int(maps[3].sum())
            pooled[9] += int(maps[9].sum())
            n_pix += maps[3].size
    dt = time.perf_counter() - t0
    f3, f9 = pooled[3] / n_pix, pooled[9] / n_pix
    verdict("hull monotonicity", violations == 0 and f9 > f3 and dt < 120,
            f"{violations} ordering violations over 200 scenes; pooled over {multi} multi-motion scenes "
            f"f(3)={f3:.4f} f(9)={f9:.4f} (strict per scene on {per_scene_strict}/{multi}), {dt:.1f}s (limit 120s)")


# 5 and 6: one shared training run ------------------------------------------------

def _scenes(seeds):
    out = []
    for s in seeds:
        k = int(np.random.default_rng([s, 99]).integers(2, 9))
        g = gen_sample(s, SIZE, SIZE, k)
        out.append((g.image, g.flow))
    return out


def _cfg(mode):
    return TrainConfig(iterations=TRAIN_STEPS, batch_size=1, mode=mode, eval_every=200, max_val=8, seed=0)


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    train_set = _scenes(range(TRAIN_SCENES))
    val_set = _scenes(range(10_000, 10_000 + VAL_SCENES))
    gts = [f for _, f in val_set]
    runs = {}
    for mode in ("dc-tcu", "shared"):
        t0 = time.perf_counter()
        result = train(_cfg(mode), train_set, val=val_set)
        preds = predict(result.model, val_set)
        runs[mode] = dict(result=result, preds=preds, report=bucket_report(preds, gts),
                          seconds=time.perf_counter() - t0)
    ckpt = tmp_path_factory.mktemp("acceptance") / "dc-tcu.ckpt"
    save_checkpoint(ckpt, runs["dc-tcu"]["result"].model, {"train": _cfg("dc-tcu").to_dict()})
    return dict(runs=runs, train=train_set, val=val_set, gts=gts, ckpt=ckpt)


@pytest.mark.slow
def test_toy_training_direction(toy_runs, verdict):
    tcu, base = toy_runs["runs"]["dc-tcu"], toy_runs["runs"]["shared"]
    hi_t, hi_b = tcu["report"].high_detail_epe(4), base["report"].high_detail_epe(4)
    g_t, g_b = tcu["report"].global_epe, base["report"].global_epe
    minutes = (tcu["seconds"] + base["seconds"]) / 60
    ok = hi_t < hi_b and g_t <= 1.02 * g_b and minutes < 45
    verdict("toy training direction", ok,
            f"bucket>=4 EPE dc-tcu {hi_t:.4f} vs shared {hi_b:.4f}; global EPE {g_t:.4f} vs {g_b:.4f} "
            f"(limit {1.02 * g_b:.4f}); {minutes:.1f} min (limit 45)")


@pytest.mark.slow
def test_noaug_direction(toy_runs, verdict):
    val, gts = toy_runs["val"], toy_runs["gts"]
    before = edge_epe(toy_runs["runs"]["dc-tcu"]["preds"], gts)
    t0 = time.perf_counter()
    cont = continue_without_interpolation(toy_runs["ckpt"], _cfg("dc-tcu"), toy_runs["train"], val=val)
    after = edge_epe(predict(cont.model, val), gts)
    minutes = (time.perf_counter() - t0) / 60
    ok = after < before and cont.resize_calls == 0 and minutes < 20
    verdict("-AUG direction", ok,
            f"edge-pixel EPE {before:.4f} -> {after:.4f} after {len(cont.losses)} steps without resizing "
            f"(resize calls {cont.resize_calls}); {minutes:.1f} min (limit 20)")


# 7 ------------------------------------------------------------------------------

def test_report_consistency(verdict):
    rng = np.random.default_rng(5)
    gts = [gen_sample(100 + i, 64, 64, int(rng.integers(0, 7))).flow for i in range(20)]
    preds = [g + rng.standard_normal(g.shape).astype(np.float32) * rng.uniform(0.1, 3) for g in gts]
    problems = []
    for label, r in [("pooled", bucket_report(preds, gts))] + \
                    [(f"pair {i}", bucket_report(p, g)) for i, (p, g) in enumerate(zip(preds, gts))]:
        if abs(r.percentage.sum() - 100) > 0.1:
            problems.append(f"{label}: percentages")
        for seq in (r.reverse_cumulative_percentage, r.reverse_cumulative_contribution):
            if abs(seq[0] - 100) > 1e-9 or np.any(np.diff(seq) > 1e-12):
                problems.append(f"{label}: reverse cumulative")
        if abs(np.nansum(r.counts * r.mean_epe) / r.counts.sum() - r.global_epe) > 1e-6:
            problems.append(f"{label}: decomposition")
    verdict("report consistency", not problems, f"21 reports checked, problems: {problems or 'none'}")


# 8 ------------------------------------------------------------------------------

def test_flo_roundtrip(tmp_path, verdict):
    rng = np.random.default_rng(8)
    mismatches = 0
    for i in range(100):
        h, w = rng.integers(1, 40, size=2)
        flow = (rng.standard_normal((2, h, w)) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        fileio.flo_write(tmp_path / f"{i}.flo", flow)
        mismatches += fileio.flo_read(tmp_path / f"{i}.flo").tobytes() != flow.tobytes()
    fileio.flo_write(tmp_path / "one.flo", np.array([[[0.5]], [[-0.25]]], dtype=np.float32))
    raw = (tmp_path / "one.flo").read_bytes()
    # "PIEH" is 202021.25 as little-endian float32
    hand = bytes.fromhex("50 49 45 48 01 00 00 00 01 00 00 00 00 00 00 3f 00 00 80 be".replace(" ", ""))
    verdict(".flo round-trip", mismatches == 0 and raw == hand,
            f"100 random fields, {mismatches} mismatches; 1x1 file {len(raw)} bytes, hand-assembled match {raw == hand}")


# 9 ------------------------------------------------------------------------------

def test_shape_and_decoupling_contracts(verdict):
    model = FlowModel("dc-tcu", UpsamplerConfig(), seed=0)
    rng = np.random.default_rng(9)
    shapes = {}
    with no_grad():
        for size in (64, 96, 128):
            out = model.forward(rng.random((3, size, size)).astype(np.float32),
                                rng.standard_normal((2, size // 8, size // 8)).astype(np.float32))
            shapes[size] = out.shape
    shapes_ok = all(shapes[s] == (2, s, s) for s in shapes)
    sample = gen_sample(1, 64, 64, 3)
    outs = model.forward_all(sample.image, sample.flow, seed=0)
    early = outs[0].sum() + outs[1].sum() + outs[2].sum()
    early.backward()
    leaked = [n for n, p in model.last_upsampler.named_parameters() if p.grad is not None and np.any(p.grad)]
    shared_used = any(p.grad is not None and np.any(p.grad) for p in model.shared.parameters())
    verdict("shape/decoupling contracts", shapes_ok and not leaked and shared_used,
            f"output shapes {shapes}; last-upsampler tensors with nonzero early-loss grad: {len(leaked)}")
