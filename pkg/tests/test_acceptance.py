"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed at the end of the module.
Criterion 8 trains 15 models on the default synthetic config and dominates
the runtime (several minutes on one core).
"""

import json
import time
import zlib

import numpy as np
import pytest

from aread.augment import AugConfig, build_augmented, check_augmented, compute_popularity
from aread.autodiff import ParameterStore, Tensor
from aread.cli import main
from aread.data import compute_stats
from aread.hei import HEI, HEIConfig, HierMask, active_set, density, loss_masked, read_masks, repair
from aread.hemp import HEMPConfig, Trainer, TrainConfig, init_candidate, prune_count, prune_step
from aread.metrics import auc, overlap_ratio
from aread.model import AREADModel, ModelConfig
from aread.runner import RunConfig, run
from aread.synth import SynthConfig, generate

from conftest import check_grads, numeric_grad, rel_err
from test_autodiff import PRIMITIVES

SEEDS = range(5)
_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {msg}" for k, (ok, msg) in sorted(_results.items())]
    if tr is not None:
        tr.write_line("")
        for ln in lines:
            tr.write_line(ln)
    else:
        print("\n".join(lines))


def record(k: int, ok: bool, msg: str) -> None:
    _results[k] = (bool(ok), msg)
    assert ok, msg


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    return sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (len(pos) * len(neg))


def test_criterion_01_gradients():
    start = time.time()
    worst = {}
    for name, (build, shapes) in PRIMITIVES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        w = 0.0
        for _ in range(100):
            r, m, n = rng.integers(1, 9, size=3)
            w = max(w, check_grads(build, [rng.standard_normal(s) for s in shapes(r, m, n)]))
        worst[name] = w

    cfg = HEIConfig((2, 2, 3), ((3,), (3,), (2,)))
    rng = np.random.default_rng(2024)
    w = 0.0
    for t in range(100):
        store = ParameterStore()
        h = HEI(store, cfg, 4, np.random.default_rng(t))
        for _, p in store.items():
            p.value[...] = rng.normal(scale=0.6, size=p.shape)
        mask = repair(HierMask([rng.random(s) < 0.6 for s in cfg.mask_shapes()]))[0]
        x = rng.standard_normal((3, 4))
        y = rng.integers(0, 2, 3)

        def f(_):
            return float(loss_masked(list(h.forward(Tensor(x), mask).values()), y).value[0, 0])

        store.zero_grad()
        loss_masked(list(h.forward(Tensor(x), mask).values()), y).backward()
        names = store.names()
        analytic = [store[k].grad.copy() for k in names]
        numeric = numeric_grad(f, [store[k].value for k in names])
        w = max(w, max(rel_err(a, b) for a, b in zip(analytic, numeric)))
    worst["masked 3-layer HEI"] = w
    elapsed = time.time() - start
    top = max(worst.values())
    record(1, top < 1e-4 and elapsed < 60, f"max rel err {top:.2e} over {len(worst)} checks, {elapsed:.1f}s")


def test_criterion_02_all_ones_equivalence():
    cfg = HEIConfig()
    rng = np.random.default_rng(7)
    worst = 0.0
    for t in range(100):
        store = ParameterStore()
        h = HEI(store, cfg, 32, np.random.default_rng(t))
        for _, p in store.items():
            p.value[...] = rng.normal(scale=0.3, size=p.shape)
        x = Tensor(rng.standard_normal((int(rng.integers(1, 9)), 32)))
        a, b = h.forward(x), h.forward(x, HierMask.ones(cfg))
        worst = max(worst, max(float(np.abs(a[j].value - b[j].value).max()) for j in a))
    record(2, worst <= 1e-9, f"max |masked - unmasked| = {worst:.2e}")


def test_criterion_03_lottery_reset():
    ds = generate(SynthConfig(seed=0))
    rc = RunConfig()
    model = AREADModel(ds.schema.vocab_sizes, ds.num_domains, rc.model_config(), np.random.default_rng(0))
    stats = compute_stats(ds)
    aug = build_augmented(ds, stats, compute_popularity(ds), AugConfig(seed=0))
    t = Trainer(model, ds, None, aug, TrainConfig(batch_size=256), HEMPConfig(warmup_batches=20), 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t.train_batch(rng.choice(len(ds), 256, replace=False))
    ok, notes = True, []
    for _ in range(2):
        snap = model.store.snapshot()
        rec = t.update_masks()
        same = all(v.value.tobytes() == snap.values[k].tobytes() for k, v in model.store.items())
        moments = all(
            model.store.m[k].tobytes() == snap.m[k].tobytes() and model.store.v[k].tobytes() == snap.v[k].tobytes()
            for k in snap.values
        )
        n_cands = sum(1 for _ in rec["domains"]) * t.hemp.z
        ok &= same and moments and model.store.step_count == snap.step_count
        ok &= rec["restored"] and rec["candidate_start_hashes"] == [rec["snapshot_hash"]]
        notes.append(f"round {rec['round']}: {n_cands} candidates, 1 start hash, restored={rec['restored']}")
        t.train_batch(rng.choice(len(ds), 256, replace=False))
    record(3, ok, "; ".join(notes))


def test_criterion_04_pruning_schedule():
    cfg = HEIConfig()
    rng = np.random.default_rng(4)
    # layer-2 gates dominate so every step removes exactly the requested count
    means = [0.5 + 0.5 * rng.random((3, 6)), 0.5 * rng.random((6, 12))]
    vals = np.concatenate([m.ravel() for m in means])
    mask = init_candidate(means, HEMPConfig(flip_prob=0.0), rng)
    flat = mask.flat()
    first, prev, ok = None, density(mask), density(mask) == 0.7
    for t in range(1, 30):
        if first is not None:
            break
        kept = sorted((vals[i], i) for i in np.flatnonzero(flat))
        for _, i in kept[: prune_count(len(kept), 0.05)]:
            flat[i] = False
        mask, _ = prune_step(mask, means, 0.05)
        ok &= np.array_equal(mask.flat(), flat) and density(mask) <= prev and bool(active_set(mask))
        prev = density(mask)
        if first is None and prev <= 0.4:
            first = t
    # random gate statistics with connectivity repair in play
    for s in range(50):
        r = np.random.default_rng(s)
        m_ = [r.random(sh) for sh in cfg.mask_shapes()]
        mk = init_candidate(m_, HEMPConfig(), r)
        p = density(mk)
        for _ in range(40):
            mk, _ = prune_step(mk, m_, 0.05)
            ok &= density(mk) <= p and bool(active_set(mk))
            p = density(mk)
    record(4, ok and first == 11, f"first density <= 0.40 at iteration {first}; monotone and K nonempty: {ok}")


def test_criterion_05_overlap_statistics():
    shapes = HEIConfig().mask_shapes()
    rng = np.random.default_rng(5)
    m = HierMask.from_flat(rng.random(90) < 0.4, shapes)
    a = np.zeros(90, dtype=bool)
    a[:45] = True
    exact = overlap_ratio(m, m) == 1.0 and overlap_ratio(HierMask.from_flat(a, shapes), HierMask.from_flat(~a, shapes)) == 0.0
    ors = [
        overlap_ratio(HierMask.from_flat(rng.random(90) < 0.4, shapes), HierMask.from_flat(rng.random(90) < 0.4, shapes))
        for _ in range(1000)
    ]
    mean = float(np.mean(ors))
    record(5, exact and abs(mean - 0.25) <= 0.02, f"identity/disjoint exact: {exact}; random mean OR {mean:.4f}")


def test_criterion_06_auc_oracle():
    ok = auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 201))
        s = rng.integers(0, 20, n) / 20
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        worst = max(worst, abs(auc(s, y) - pairwise_auc(s, y)))
    record(6, ok and worst < 1e-12, f"worked example 0.75: {ok}; max |rank-sum - pairwise| = {worst:.1e}")


def test_criterion_07_augmenter_contract():
    start = time.time()
    checked, problems = 0, []
    for seed in range(3):
        ds = generate(SynthConfig(seed=seed))
        stats = compute_stats(ds)
        pop = compute_popularity(ds)
        for rule in ("user-history-first", "inverse-size-sampling"):
            for r in (0.05, 0.1, 0.3):
                aug = build_augmented(ds, stats, pop, AugConfig(r_aug=r, rule=rule, seed=seed))
                problems += check_augmented(aug, ds, stats, pop, r)
                checked += sum(int((a.source_domain >= 0).sum()) for a in aug.values())
    elapsed = time.time() - start
    record(7, not problems and checked > 0 and elapsed < 60, f"{checked} copies scanned, {len(problems)} violations, {elapsed:.1f}s")


def _mean_or(masks, clusters):
    within, cross = [], []
    ids = sorted(masks)
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            (within if clusters[a] == clusters[b] else cross).append(overlap_ratio(masks[a], masks[b]))
    return float(np.mean(within)), float(np.mean(cross))


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    out, start = {}, time.time()
    for seed in SEEDS:
        for name, ablation, r in (("hei", "+hei", 0.1), ("full", "full", 0.1), ("full_r0", "full", 0.0)):
            cfg = RunConfig(seed=seed, synth=SynthConfig(seed=seed))
            cfg.train.ablation = ablation
            cfg.aug.r_aug = r
            d = root / f"{name}_{seed}"
            rep = run(cfg, d)
            masks = None
            if ablation != "+hei":
                masks = read_masks(d / "masks")
            out[name, seed] = (rep, masks)
    return out, time.time() - start


def test_criterion_08_directional_ablation(ablation_runs):
    runs, elapsed = ablation_runs
    da = [runs["full", s][0]["test"]["domain_auc"] - runs["hei", s][0]["test"]["domain_auc"] for s in SEEDS]
    db = [runs["full", s][0]["test"]["minor4"] - runs["full_r0", s][0]["test"]["minor4"] for s in SEEDS]
    ok_a = np.mean(da) > 0 and sum(x > 0 for x in da) >= 4
    ok_b = np.mean(db) > 0 and sum(x > 0 for x in db) >= 4
    msg = (
        f"(a) full - hei DomainAUC per seed {[round(x, 4) for x in da]} mean {np.mean(da):+.4f}: {'ok' if ok_a else 'not met'}; "
        f"(b) r_aug 0.1 - 0 Minor4 per seed {[round(x, 4) for x in db]} mean {np.mean(db):+.4f}: {'ok' if ok_b else 'not met'}; "
        f"{elapsed / 60:.1f} min"
    )
    record(8, ok_a and ok_b and elapsed < 15 * 60, msg)


def test_criterion_09_cluster_recovery(ablation_runs):
    runs, _ = ablation_runs
    clusters = SynthConfig().clusters
    pairs = [_mean_or(runs["full", s][1], clusters) for s in SEEDS]
    within = float(np.mean([p[0] for p in pairs]))
    cross = float(np.mean([p[1] for p in pairs]))
    per = ", ".join(f"{w:.3f}/{c:.3f}" for w, c in pairs)
    record(9, within > cross, f"mean within-cluster OR {within:.3f} vs cross-cluster {cross:.3f} (per seed {per})")


def test_criterion_10_determinism(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        code = main(["train", "--synth-config", "default", "--ablation", "full", "--seed", "1", "--epochs", "4", "--out", str(d)])
        assert code == 0
        outs.append(d)
    same_report = (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    mask_files = sorted(p.name for p in (outs[0] / "masks").iterdir())
    same_masks = bool(mask_files) and all(
        (outs[0] / "masks" / n).read_bytes() == (outs[1] / "masks" / n).read_bytes() for n in mask_files
    )
    rounds = len(json.loads((outs[0] / "report.json").read_text())["hemp_rounds"])
    record(10, same_report and same_masks, f"reports identical: {same_report}; {len(mask_files)} mask files identical: {same_masks}; {rounds} search rounds")
