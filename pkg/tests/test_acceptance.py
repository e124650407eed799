"""Acceptance gate: one PASS/FAIL line per criterion (see the terminal summary).

Configurations below were frozen after pilot sweeps; they are not tuned
per test run.  Expensive runs are shared between criteria through
module-scoped fixtures.
"""
import math
import time

import numpy as np
import pytest

from hsrdc import objectives as obj
from hsrdc import segext as sx
from hsrdc.centroids import CentroidLearner, learn_centroids
from hsrdc.cli import main
from hsrdc.datagen import gen_gaussian_shift, two_moons_pair
from hsrdc.gradcore import tensor as T
from hsrdc.gradcore.gradcheck import check_gradients
from hsrdc.gradcore.tensor import Tensor, no_grad
from hsrdc.trainer import ABLATIONS, TrainConfig, lambda_schedule, lr_schedule, train, train_grl

from oracles import clustering_objective, grid_minimum

SEEDS = range(5)

MOONS = dict(epochs=50, warmup_epochs=5, lr0=0.05, phi_hidden=[128, 128], lambda_on="target", d=32,
             batch_size=64, learner_lr=1e-3)
GAUSS_DATA = dict(k=3, dim=4, sep=4.0, shift=[2.5, 0, 0, 0], cov_scale=1.0, n_per_class=150)
GAUSS = dict(epochs=30, warmup_epochs=5, lr0=0.05, d=16, iterations_per_epoch=40, learner_lr=1e-2,
             lambda_on="target", diagnostics=False)
SEG = dict(lambda_mode="schedule", epochs=10, warmup_epochs=2, diagnostics=False)
SEG_DISC_LR = 1e-3


def _moons(seed):
    return two_moons_pair(1000, 0.1, 30.0, seed=seed)


@pytest.fixture(scope="module")
def moons_runs():
    start = time.time()
    out = {"hsrdc": [], "source_only": []}
    for seed in SEEDS:
        pair = _moons(seed)
        for name in out:
            out[name].append(train(TrainConfig(seed=seed, **MOONS).with_ablation(name), pair).metrics)
    out["seconds"] = time.time() - start
    return out


# -- 1 ------------------------------------------------------------------------
def _softmax_input(rng, n, k):
    return Tensor(rng.standard_normal((n, k)), requires_grad=True)


def _loss_cases():
    """Each case builds (loss closure, parameters) from one seeded generator."""

    def eq1(rng):
        n, k = rng.integers(2, 7), rng.integers(2, 5)
        logits, Q = _softmax_input(rng, n, k), rng.dirichlet(np.ones(k), size=n)
        return lambda: obj.discriminative_clustering_loss(T.softmax(logits, axis=1), Q), [logits]

    def eq3(rng):
        n, k = rng.integers(2, 7), rng.integers(2, 5)
        logits, y = _softmax_input(rng, n, k), rng.integers(1, k + 1, n)
        return lambda: obj.weighted_source_ce(T.softmax(logits, axis=1), y), [logits]

    def eq6(rng):
        n, k = rng.integers(2, 7), rng.integers(2, 5)
        logits, y, w = _softmax_input(rng, n, k), rng.integers(1, k + 1, n), rng.uniform(0, 1, n)
        return lambda: obj.weighted_source_ce(T.softmax(logits, axis=1), y, w), [logits]

    def student(rng, n, k):
        d = int(rng.integers(2, 5))
        return (Tensor(rng.standard_normal((d, n)), requires_grad=True),
                Tensor(rng.standard_normal((d, k)), requires_grad=True))

    def eq9(rng):
        n, k = rng.integers(2, 7), rng.integers(2, 5)
        Z, C = student(rng, n, k)
        Q = rng.dirichlet(np.ones(k), size=n)
        return lambda: obj.generative_clustering_loss(obj.student_t_assignment(Z, C), Q), [Z, C]

    def eq11(rng):
        n, k = rng.integers(2, 7), rng.integers(2, 5)
        Z, C = student(rng, n, k)
        y, w = rng.integers(1, k + 1, n), rng.uniform(0, 1, n)
        return lambda: obj.generative_source_loss(obj.student_t_assignment(Z, C), y, w), [Z, C]

    def eq17(rng):
        a, k = int(rng.integers(1, 3)), 3
        labels = rng.integers(1, k + 1, (2 * a, 2 * a))
        tau = sx.class_count_field(labels, a, k).reshape(-1, k)
        Z, C = student(rng, tau.shape[0], k)
        return lambda: sx.seg_generative_source_loss(obj.student_t_assignment(Z, C), tau, a), [Z, C]

    def layout(rng):
        g = sx.LayoutDiscriminator(3, rng, width=4)
        logits = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        O_s = Tensor(rng.uniform(0, 1 / math.e, (2, 3, 8, 8)))
        return g, logits, O_s

    def eq19(rng):
        g, logits, O_s = layout(rng)
        return lambda: sx.layout_losses(O_s, sx.self_information_t(T.softmax(logits, axis=1)), g)[0], [logits]

    def eq20(rng):
        g, logits, O_s = layout(rng)
        O_t = sx.self_information(T.softmax(Tensor(logits.data), axis=1).data)
        return lambda: sx.layout_losses(O_s, O_t, g)[1], g.parameters()

    return {"discriminative clustering": eq1, "source CE": eq3, "weighted source CE": eq6,
            "generative clustering": eq9, "generative source": eq11, "seg source": eq17,
            "layout generator": eq19, "layout adversarial": eq20}


def test_criterion_01_gradient_suite(report):
    start = time.time()
    worst = {}
    for name, make in _loss_cases().items():
        errs = []
        for seed in range(20):
            fn, params = make(np.random.default_rng(seed))
            errs.append(check_gradients(fn, params))
        worst[name] = max(errs)
    seconds = time.time() - start
    ok = max(worst.values()) <= 1e-4 and seconds < 60
    detail = f"worst rel err {max(worst.values()):.2e} over 8 losses x 20 instances, {seconds:.1f}s"
    assert report(1, ok, detail), worst


# -- 2 ------------------------------------------------------------------------
def test_criterion_02_closed_form_vs_grid(report):
    start = time.time()
    gaps = []
    for n in (1, 2, 3):
        for k in (2, 3):
            for seed in range(5):
                rng = np.random.default_rng(100 * n + 10 * k + seed)
                P = rng.dirichlet(np.full(k, 0.5 if seed % 2 else 1.0), size=n)
                Q = obj.auxiliary_update(P)
                gaps.append((clustering_objective(Q, P) - grid_minimum(P), n, k, seed))
    seconds = time.time() - start
    worst = max(gaps, key=lambda g: abs(g[0]))
    n_bad = sum(abs(g[0]) > 1e-3 for g in gaps)
    ok = n_bad == 0 and seconds < 120
    detail = (f"max |closed form - grid min| {abs(worst[0]):.2e} (n={worst[1]}, K={worst[2]}), "
              f"{n_bad}/{len(gaps)} instances over 1e-3, {seconds:.1f}s")
    assert report(2, ok, detail)


# -- 3 ------------------------------------------------------------------------
def test_criterion_03_student_t_bounds(report):
    rng = np.random.default_rng(0)
    draws, violations, worst_sum = 0, 0, 0.0
    while draws < 100_000:
        k, d, b = int(rng.integers(2, 9)), int(rng.integers(1, 9)), 100
        scale = 10 ** rng.uniform(-2, 2)
        P = obj.student_t_assignment(scale * rng.standard_normal((d, b)), scale * rng.standard_normal((d, k))).data
        lo, hi = obj.student_t_bounds(k)
        violations += int(np.count_nonzero((P <= lo) | (P >= hi)))
        worst_sum = max(worst_sum, float(np.abs(P.sum(axis=1) - 1).max()))
        draws += b
    ok = violations == 0 and worst_sum <= 1e-10
    assert report(3, ok, f"{draws} draws, {violations} bound violations, max |row sum - 1| {worst_sum:.1e}")


# -- 4 ------------------------------------------------------------------------
def test_criterion_04_permutation_invariance(report):
    rng = np.random.default_rng(0)
    learner = CentroidLearner(16, 4, rng, heads=4)
    Z = rng.standard_normal((16, 60))
    with no_grad():
        base = learn_centroids(Z, learner).data
        dev = max(float(np.abs(learn_centroids(Z[:, rng.permutation(60)], learner).data - base).max())
                  for _ in range(50))
    assert report(4, dev <= 1e-9, f"max deviation {dev:.1e} over 50 permutations")


# -- 5 ------------------------------------------------------------------------
def test_criterion_05_two_moons_end_to_end(report, moons_runs):
    full = [m[-1]["target_test_acc"] for m in moons_runs["hsrdc"]]
    so = [m[-1]["target_test_acc"] for m in moons_runs["source_only"]]
    gain = np.mean(full) - np.mean(so)
    ok = gain >= 0.10 and np.mean(full) >= 0.90 and moons_runs["seconds"] < 300
    detail = (f"H-SRDC {np.mean(full):.3f} vs Source Only {np.mean(so):.3f} (gain {100 * gain:.1f} pts, "
              f"need >= 10 and >= 0.900), {moons_runs['seconds']:.0f}s")
    assert report(5, ok, detail), (full, so)


# -- 6 ------------------------------------------------------------------------
def test_criterion_06_ablation_ordering(report):
    acc = {name: [] for name in ABLATIONS}
    for seed in SEEDS:
        pair = gen_gaussian_shift(seed=seed, **GAUSS_DATA)
        for name in ABLATIONS:
            res = train(TrainConfig(seed=seed, **GAUSS).with_ablation(name), pair)
            acc[name].append(res.metrics[-1]["target_test_acc"])
    m = {name: float(np.mean(v)) for name, v in acc.items()}
    margin = 0.01
    checks = {
        "hsrdc >= srdisc_srgenc": m["hsrdc"] >= m["srdisc_srgenc"] - margin,
        "srdisc_srgenc >= max(srdisc, srgenc)": m["srdisc_srgenc"] >= max(m["srdisc"], m["srgenc"]) - margin,
        "disc_genc >= max(disc, genc)": m["disc_genc"] >= max(m["disc"], m["genc"]) - margin,
    }
    for name in ABLATIONS:
        if name != "source_only":
            checks[f"{name} >= source_only"] = m[name] >= m["source_only"] - margin
    failed = [c for c, good in checks.items() if not good]
    table = " ".join(f"{name}={v:.3f}" for name, v in m.items())
    detail = f"{table}; violated: {', '.join(failed) if failed else 'none'}"
    assert report(6, not failed, detail)


# -- 7 ------------------------------------------------------------------------
def test_criterion_07_non_collapse(report, moons_runs):
    ratios = []
    for metrics in moons_runs["hsrdc"]:
        for key in ("src_instance_to_centroid", "tgt_instance_to_centroid"):
            ratios.append(metrics[-1][key] / metrics[0][key])
    ok = min(ratios) >= 0.1
    assert report(7, ok, f"min final/epoch-1 Instance-to-Centroid ratio {min(ratios):.3f} (both domains, 5 seeds)")


# -- 8 ------------------------------------------------------------------------
def test_criterion_08_no_alignment(report, moons_runs):
    increases = 0
    for metrics in moons_runs["hsrdc"]:
        series = np.array([r["srcinsmean_to_tgtinsmean"] for r in metrics])
        # steps from epoch e to e+1 with e >= 5
        increases += bool(np.any(np.diff(series[4:]) > 0))
    steps = []
    for seed in SEEDS:
        metrics = train_grl(TrainConfig(seed=seed, **MOONS), _moons(seed)).metrics
        series = np.array([r["srcinsmean_to_tgtinsmean"] for r in metrics])
        steps.extend(np.diff(series) <= 0)
    frac = float(np.mean(steps))
    ok = increases >= 4 and frac >= 0.9
    detail = (f"H-SRDC increases after epoch 5 in {increases}/5 seeds; gradient-reversal baseline "
              f"non-increasing steps {frac:.2f} (need >= 0.90)")
    assert report(8, ok, detail)


# -- 9 ------------------------------------------------------------------------
def test_criterion_09_balance(report, moons_runs):
    # cluster sizes of the classifier partition, which the balance term acts on
    ent = [m[-1]["target_pred_entropy"] for m in moons_runs["hsrdc"]]
    km = [m[-1]["target_cluster_entropy"] for m in moons_runs["hsrdc"]]
    floor = 0.9 * math.log(2)
    detail = (f"min final cluster-size entropy {min(ent):.4f} vs 0.9 ln 2 = {floor:.4f} "
              f"(k-means partition min {min(km):.4f})")
    assert report(9, min(ent) >= floor, detail)


# -- 10 -----------------------------------------------------------------------
def test_criterion_10_schedules(report):
    values = (lambda_schedule(0.0), lambda_schedule(1.0), lr_schedule(0.0), lr_schedule(1.0))
    ok = (values[0] == 0.0 and abs(values[1] - 0.999909) <= 1e-6 and values[2] == 0.01
          and abs(values[3] - 0.001659) <= 1e-6)
    assert report(10, ok, "lambda(0)={:.6g} lambda(1)={:.6f} eta(0)={:.6g} eta(1)={:.6f}".format(*values))


# -- 11 -----------------------------------------------------------------------
def test_criterion_11_segmentation(report):
    start = time.time()
    runs = {"hsrdc": (None, 0.001), "no_layout": (None, 0.0), "source_only": ("source_only", 0.0)}
    miou = {name: [] for name in runs}
    disc = []
    for seed in SEEDS:
        pair = sx.toy_scene_pair(seed=seed)
        for name, (ablation, beta) in runs.items():
            cfg = sx.seg_train_config(seed=seed, **SEG)
            if ablation:
                cfg = cfg.with_ablation(ablation)
            last = sx.train_seg(cfg, sx.SegConfig(beta=beta, disc_lr=SEG_DISC_LR), pair).metrics[-1]
            miou[name].append(last["target_test_miou"])
            if name == "hsrdc":
                disc.append(last["disc_acc"])
    seconds = time.time() - start
    m = {name: float(np.mean(v)) for name, v in miou.items()}
    gain = m["hsrdc"] - m["source_only"]
    d = float(np.mean(disc))
    checks = {"gain >= 5 pts": gain >= 0.05, "disc acc in [0.4, 0.6]": 0.4 <= d <= 0.6,
              "beta=0 degrades": m["no_layout"] < m["hsrdc"], "runtime < 10 min": seconds < 600}
    failed = [c for c, good in checks.items() if not good]
    detail = (f"mIoU H-SRDC {m['hsrdc']:.3f}, beta=0 {m['no_layout']:.3f}, Source Only {m['source_only']:.3f}; "
              f"held-out disc acc {d:.3f}; {seconds:.0f}s; failed: {', '.join(failed) if failed else 'none'}")
    assert report(11, not failed, detail)


# -- 12 -----------------------------------------------------------------------
def test_criterion_12_determinism(report, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--generator", "two_moons", "--out", str(data), "--set", "data.n=1000",
                 "--set", "data.noise=0.1", "--set", "data.rotation_deg=30"]) == 0
    sets = [f"train.{k}={','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in MOONS.items()]
    argv = [a for s in sets for a in ("--set", s)]
    blobs = []
    for run in ("a", "b"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / run), "--seeds", "1", *argv]) == 0
        blobs.append((tmp_path / run / "seed_0" / "metrics.csv").read_bytes())
    same = blobs[0] == blobs[1]
    assert report(12, same, f"metrics.csv byte-identical across two runs ({len(blobs[0])} bytes)")
