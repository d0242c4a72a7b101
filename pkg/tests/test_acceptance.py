"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The slow criteria (classification, robustness sweep, permutation calibration and
power, determinism) drive the command-line tool end to end where they produce CSV
outputs, so the determinism check compares the files a user would get.
"""
import csv
import time

import numpy as np
import pytest

from mdcnn.cli import main
from mdcnn.data import gen_group_sequences, gen_rotating_spd
from mdcnn.manifolds import SPD, Sphere
from mdcnn.net import NetConfig, channel_wfm, dilated_conv_forward, network_forward, residual_forward
from mdcnn.stats import PermutationConfig, permutation_test
from mdcnn.train import SgdConfig, accuracy, check_gradients, train_classifier
from mdcnn.wfm import exact_wfm_oracle, recursive_wfm, weighted_variance

from conftest import near_base_sphere, random_spd, random_unit

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
BASE_ANGLE = 30.0
GAPS = (5, 10, 15, 30)
CLASSIFY_CFG = NetConfig("spd", 3, [(1, 3, 3), (3, 3, 3)], 3, 4)
CLASSIFY_SGD = dict(learning_rate=0.1, momentum=0.9, epochs=12, batch_size=16)
GROUP_CFG = NetConfig("sphere", 8, [(1, 1, 1)], 3, 1)
GROUP_SGD = SgdConfig(learning_rate=0.05, momentum=0.9, epochs=1, batch_size=64)
GROUP_N, GROUP_LEN, GROUP_RATE = 30, 40, 0.2
N_PERMS = 200
POWER_RUNS, NULL_RUNS = 20, 50
NULL_SEED_OFFSET = 1000


# --- shared end-to-end runs ------------------------------------------------------

def run_classification(seed, out_dir):
    """Generate, train and evaluate through the CLI; return (test accuracy, seconds, csv paths)."""
    t0 = time.perf_counter()
    train, test = str(out_dir / f"train{seed}.msq"), str(out_dir / f"test{seed}.msq")
    common = ["gen", "--kind", "spd-rotating", "--len", "20", "--dim", "3", "--classes", "30,60"]
    assert main([*common, "--n", "200", "--out", train, "--seed", str(seed)]) == 0
    assert main([*common, "--n", "100", "--out", test, "--seed", str(seed + 1000)]) == 0
    model = str(out_dir / f"model{seed}.mpar")
    assert main(["train", "--data", train, "--out", model, "--seed", str(seed)]) == 0
    metrics = str(out_dir / f"metrics{seed}.csv")
    assert main(["eval", "--data", test, "--model", model, "--metrics", metrics]) == 0
    acc = float(next(r for r in csv.reader(open(metrics)) if r[0] == "accuracy")[3])
    return acc, time.perf_counter() - t0, [model + ".history.csv", metrics]


def run_group_test(run, out_dir, effect=0.5, offset=0):
    stem = str(out_dir / f"groups{run}")
    seed = str(offset + run)
    assert main(["gen", "--kind", "groups", "--out", stem, "--n", str(GROUP_N), "--len", str(GROUP_LEN),
                 "--dim", "8", "--rate", str(GROUP_RATE), "--effect", str(effect), "--seed", seed]) == 0
    out = str(out_dir / f"perm{run}.csv")
    assert main(["permtest", "--a", stem + "_A.msq", "--b", stem + "_B.msq", "--out", out,
                 "--perms", str(N_PERMS), "--seed", seed]) == 0
    summary = list(csv.reader(open(out)))[-1]
    return float(summary[2]), [out, out + ".hist.csv"]


@pytest.fixture(scope="module")
def classification_runs(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("classify")
    return {seed: run_classification(seed, out_dir) for seed in SEEDS}


@pytest.fixture(scope="module")
def power_runs(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("power")
    t0 = time.perf_counter()
    runs = [run_group_test(r, out_dir) for r in range(POWER_RUNS)]
    return runs, time.perf_counter() - t0


# --- criteria ------------------------------------------------------------------------

def test_c1_rotation_classification(classification_runs, acceptance):
    accs = [classification_runs[s][0] for s in SEEDS]
    secs = [classification_runs[s][1] for s in SEEDS]
    ok = min(accs) >= 0.95 and max(secs) <= 300
    detail = "test accuracy " + ", ".join(f"{a:.3f}" for a in accs) + " (need >= 0.95); seconds per seed " + \
        ", ".join(f"{s:.0f}" for s in secs) + " (need <= 300)"
    assert acceptance("C1 rotation classification 30 vs 60 deg", ok, detail)


def test_c2_angle_robustness(classification_runs, acceptance):
    medians = {}
    table = {}
    for gap in GAPS:
        if gap == 30:
            accs = [classification_runs[s][0] for s in SEEDS]
        else:
            accs = []
            for seed in SEEDS:
                angles = [BASE_ANGLE, BASE_ANGLE + gap]
                train = gen_rotating_spd(200, 20, 3, angles, seed=seed)
                test = gen_rotating_spd(100, 20, 3, angles, seed=seed + 1000)
                params, _ = train_classifier(CLASSIFY_CFG, train, SgdConfig(seed=seed, **CLASSIFY_SGD))
                accs.append(accuracy(CLASSIFY_CFG, params, *test.arrays()))
        table[gap] = accs
        medians[gap] = float(np.median(accs))
    m = [medians[g] for g in GAPS]
    monotone = all(b >= a - 0.03 for a, b in zip(m, m[1:]))
    high = all(medians[g] >= 0.90 for g in GAPS if g >= 15)
    detail = "; ".join(f"gap {g}: median {medians[g]:.3f} of {', '.join(f'{a:.3f}' for a in table[g])}"
                       for g in GAPS)
    assert acceptance("C2 angle robustness (monotone median within 0.03, >= 0.90 from 15 deg)",
                      monotone and high, detail)


def _layer_cases(space, rng):
    """Yield (name, layer function, input) for each layer type on one manifold."""
    if isinstance(space, SPD):
        def seq(c, T):
            return random_spd(rng, 3, spread=0.5, size=(2, c, T))
    else:
        def seq(c, T):
            return near_base_sphere(rng, 8, 0.6, (2, c, T))
    w = rng.dirichlet(np.ones(6))
    yield "wfm", lambda X: recursive_wfm(X[0, 0], w, space), seq(1, 6)
    raw = rng.uniform(0.5, 1.5, (3, 6))
    yield "conv", lambda X: dilated_conv_forward(space, X, raw, 3, 2), seq(2, 7)
    r1, r2, rr = rng.uniform(0.5, 1.5, (2, 6)), rng.uniform(0.5, 1.5, (2, 6)), rng.uniform(0.5, 1.5, (2, 4))
    yield "residual", lambda X: residual_forward(space, X, r1, r2, rr, 3, 1), seq(2, 7)
    rc = rng.uniform(0.5, 1.5, (2, 3))
    yield "channel_wfm", lambda X: channel_wfm(space, X, rc), seq(3, 5)


def test_c3_layer_equivariance(acceptance):
    rng = np.random.default_rng(3)
    worst = {}
    for space in (SPD(3), Sphere(8)):
        for _ in range(100):
            for name, layer, X in _layer_cases(space, rng):
                g = space.random_isometry(rng)
                dev = float(np.max(np.abs(layer(g.apply(X)) - g.apply(layer(X)))))
                key = f"{space!r} {name}"
                worst[key] = max(worst.get(key, 0.0), dev)
    ok = max(worst.values()) <= 1e-7
    detail = "max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (need <= 1e-7)"
    assert acceptance("C3 layer equivariance, 100 pairs per layer type", ok, detail)


def test_c4_network_invariance(acceptance):
    rng = np.random.default_rng(4)
    worst = {}
    for cfg in (NetConfig("spd", 3, [(1, 3, 3), (3, 3, 3)], 3, 4, num_classes=3),
                NetConfig("sphere", 8, [(1, 2, 2), (2, 2, 2)], 3, 3, num_classes=3)):
        space = cfg.space
        dev = 0.0
        for _ in range(100):
            params = cfg.init_params(rng)
            params.arrays()["head.fc_bias"][...] = rng.normal(size=cfg.num_classes)
            if isinstance(space, SPD):
                X = random_spd(rng, 3, spread=0.5, size=(2, 1, 8))
            else:
                X = near_base_sphere(rng, 8, 0.6, (2, 1, 8))
            g = space.random_isometry(rng)
            dev = max(dev, float(np.max(np.abs(network_forward(cfg, params, g.apply(X))
                                               - network_forward(cfg, params, X)))))
        worst[repr(space)] = dev
    ok = max(worst.values()) <= 1e-6
    detail = "max logit deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (need <= 1e-6)"
    assert acceptance("C4 network invariance, 100 trials", ok, detail)


def _spd_ball(rng, center, radius, L):
    """Points at affine-invariant distance <= radius from center (numpy construction)."""
    w, V = np.linalg.eigh(center)
    half = (V * np.sqrt(w)) @ V.T
    out = []
    for _ in range(L):
        A = rng.normal(size=(3, 3))
        S = 0.5 * (A + A.T)
        S *= rng.uniform(0, radius) / np.linalg.norm(S)
        e, U = np.linalg.eigh(S)
        out.append(half @ ((U * np.exp(e)) @ U.T) @ half)
    return np.stack(out)


def _sphere_ball(rng, center, radius, L):
    v = rng.normal(size=(L, center.size))
    v -= (v @ center)[:, None] * center
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    theta = rng.uniform(0, radius, (L, 1))
    return np.cos(theta) * center + np.sin(theta) * v


def test_c5_wfm_oracle_agreement(acceptance):
    rng = np.random.default_rng(5)
    two = {}
    for space in (SPD(3), Sphere(8)):
        dev = 0.0
        for _ in range(100):
            pts = random_spd(rng, 3, size=(2,)) if isinstance(space, SPD) else near_base_sphere(rng, 8, 1.0, (2,))
            w = rng.dirichlet(np.ones(2))
            dev = max(dev, float(np.max(np.abs(recursive_wfm(pts, w, space) - exact_wfm_oracle(pts, w, manifold=space)))))
        two[repr(space)] = dev
    closed = 0.0
    for L in range(1, 11):
        for _ in range(10):
            d = np.exp(rng.normal(size=(L, 3)))
            w = rng.dirichlet(np.ones(L))
            ref = np.diag(np.exp(w @ np.log(d)))
            closed = max(closed, float(np.max(np.abs(recursive_wfm(np.stack([np.diag(x) for x in d]), w) - ref))))
    ratio = {}
    for space in (SPD(3), Sphere(8)):
        worst = 0.0
        for _ in range(100):
            L = int(rng.integers(3, 11))
            if isinstance(space, SPD):
                pts = _spd_ball(rng, random_spd(rng, 3), 0.3, L)
            else:
                pts = _sphere_ball(rng, random_unit(rng, 8), 0.3, L)
            w = rng.dirichlet(np.ones(L))
            v_rec = weighted_variance(pts, w, recursive_wfm(pts, w, space), space)
            v_orc = weighted_variance(pts, w, exact_wfm_oracle(pts, w, manifold=space), space)
            worst = max(worst, v_rec / v_orc)
        ratio[repr(space)] = worst
    ok = max(two.values()) <= 1e-8 and closed <= 1e-8 and max(ratio.values()) <= 1.05
    detail = ("L=2 max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in two.items())
              + f"; commuting L<=10 max deviation {closed:.1e}; radius 0.3 variance ratio "
              + ", ".join(f"{k} {v:.4f}" for k, v in ratio.items()) + " (need <= 1e-8, 1e-8, 1.05)")
    assert acceptance("C5 wFM oracle agreement", ok, detail)


def test_c6_gradient_check(acceptance):
    t0 = time.perf_counter()
    spd = check_gradients(NetConfig("spd", 3, [(1, 3, 3), (3, 3, 3), (3, 3, 3)], 3, 4), seed=0)
    sphere = check_gradients(NetConfig("sphere", 8, [(1, 3, 3), (3, 3, 3)], 3, 4), seed=0)
    secs = time.perf_counter() - t0
    ok = spd["passed"] and sphere["passed"] and secs <= 120
    detail = (f"SPD(3) 3 blocks max rel {spd['max_rel']:.1e} over {spd['n_params']} params; "
              f"S^7 2 blocks max rel {sphere['max_rel']:.1e} over {sphere['n_params']} params; "
              f"{secs:.0f} s (need <= 1e-5, <= 120 s)")
    assert acceptance("C6 gradient check", ok, detail)


def test_c7_null_calibration(acceptance):
    rejections, ps = 0, []
    t0 = time.perf_counter()
    for r in range(NULL_RUNS):
        seed = NULL_SEED_OFFSET + r
        a, b = gen_group_sequences(GROUP_N, GROUP_LEN, 8, GROUP_RATE, 0.0, seed=seed)
        res = permutation_test(a, b, GROUP_CFG, GROUP_SGD,
                               PermutationConfig(N_PERMS, 0.05, seed, pretrain_epochs=20, finetune_epochs=5))
        ps.append(res.p_value)
        rejections += res.rejected
    rate = rejections / NULL_RUNS
    ok = 0.01 <= rate <= 0.12
    detail = (f"rejection rate {rate:.3f} ({rejections}/{NULL_RUNS}), median p {np.median(ps):.3f}, "
              f"{time.perf_counter() - t0:.0f} s (need rate in [0.01, 0.12])")
    assert acceptance("C7 permutation null calibration", ok, detail)


def test_c8_power(power_runs, acceptance):
    runs, secs = power_runs
    ps = [p for p, _ in runs]
    hits = sum(p < 0.05 for p in ps)
    ok = hits >= 0.8 * POWER_RUNS and secs <= 1800
    detail = f"p < 0.05 in {hits}/{POWER_RUNS} runs, {secs:.0f} s total (need >= 16, <= 1800 s)"
    assert acceptance("C8 permutation power at effect 0.5", ok, detail)


def test_c9_determinism(classification_runs, power_runs, tmp_path, acceptance):
    mismatched = []
    for seed in SEEDS:
        _, _, paths = run_classification(seed, tmp_path)
        for old, new in zip(classification_runs[seed][2], paths):
            if open(old, "rb").read() != open(new, "rb").read():
                mismatched.append(new)
    runs, _ = power_runs
    for r in range(POWER_RUNS):
        _, paths = run_group_test(r, tmp_path)
        for old, new in zip(runs[r][1], paths):
            if open(old, "rb").read() != open(new, "rb").read():
                mismatched.append(new)
    n = 2 * len(SEEDS) + 2 * POWER_RUNS
    detail = f"{n - len(mismatched)}/{n} CSV files bit-identical" + (f"; differ: {mismatched}" if mismatched else "")
    assert acceptance("C9 determinism of classification and power CSVs", not mismatched, detail)
