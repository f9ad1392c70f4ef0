"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run standalone with ``python3 tests/test_acceptance.py`` or through pytest.
"""

import itertools
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import record  # noqa: E402
from oracles import (  # noqa: E402
    bf_ari,
    bf_entropy,
    bf_mi,
    bf_nmi,
    bf_rand,
    dense_gp,
    fd_gradients,
    set_partitions,
)
from fluxlattice import pipeline, simindex  # noqa: E402
from fluxlattice.cluster import KMeansConfig, kmeans_fit, similarity_matrix, ap_fit  # noqa: E402
from fluxlattice.evalmetrics import noise_floor_from_raw  # noqa: E402
from fluxlattice.gp import GpHyperparams, gp_fit, gp_predict, gp_predict_var  # noqa: E402
from fluxlattice.mcdnn import (  # noqa: E402
    MlpConfig,
    forward,
    init_model,
    loss_and_grads,
    make_masks,
    mc_predict,
    train,
)
from fluxlattice.preprocess import PreprocessConfig, preprocess_for_clustering  # noqa: E402
from fluxlattice.synthgen import SynthConfig, generate  # noqa: E402


# ------------------------------------------------------------------ 1


def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    pairs = 0
    for n in range(1, 7):
        parts = list(set_partitions(n))
        for a in parts:
            worst = max(worst, abs(simindex.entropy(a) - bf_entropy(a)))
        for a, b in itertools.product(parts, parts):
            pairs += 1
            worst = max(
                worst,
                abs(simindex.mutual_information(a, b) - bf_mi(a, b)),
                abs(simindex.nmi(a, b) - bf_nmi(a, b)),
                abs(simindex.nmi(a, b, "geometric") - bf_nmi(a, b, "geometric")),
            )
            if n >= 2:
                worst = max(
                    worst,
                    abs(simindex.rand_index(a, b) - bf_rand(a, b)),
                    abs(simindex.adjusted_rand_index(a, b) - bf_ari(a, b)),
                )
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 60
    return record(1, "index oracle equivalence, all partition pairs N<=6", ok,
                  f"{pairs} pairs, max |diff| = {worst:.2e} (<= 1e-12), {elapsed:.1f}s (< 60s)"), ok


# ------------------------------------------------------------------ 2


def criterion_2():
    v = simindex.adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1])
    ok = v == -0.5
    return record(2, "ARI worked example", ok, f"ARI = {v!r} (exactly -0.5)"), ok


# ------------------------------------------------------------------ 3


def _mi_batch(a, b_perm):
    """Mutual information (bits) of label vector ``a`` against each row of ``b_perm``."""
    n = a.size
    ra, rb = a.max() + 1, b_perm.max() + 1
    t = b_perm.shape[0]
    flat = (np.arange(t)[:, None] * ra * rb + a[None, :] * rb + b_perm).ravel()
    counts = np.bincount(flat, minlength=t * ra * rb).reshape(t, ra, rb).astype(float)
    pa = np.bincount(a, minlength=ra) / n
    pb = np.bincount(b_perm[0], minlength=rb) / n
    pij = counts / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pij > 0, pij * np.log2(pij / (pa[:, None] * pb[None, :])), 0.0)
    return terms.sum(axis=(1, 2))


def criterion_3():
    rng = np.random.default_rng(2024)
    shuffles = 100_000
    worst_z = 0.0
    rows = []
    for _ in range(10):
        n = int(rng.integers(4, 13))
        ka = int(rng.integers(2, min(n, 4) + 1))
        kb = int(rng.integers(2, min(n, 4) + 1))
        a = np.sort(np.concatenate([np.arange(ka), rng.integers(0, ka, n - ka)]))
        b = np.sort(np.concatenate([np.arange(kb), rng.integers(0, kb, n - kb)]))
        exact = simindex.expected_mutual_information(np.bincount(a), np.bincount(b))
        perms = rng.permuted(np.tile(b, (shuffles, 1)), axis=1)
        mi = _mi_batch(a, perms)
        se = mi.std(ddof=1) / np.sqrt(shuffles)
        z = abs(mi.mean() - exact) / se if se > 0 else (0.0 if abs(mi.mean() - exact) < 1e-12 else np.inf)
        worst_z = max(worst_z, z)
        rows.append(f"N={n}")
    ok = worst_z <= 3.0
    return record(3, "AMI expectation vs permutation Monte Carlo", ok,
                  f"10 marginal configs ({', '.join(rows)}), 100000 shuffles each, "
                  f"max deviation {worst_z:.2f} SE (<= 3)"), ok


# ------------------------------------------------------------------ 4


def criterion_4():
    t0 = time.perf_counter()
    ap_settings = pipeline.ApSettings()
    worst = {"kmeans": 1.0, "ap": 1.0, "km_vs_ap": 1.0}
    for seed in range(20):
        res = generate(SynthConfig(seed=seed))
        truth = res.ground_truth()
        for asm in res.dataset.assemblies:
            x, keys = preprocess_for_clustering(res.dataset, PreprocessConfig(), asm)
            keys = [k[0] for k in keys]
            km = kmeans_fit(x, KMeansConfig(k=2, restarts=20, seed=seed), keys).clustering
            s = similarity_matrix(x)
            ap = ap_fit(s, ap_settings.resolve(s), keys, x).clustering
            worst["kmeans"] = min(worst["kmeans"], simindex.adjusted_rand_index(km, truth[asm]))
            worst["ap"] = min(worst["ap"], simindex.adjusted_rand_index(ap, truth[asm]))
            worst["km_vs_ap"] = min(worst["km_vs_ap"], simindex.adjusted_rand_index(km, ap))
    elapsed = time.perf_counter() - t0
    ok = min(worst.values()) >= 0.95 and elapsed < 120
    return record(4, "clustering recovery on default synthetic data, 20 seeds", ok,
                  f"min ARI k-means {worst['kmeans']:.3f}, AP {worst['ap']:.3f}, "
                  f"k-means vs AP {worst['km_vs_ap']:.3f} (>= 0.95); {elapsed:.1f}s (< 120s)"), ok


# ------------------------------------------------------------------ 5


def criterion_5():
    rng = np.random.default_rng(5)
    dense_err = 0.0
    for n in range(1, 6):
        for m in range(1, 6):
            X = rng.uniform(-1, 1, (n, 2))
            y = rng.normal(size=n)
            noise = rng.uniform(0.05, 0.5, n)
            Xs = rng.uniform(-1.5, 1.5, (m, 2))
            hp = GpHyperparams(float(rng.uniform(0.5, 2)), float(rng.uniform(0.2, 1)))
            model = gp_fit(X, y, noise, hp)
            mean, cov = gp_predict(model, Xs)
            m_ref, c_ref = dense_gp(X, y, np.sqrt(noise**2 + model.jitter_used), Xs, hp.sigma_f, hp.length_scale)
            dense_err = max(dense_err, np.abs(mean - m_ref).max(), np.abs(cov - c_ref).max())
    X = rng.uniform(-1, 1, (5, 2))
    y = rng.normal(size=5)
    model = gp_fit(X, y, np.zeros(5), GpHyperparams(1.0, 0.5))
    mu, var = gp_predict_var(model, X)
    interp_err, interp_var = np.abs(mu - y).max(), var.max()
    model = gp_fit(X, y, np.full(5, 0.1), GpHyperparams(1.3, 0.4))
    mu_far, var_far = gp_predict_var(model, [[40.0, -40.0]])
    far_err = max(abs(mu_far[0]), abs(var_far[0] - 1.3**2))
    ok = dense_err <= 1e-10 and interp_err <= 1e-8 and interp_var <= 1e-8 and far_err <= 1e-6
    return record(5, "GP exactness", ok,
                  f"dense-inversion max diff {dense_err:.1e} (<= 1e-10); interpolation error {interp_err:.1e}, "
                  f"variance {interp_var:.1e} (<= 1e-8); far field {far_err:.1e} (<= 1e-6)"), ok


# ------------------------------------------------------------------ 6


def criterion_6():
    worst = 0.0
    cfg = MlpConfig(hidden_sizes=(16, 16), dropout_p=0.1, weight_decay=1e-3)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = init_model(cfg, rng)
        for b in model.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        X = rng.normal(size=(8, 2))
        y = rng.normal(size=8)
        masks = make_masks(model, 8, rng)
        _, grads = loss_and_grads(model, X, y, masks)
        numeric = fd_gradients(model.weights, model.biases, masks, X, y, cfg.dropout_p, cfg.weight_decay)
        for a, n in zip(grads, numeric):
            n = n.astype(float)
            den = np.maximum(np.abs(a), np.abs(n))
            nz = den > 0
            if nz.any():
                worst = max(worst, float((np.abs(a - n)[nz] / den[nz]).max()))
    ok = worst < 1e-4
    return record(6, "MLP gradient check, 2-16-16-1, 10 seeds", ok,
                  f"max element-wise relative error {worst:.2e} (< 1e-4)"), ok


# ------------------------------------------------------------------ 7


def criterion_7():
    rng = np.random.default_rng(7)
    model = init_model(MlpConfig(hidden_sizes=(16, 16), dropout_p=0.0), rng)
    worst_mean, worst_std = 0.0, 0.0
    for x in rng.normal(size=(10, 2)):
        p = mc_predict(model, x, T=2000, seed=1)
        worst_mean = max(worst_mean, abs(p.mean - forward(model, x)))
        worst_std = max(worst_std, p.std)
    X = rng.uniform(-1, 1, (300, 2))
    y = np.sin(X[:, 0]) * X[:, 1]
    cfg = MlpConfig(hidden_sizes=(16, 16), epochs=5, batch_size=32, seed=11)
    a, _ = train(X, y, cfg)
    b, _ = train(X, y, cfg)
    same = all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    ok = worst_std == 0.0 and worst_mean <= 1e-12 and same
    return record(7, "MC dropout determinism and degeneracy", ok,
                  f"p=0: max std {worst_std}, max |mean - forward| {worst_mean:.1e} (<= 1e-12); "
                  f"same-seed weights identical: {same}"), ok


# ------------------------------------------------------------------ 8, 10, 11: default study

_STUDY = {}


def default_study():
    if not _STUDY:
        out = Path(tempfile.mkdtemp(prefix="fluxlattice-study-"))
        run = pipeline.Run(out, pipeline.RunConfig())
        t0 = time.perf_counter()
        result = pipeline.run_all(run, jobs=1)
        _STUDY["elapsed"] = time.perf_counter() - t0
        _STUDY["evaluation"] = result["report"]["evaluation"]
        _STUDY["speedup"] = pipeline.gp_speedup(run)
        _STUDY["mc_passes"] = run.config.mlp.mc_passes
    return _STUDY


def criterion_8():
    s = default_study()
    ev = s["evaluation"]
    parts, ok = [], s["elapsed"] < 600 and s["mc_passes"] >= 2000
    for model in ("gp", "mlp"):
        e = ev[model]
        frac, red = e["fraction_cycles_improved"], e["bump_reduction"]
        ok &= frac >= 0.9 and red >= 0.3
        parts.append(
            f"{model.upper()} NRMSE {e['mean_nrmse']['pooled']:.2f}% -> {e['mean_nrmse']['clustered']:.2f}%, "
            f"cycles improved {frac:.0%} (>= 90%, profiles {e['fraction_profiles_improved']:.0%}), "
            f"bump NRMSE {e['bump_nrmse']['pooled']:.2f}% -> {e['bump_nrmse']['clustered']:.2f}% "
            f"(reduction {red:.0%}, >= 30%)"
        )
    parts.append(f"T = {s['mc_passes']}, total {s['elapsed']:.0f}s (< 600s)")
    return record(8, "cluster-then-regress improvement", ok, "; ".join(parts)), ok


def criterion_9():
    res = generate(SynthConfig())
    cfg = PreprocessConfig()
    floors = np.array([noise_floor_from_raw(p.counts, cfg.sg_window, cfg.sg_polyorder) for p in res.dataset.profiles])
    ok = floors.min() >= 3.0 and floors.max() <= 8.0
    return record(9, "noise-floor sanity", ok,
                  f"{len(floors)} profiles, noise floor {floors.min():.2f}%..{floors.max():.2f}% "
                  f"(mean {floors.mean():.2f}%), all within [3, 8]%"), ok


def criterion_10():
    ev = default_study()["evaluation"]
    gp_cov = ev["gp"]["coverage_truth"]
    mlp_cov = ev["mlp"]["coverage_truth"]
    ok = min(gp_cov.values()) >= 0.85
    return record(10, "UQ coverage of noise-free truth on held-out cycles", ok,
                  f"GP 95% CI coverage pooled {gp_cov['pooled']:.1%}, clustered {gp_cov['clustered']:.1%} (>= 85%); "
                  f"MC dropout coverage pooled {mlp_cov['pooled']:.1%}, clustered {mlp_cov['clustered']:.1%} (reported)"), ok


def criterion_11():
    sp = default_study()["speedup"]
    ok = all(v["clustered_s"] <= v["pooled_s"] for v in sp.values())
    per = ", ".join(f"{k} {v['pooled_s']:.2f}s/{v['clustered_s']:.2f}s = x{v['ratio']:.2f}" for k, v in sp.items())
    return record(11, "per-cluster GP speedup (pooled/clustered train+predict)", ok, per), ok


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11]


@pytest.mark.acceptance
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 12)])
def test_acceptance(criterion):
    line, ok = criterion()
    assert ok, line


if __name__ == "__main__":
    results = [c()[1] for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
