"""Acceptance suite: one test per criterion, each reported in the terminal summary.

Criteria 1 to 8 are exact or statistical oracle checks on small inputs.
Criteria 9 to 11 train the default pipeline (a few minutes per seed) and
share the session-scoped seed-0 run with the other slow tests.
"""

import time

import numpy as np
import pytest

from diffuq import datagen
from diffuq import detector as det
from diffuq import diffusion as D
from diffuq import harness
from diffuq import laplace as L
from diffuq import ndkernel as nd
from diffuq import uncertainty as U
from diffuq.metrics import accuracy_at_threshold, auroc, average_precision

from oracles import (brute_ap, brute_auroc, constant_h_model, exact_weight_posterior_precision,
                     naive_epistemic, onehot_pairs, post_for, relu_onehot_model, small_model,
                     symmetric_hinge)

SEEDS = (0, 1, 2)
M0_GRID = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
T_GRID = [100, 200, 300, 400]


def _check(detail, ok, text):
    detail.append(text)
    print(("ok   " if ok else "FAIL ") + text)
    return ok


@pytest.mark.criterion(1, "Laplace exactness")
def test_laplace_exactness(criterion_detail):
    t0 = time.perf_counter()
    sched = D.make_schedule(10, 0.0, 0.0)
    worst = 0.0
    for seed, (tau, s2) in enumerate([(0.7, 0.3), (1.0, 1.0), (5.0, 0.05)]):
        model = relu_onehot_model()
        x0, t, eps = onehot_pairs(30, seed=seed)
        post = L.fit_lllla(model, x0, sched, tau, s2, pairs=(x0, t, eps))
        exact_w = exact_weight_posterior_precision(np.maximum(x0, 0), tau, s2)
        exact_b = tau + len(x0) / s2
        worst = max(worst, np.max(np.abs(post.weight_precision - exact_w) / exact_w),
                    np.max(np.abs(post.bias_precision - exact_b) / exact_b))
    elapsed = time.perf_counter() - t0
    ok = _check(criterion_detail, worst <= 1e-10, f"max rel err {worst:.1e}")
    ok &= _check(criterion_detail, elapsed < 1.0, f"{elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(2, "epistemic estimator equals the double-loop reference")
def test_epistemic_oracle(criterion_detail):
    t0 = time.perf_counter()
    sched = D.make_schedule()
    worst = 0.0
    for seed, target in enumerate(["prev_step", "x0_estimate", "prev_step"]):
        model = small_model(sched, seed=seed)
        post = post_for(model, 2.0 + seed, 4.0)
        cfg = U.UncertaintyConfig(t=200, M=3, N=2, target=target)
        x = np.random.default_rng(seed).uniform(-1, 1, 4)
        fast = U.estimate_epistemic(x, model, post, cfg, sched, seed=seed).ravel()
        slow = naive_epistemic(x, model, post, cfg, sched, seed)
        worst = max(worst, np.max(np.abs(fast - slow)) / slow.max())
    elapsed = time.perf_counter() - t0
    ok = _check(criterion_detail, worst <= 1e-12, f"max rel err {worst:.1e}")
    ok &= _check(criterion_detail, elapsed < 1.0, f"{elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(3, "closed-form variance checks")
def test_closed_forms(criterion_detail):
    t0 = time.perf_counter()
    sched = D.make_schedule()
    zero = constant_h_model(sched, [1.0])
    x = np.array([0.3, -0.7, 0.0, 1.0])
    ok = True
    for t in (50, 200, 600):
        ab = sched.alpha_bar[t]
        cfg = U.UncertaintyConfig(t=t, N=10_000, target="x0_estimate")
        a = U.estimate_aleatoric(x, zero, cfg, sched, seed=t)
        r, _ = U.reconstruction_error(x, zero, cfg, sched, seed=t + 1)
        want = (1 - ab) / ab
        err = max(np.max(np.abs(a / want - 1)), np.max(np.abs(r / want - 1)))
        ok &= _check(criterion_detail, err <= 0.1, f"t={t} A,R rel err {err:.3f}")
    lin_sched = D.make_schedule(2, 0.5, 0.5)
    for h, s2 in ((1.7, 0.09), (0.5, 1.0)):
        model = constant_h_model(lin_sched, [h], head_w=np.full((4, 1), 0.3))
        cfg = U.UncertaintyConfig(t=1, M=10_000, N=2, target="x0_estimate")
        u = U.estimate_epistemic(np.zeros(4), model, post_for(model, 1 / s2), cfg, lin_sched)
        err = np.max(np.abs(u / (h * h * s2) - 1))
        ok &= _check(criterion_detail, err <= 0.1, f"U=h^2 s^2 (h={h}) rel err {err:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= _check(criterion_detail, elapsed < 30, f"{elapsed:.1f}s")
    assert ok


def _non_kink(rng, cfg, B=6, D_=5):
    while True:
        f = rng.normal(size=(B, D_))
        y = rng.integers(0, 2, B)
        y[:2] = [0, 1]
        *_, arg = det._pair_terms(f, y, cfg)
        if np.abs(arg).min() > 1e-3:
            return f, y


@pytest.mark.criterion(4, "gradient suite")
def test_gradient_suite(criterion_detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sched = D.make_schedule()
    lcfg = det.AsymmetricLossConfig()
    fails = {"diffusion": 0, "cross-entropy": 0, "contrastive": 0, "total": 0}
    worst = dict.fromkeys(fails, 0.0)

    def record(name, report):
        fails[name] += not report.passed
        worst[name] = max(worst[name], report.worst)

    for k in range(100):
        model = small_model(sched, seed=k, hidden=(4,))
        x0, eps = rng.uniform(-1, 1, (2, 4)), rng.normal(size=(2, 4))
        t = rng.integers(1, sched.T + 1, 2)
        record("diffusion", nd.finite_diff_check(
            lambda p: model.loss_and_grads(x0, t, eps, sched), model.params()))

        logits, y = rng.normal(size=(5, 2)) * 2, rng.integers(0, 2, 5)

        def ce(p):
            loss, g = det.cross_entropy(p[0], y)
            return loss, [g]
        record("cross-entropy", nd.finite_diff_check(ce, [logits]))

        f, yf = _non_kink(rng, lcfg)

        def lm(p):
            loss, g = det.asymmetric_contrastive_loss(p[0], yf, lcfg)
            return loss, [g]
        record("contrastive", nd.finite_diff_check(lm, [f]))

        lg = rng.normal(size=(len(yf), 2))

        def tot(p):
            loss, dl, df = det.total_loss(p[0], p[1], yf, lcfg)
            return loss, [dl, df]
        record("total", nd.finite_diff_check(tot, [lg, f.copy()]))
    elapsed = time.perf_counter() - t0
    ok = True
    for name in fails:
        ok &= _check(criterion_detail, fails[name] == 0,
                     f"{name}: {100 - fails[name]}/100, worst {worst[name]:.1e}")
    ok &= _check(criterion_detail, elapsed < 60, f"{elapsed:.1f}s")
    assert ok


@pytest.mark.criterion(5, "forward-marginal statistics")
def test_forward_marginal(criterion_detail):
    t0 = time.perf_counter()
    sched = D.make_schedule()
    x0 = np.array([0.8, -0.4, 0.0, 0.25])
    n = 10_000
    ok = True
    for t in (1, 200, 999):
        eps = nd.make_rng(t, "marginal").standard_normal((n, 4))
        xt = D.forward_sample(np.broadcast_to(x0, eps.shape), t, eps, sched)
        ab = sched.alpha_bar[t]
        mean, var = np.sqrt(ab) * x0, 1 - ab
        z_mean = np.abs(xt.mean(axis=0) - mean) / np.sqrt(var / n)
        z_var = np.abs(xt.var(axis=0, ddof=1) - var) / (var * np.sqrt(2 / (n - 1)))
        zmax = max(z_mean.max(), z_var.max())
        ok &= _check(criterion_detail, zmax < 3, f"t={t} max |z| {zmax:.2f}")
    elapsed = time.perf_counter() - t0
    ok &= _check(criterion_detail, elapsed < 10, f"{elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(6, "deterministic DDIM generation")
def test_ddim_determinism(criterion_detail):
    t0 = time.perf_counter()
    sched = D.make_schedule()
    model, _ = D.train_denoiser(datagen.gen_real(64, 0), sched, epochs=2, hidden=(32,),
                                batch_size=32)
    ok = True
    for steps in (10, 50):
        s = sched.with_subset(steps)
        runs = [D.generate(model, s, n=8, seed=5) for _ in range(3)]
        same = all(r.tobytes() == runs[0].tobytes() for r in runs)
        ok &= _check(criterion_detail, same, f"{steps} steps bit-identical x3")
    elapsed = time.perf_counter() - t0
    ok &= _check(criterion_detail, elapsed < 5, f"{elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(7, "loss structure")
def test_loss_structure(criterion_detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    sym = det.AsymmetricLossConfig(m0=1.0, m1=1.0)
    asym = det.AsymmetricLossConfig()
    worst = 0.0
    scale_exact = lam_exact = True
    for _ in range(100):
        B = int(rng.integers(2, 10))
        f, y = rng.normal(size=(B, 4)), rng.integers(0, 2, B)
        got = det.asymmetric_contrastive_loss(f, y, sym)[0]
        worst = max(worst, abs(got - symmetric_hinge(f, y)))
        base = det.asymmetric_contrastive_loss(f, y, asym)[0]
        g = f * 2.0 ** rng.integers(-8, 9, (B, 1))
        scale_exact &= det.asymmetric_contrastive_loss(g, y, asym)[0] == base
        logits = rng.normal(size=(B, 2))
        ce = det.cross_entropy(logits, y)[0]
        lam_exact &= det.total_loss(logits, f, y, det.AsymmetricLossConfig(lam=0.0))[0] == ce
    elapsed = time.perf_counter() - t0
    ok = _check(criterion_detail, worst <= 1e-12, f"symmetric reduction max diff {worst:.1e}")
    ok &= _check(criterion_detail, scale_exact, "per-sample scaling leaves loss unchanged")
    ok &= _check(criterion_detail, lam_exact, "lambda=0 equals cross-entropy")
    ok &= _check(criterion_detail, elapsed < 5, f"{elapsed:.2f}s")
    assert ok


@pytest.mark.criterion(8, "metric oracles")
def test_metric_oracles(criterion_detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    score_lists = [rng.uniform(size=8), np.round(rng.uniform(size=8), 1),
                   np.array([0.5] * 4 + [0.2, 0.8, 0.2, 0.8])]
    worst, n = 0.0, 0
    for scores in score_lists:
        for bits in range(1, 2 ** 8 - 1):
            labels = [(bits >> k) & 1 for k in range(8)]
            worst = max(worst, abs(average_precision(scores, labels) - brute_ap(scores, labels)),
                        abs(auroc(scores, labels) - brute_auroc(scores, labels)))
            n += 1
    hand = [accuracy_at_threshold([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1]) == 0.5,
            accuracy_at_threshold([0.5, 0.49, 0.51], [1, 0, 1]) == 1.0,
            accuracy_at_threshold([0.5, 0.5], [0, 0]) == 0.0]
    elapsed = time.perf_counter() - t0
    ok = _check(criterion_detail, worst <= 1e-12, f"{n} labelings, max diff {worst:.1e}")
    ok &= _check(criterion_detail, all(hand), "ACC hand counts")
    ok &= _check(criterion_detail, elapsed < 10, f"{elapsed:.2f}s")
    assert ok


# -- desk-scale pipeline -----------------------------------------------------

@pytest.fixture(scope="module")
def seed_runs(reference_run):
    """Real + generator-A maps for every seed (seed 0 reuses the full run)."""
    runs = {0: reference_run}
    for s in SEEDS[1:]:
        runs[s] = harness.run_pipeline(harness.PipelineConfig(seed=s), with_detector=False,
                                       tags=("A",))
    return runs


@pytest.fixture(scope="module")
def manifest_dir(request):
    out = request.config.rootpath / "runs" / "acceptance"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seconds(res):
    return sum(s["seconds"] for s in res.manifest.stages)


@pytest.mark.slow
@pytest.mark.criterion(9, "epistemic separates real from fake better than reconstruction error")
def test_trend_reproduction(seed_runs, criterion_detail):
    wins = 0
    for s, res in seed_runs.items():
        sep = res.manifest.metrics["separability"]
        gu, gr = sep["epistemic"]["gap"], sep["recon"]["gap"]
        wins += abs(gu) > abs(gr)
        _check(criterion_detail, abs(gu) > abs(gr), f"seed {s}: |gap U| {abs(gu):.2f} "
               f"vs |gap R| {abs(gr):.2f}")
    ok = _check(criterion_detail, wins >= 2, f"(a) holds for {wins}/3 seeds")
    sep0 = seed_runs[0].manifest.metrics["separability"]
    a_auc, u_auc = sep0["aleatoric"]["auroc"], sep0["epistemic"]["auroc"]
    ok &= _check(criterion_detail, 0.4 <= a_auc <= 0.6, f"(b) aleatoric AUROC {a_auc:.3f}")
    ok &= _check(criterion_detail, u_auc >= 0.75, f"(b) epistemic AUROC {u_auc:.3f}")
    minutes = _seconds(seed_runs[0]) / 60
    ok &= _check(criterion_detail, minutes < 30, f"seed-0 pipeline {minutes:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(10, "cross-generator generalization")
def test_cross_generator(reference_run, manifest_dir, criterion_detail):
    per = reference_run.report.per_generator
    ok = True
    for tag in ("B", "C"):
        ok &= _check(criterion_detail, per[tag]["auroc"] >= 0.7,
                     f"AUROC on {tag} {per[tag]['auroc']:.3f}")
    rows = harness.sweep("m0", M0_GRID, reference_run.cfg, reference_run,
                         manifest_dir / "sweep_m0.csv")
    accs = [r["acc_at_half"] for r in rows]
    interior = harness.interior_optimum(M0_GRID, accs)
    man = reference_run.manifest
    man.metrics["sweep_m0"] = {"rows": rows, "interior_optimum": interior}
    man.notes.append("m0 interior optimum is advisory at desk scale")
    man.save(manifest_dir / "manifest_seed0.json")
    _check(criterion_detail, True, "m0 ACC " + " ".join(f"{a:.3f}" for a in accs)
           + f", interior optimum {interior} (advisory)")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(11, "robustness to the noising step t")
def test_t_robustness(reference_run, manifest_dir, criterion_detail):
    rows = harness.sweep("t", T_GRID, reference_run.cfg, reference_run,
                         manifest_dir / "sweep_t.csv")
    accs = [r["acc_at_half"] for r in rows]
    spread = 100 * (max(accs) - min(accs))
    man = reference_run.manifest
    man.metrics["sweep_t"] = {"rows": rows, "acc_spread_points": spread}
    man.save(manifest_dir / "manifest_seed0.json")
    ok = _check(criterion_detail, spread <= 10, "ACC " + " ".join(f"{a:.3f}" for a in accs)
                + f", spread {spread:.1f} points")
    assert ok
