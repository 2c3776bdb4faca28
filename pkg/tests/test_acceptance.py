"""Acceptance criteria 1-9, one verdict line each (see the terminal summary)."""

import hashlib
import math
import time

import numpy as np
import pytest

from shotfree import autodiff as ad
from shotfree.autodiff import Tensor
from shotfree.cli import main
from shotfree.data import Split, gen_synthetic, sample_episode_support_query, sample_episode_unsplit
from shotfree.experiments import read_rows, shot_mismatch
from shotfree.fewshot import DEFAULT_EPISODES, DEFAULT_QUERIES, Scenario, evaluate, solve_implicit_prototypes
from shotfree.gradcheck import run_suite
from shotfree.losses import center_loss, center_loss_gradients, collapse_demo, episode_loss
from shotfree.metric import MetricMap, PrototypeTable, chi, posterior
from shotfree.training import TrainConfig, meta_train


# 1 ------------------------------------------------------------------------------


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    res = run_suite(seed=0)
    secs = time.perf_counter() - t0
    names = {c.name for c in res.cases}
    ok = res.max_rel_error <= 1e-4 and secs < 30 and {"episode_loss", "center_loss", "relu", "sq_dists"} <= names
    assert criterion(1, ok, f"max rel err {res.max_rel_error:.2e} over {len(res.cases)} cases in {secs:.1f}s")


# 2 ------------------------------------------------------------------------------


def test_center_loss_collapse(criterion):
    rng = np.random.default_rng(0)
    x, c = rng.standard_normal((7, 3)), rng.standard_normal((2, 3))
    assign = np.array([0, 1, 1, 0, 0, 1, 0])
    xt, ct = Tensor(x, requires_grad=True), Tensor(c, requires_grad=True)
    with ad.Tape():
        ad.backward(center_loss(xt, ct, assign))
    gx, gc = center_loss_gradients(x, c, assign)
    want_gx = 2 * (x - c[assign])
    want_gc = np.stack([-2 * (x[assign == k] - c[k]).sum(axis=0) for k in range(2)])
    grad_err = max(np.max(np.abs(gx - want_gx)), np.max(np.abs(gc - want_gc)),
                   np.max(np.abs(xt.grad - want_gx)), np.max(np.abs(ct.grad - want_gc)))

    center = collapse_demo(n_points=10, steps=2000)
    contrast = collapse_demo(n_points=10, steps=2000, objective="episode", lam=1.0)
    ok = (not center.diverged and center.final_spread < 1e-3 and center.final_loss < 1e-6 and grad_err <= 1e-14
          and contrast.final_spread > 0.1)
    assert criterion(2, ok, f"spread {center.final_spread:.1e}, loss {center.final_loss:.1e}, gradient err "
                            f"{grad_err:.1e}, episode-loss spread {contrast.final_spread:.2f}")


# 3 ------------------------------------------------------------------------------

GRID_STEP = 1e-3


def grid_oracle(phi, y, s):
    """Exhaustive search of the 2-way objective over prototype angle pairs on a 1e-3 rad grid."""
    theta = np.arange(0.0, 2 * np.pi, GRID_STEP)
    tab = s * s * np.cos(phi[:, None] - theta[None, :])
    best = (np.inf, 0.0, 0.0)
    for a0 in range(0, theta.size, 256):
        blk = slice(a0, a0 + 256)
        total = np.zeros((tab[:, blk].shape[1], theta.size))
        for j in range(len(phi)):
            l0, l1 = tab[j, blk][:, None], tab[j][None, :]
            own, other = (l0, l1) if y[j] == 0 else (l1, l0)
            total += np.logaddexp(0.0, other - own)
        i = np.unravel_index(np.argmin(total), total.shape)
        if total[i] < best[0]:
            best = (float(total[i]), theta[a0 + i[0]], theta[i[1]])
    return best


def test_implicit_prototypes_match_grid_oracle(criterion):
    rng = np.random.default_rng(2024)
    gaps, angle_errs = [], []
    for _ in range(20):
        n0, n1 = rng.integers(1, 4, size=2)
        centers = rng.uniform(0, 2 * np.pi) + np.array([0.0, rng.uniform(np.pi / 3, np.pi)])
        phi = np.concatenate([centers[0] + 0.3 * rng.standard_normal(n0), centers[1] + 0.3 * rng.standard_normal(n1)])
        y = np.array([0] * n0 + [1] * n1)
        s = rng.uniform(0.7, 2.0)
        u = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        c, info = solve_implicit_prototypes(u, y, [0, 1], s, warn=False)
        best, t0, t1 = grid_oracle(phi, y, s)
        gaps.append(abs(info.final_loss - best))
        ang = np.arctan2(c[:, 1], c[:, 0])
        angle_errs.extend(abs((a - t + np.pi) % (2 * np.pi) - np.pi) for a, t in zip(ang, (t0, t1)))
    ok = max(gaps) <= 1e-4
    assert criterion(3, ok, f"20 tasks, worst objective gap {max(gaps):.1e}, worst angle gap "
                            f"{max(angle_errs):.1e} rad")


# 4 ------------------------------------------------------------------------------


def test_metric_identity_and_posterior(criterion):
    rng = np.random.default_rng(7)
    chi_err = post_err = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 6))
        mu = d * int(rng.integers(1, 4))
        z = rng.standard_normal(d)
        W = rng.standard_normal((mu, d))
        c = rng.standard_normal(mu)
        c /= np.linalg.norm(c)
        s = float(rng.uniform(0.1, 10.0))
        metric = MetricMap(Tensor(W))
        u = W @ z / np.linalg.norm(W @ z)
        cos = float(u @ c)
        direct = float(np.sum((s * u - s * c) ** 2))
        chi_err = max(chi_err, abs(chi(z, c, metric, s) - direct) / max(1.0, direct),
                      abs(direct - 2 * s * s * (1 - cos)) / max(1.0, direct))
        k = int(rng.integers(2, 6))
        cs = rng.standard_normal((k, mu))
        cs /= np.linalg.norm(cs, axis=1, keepdims=True)
        logits = s * s * (cs @ u)
        want = np.exp(logits - logits.max())
        want /= want.sum()
        got = posterior(z[None, :], PrototypeTable(list(range(k)), Tensor(cs)), metric, s)
        post_err = max(post_err, float(np.max(np.abs(np.asarray(got).reshape(-1) - want))))
    ok = chi_err <= 1e-10 and post_err <= 1e-10
    assert criterion(4, ok, f"1000 samples, chi err {chi_err:.1e}, posterior err {post_err:.1e}")


# 5 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_shot_free_property(criterion):
    t0 = time.perf_counter()
    results = [shot_mismatch(seed, workers=4) for seed in range(10)]
    secs = time.perf_counter() - t0
    passed = sum(r.passed for r in results)
    for r in results:
        print(r.summary())
    ok = passed >= 7 and secs < 20 * 60
    assert criterion(5, ok, f"{passed}/10 paired seeds pass, {secs / 60:.1f} min")


# 6 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_end_to_end_accuracy(criterion):
    ds = gen_synthetic(seed=0)
    cfg = TrainConfig(max_iterations=500, validation_interval=100, seed=0)
    ck, _ = meta_train(ds, cfg)
    rep = evaluate(ck, ds, Scenario(5, 1), seed=0)
    ok = rep.episodes == 2000 and rep.accuracy >= 0.9 and rep.ci95 < 0.01
    assert criterion(6, ok, f"5-way 1-shot NOVEL accuracy {rep.accuracy:.4f} +- {rep.ci95:.4f} over "
                            f"{rep.episodes} episodes after {cfg.max_iterations} iterations")


# 7 ------------------------------------------------------------------------------


def test_mu_factor_ablation_is_deterministic(criterion, tmp_path):
    assert main(["gen-data", "--out-dir", str(tmp_path / "data")]) == 0
    data = str(tmp_path / "data" / "dataset.csv")
    flags = ["ablate", "--axis", "mu-factor", "--data", data, "--iterations", "100", "--validation-interval", "50",
             "--val-episodes", "50", "--episodes", "500", "--seeds", "0"]
    digests, rows = [], None
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(flags + ["--out-dir", str(out)]) == 0
        digests.append(hashlib.sha256((out / "ablation.csv").read_bytes()).hexdigest())
        rows = read_rows(out / "ablation.csv")
    ok = [r["value"] for r in rows] == [1, 2, 5, 10] and digests[0] == digests[1]
    acc = ", ".join(f"{r['value']}x {r['accuracy']:.3f}" for r in rows)
    assert criterion(7, ok, f"4 rows ({acc}), rerun report identical: {digests[0] == digests[1]}")


# 8 ------------------------------------------------------------------------------


def _standardized_chi2(counts, expected):
    counts = np.asarray(counts, dtype=np.float64)
    df = counts.size - 1
    stat = float(np.sum((counts - expected) ** 2 / expected))
    return (stat - df) / math.sqrt(2 * df)


def test_protocol_defaults_and_sampler(criterion):
    from shotfree.cli import build_parser
    args = build_parser().parse_args(["eval-matrix"])
    defaults = (Scenario().episodes == DEFAULT_EPISODES == args.episodes == 2000
                and Scenario().queries == DEFAULT_QUERIES == args.test_queries == 30)

    ds = gen_synthetic(seed=0)
    novel = ds.classes(Split.NOVEL)
    rng = np.random.default_rng(0)
    class_counts = dict.fromkeys(novel, 0)
    row_counts = np.zeros(len(ds.labels))
    disjoint = True
    n_eps = 10000
    for _ in range(n_eps):
        ep = sample_episode_support_query(ds, Split.NOVEL, 5, 1, 30, rng)
        s_idx, _ = ep.support()
        q_idx, _ = ep.query()
        disjoint &= (np.intersect1d(s_idx, q_idx).size == 0 and len(set(ep.class_ids)) == 5
                     and set(ep.class_ids) <= set(novel) and len(np.unique(ep.indices())) == len(ep.indices()))
        for c in ep.class_ids:
            class_counts[c] += 1
        row_counts[s_idx] += 1
    z_class = _standardized_chi2(list(class_counts.values()), n_eps * 5 / len(novel))
    # support rows: one of the class' rows per selection of that class
    z_rows = max(_standardized_chi2(row_counts[ds.rows_of(c)], class_counts[c] / len(ds.rows_of(c))) for c in novel)
    rng = np.random.default_rng(1)
    base = ds.classes(Split.BASE)
    for _ in range(2000):
        ep = sample_episode_unsplit(ds, Split.BASE, 5, 16, rng)
        disjoint &= set(ep.class_ids) <= set(base) and len(np.unique(ep.indices())) == 5 * 16
    ok = defaults and disjoint and abs(z_class) <= 3 and abs(z_rows) <= 3
    assert criterion(8, ok, f"defaults 2000 episodes / 30 queries: {defaults}; disjoint: {disjoint}; "
                            f"uniformity z (classes) {z_class:.2f}, worst z (support rows) {z_rows:.2f}")


# 9 ------------------------------------------------------------------------------


def _unit_rows(v, k):
    return np.tile(v / np.linalg.norm(v), (k, 1))


def test_degenerate_solution_is_detected(criterion):
    rng = np.random.default_rng(3)
    errs = []
    stationary = 0.0
    flagged = True
    for k in (2, 5, 10):
        d = 4
        metric = MetricMap(Tensor(rng.standard_normal((2 * d, d))))
        labels = np.repeat(np.arange(k), 3)
        # every prototype starts at the same point, embeddings are arbitrary
        equal = PrototypeTable(list(range(k)), Tensor(_unit_rows(rng.standard_normal(2 * d), k)))
        z = Tensor(rng.standard_normal((len(labels), d)))
        rep = episode_loss(z, labels, equal, metric, 3.0, lam=0.0)
        errs += [abs(rep.cross_entropy - math.log(k)), abs(rep.entropy_term - math.log(k))]
        flagged &= rep.near_uniform_fraction == 1.0
        # with equal embeddings as well, the point is stationary
        zc = Tensor(np.tile(rng.standard_normal(d), (len(labels), 1)), requires_grad=True)
        table = PrototypeTable(list(range(k)), Tensor(_unit_rows(rng.standard_normal(2 * d), k), requires_grad=True))
        with ad.Tape():
            rep2 = episode_loss(zc, labels, table, metric, 3.0, lam=0.0)
            ad.backward(rep2.loss)
        stationary = max(stationary, float(np.max(np.abs(table.vectors.grad))), float(np.max(np.abs(zc.grad))))
    ok = max(errs) <= 1e-9 and flagged and stationary <= 1e-12
    assert criterion(9, ok, f"|CE - ln K|, |H - ln K| <= {max(errs):.1e} for K in (2, 5, 10); near-uniform flagged: "
                            f"{flagged}; gradient at the all-equal point {stationary:.1e}")
