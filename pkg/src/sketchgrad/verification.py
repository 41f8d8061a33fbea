"""Seeded Monte-Carlo property suites behind the ``verify`` command.

Each suite re-checks the probabilistic guarantees and exact identities
the library is built around, printing measured rates against their
bounds. The same functions back the acceptance tests, so the command
line and the test suite cannot drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .compressors import (
    ProtocolConfig,
    sequential_mean,
    sign_compress,
    sketched_topk_aggregate,
    sketched_topk_aggregate_scaled,
    top_k,
)
from .optimizers import (
    DenseAmsgradState,
    GAServerState,
    GAWorkerState,
    HyperParams,
    PAWorkerState,
    dense_amsgrad_step,
    ga_step,
    pa_step,
    step_size,
)
from .sketch import CountSketch, SketchConfig, sketch_vector
from .simulation import ProblemSpec, RunConfig, run

DELTA = 0.05  # failure-probability budget shared by the probabilistic checks


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return (
            f"[{status}] {self.suite}/{self.name}: measured {self.measured:.6g} "
            f"vs bound {self.bound:.6g}{extra}"
        )


def _planted_vectors(
    rng: np.random.Generator,
    n_workers: int,
    dim: int,
    n_heavy: int,
    heavy_low: float = 5.0,
    heavy_high: float = 15.0,
    noise: float = 0.5,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Worker vectors sharing a planted heavy support over a dense
    Gaussian background; returns (vectors, planted indices)."""
    support = rng.choice(dim, size=n_heavy, replace=False)
    base = np.zeros(dim)
    base[support] = rng.uniform(heavy_low, heavy_high, n_heavy) * rng.choice(
        [-1.0, 1.0], n_heavy
    )
    vectors = [base + noise * rng.standard_normal(dim) for _ in range(n_workers)]
    return vectors, support


# ---------------------------------------------------------------- sketch


def point_query_failure_rates(
    seed: int, trials: int = 500, dim: int = 10_000, rows: int = 7, cols: int = 2000
) -> tuple[float, float]:
    """Monte-Carlo failure rates of the point-query guarantees on random
    Gaussian vectors, one queried coordinate per trial.

    Returns (amplitude rate, squared rate): the amplitude form tests
    |est - x_i| <= eps*norm2(x) with eps = 60/c (the Theta(1/eps) column
    constant chosen for the reference shape), the squared form tests
    |est^2 - x_i^2| <= eps*norm2(x)^2 with eps = 3/c.
    """
    eps_amp = 60.0 / cols
    eps_sq = 3.0 / cols
    fails_amp = fails_sq = 0
    for trial in range(trials):
        trng = np.random.default_rng([seed, 17, trial])
        x = trng.standard_normal(dim)
        cfg = SketchConfig(rows=rows, cols=cols, seed=int(trng.integers(1 << 62)), dim=dim)
        sk = sketch_vector(cfg, x)
        i = int(trng.integers(dim))
        est = sk.estimate(i)
        nrm2 = float(np.dot(x, x))
        if abs(est - x[i]) > eps_amp * math.sqrt(nrm2):
            fails_amp += 1
        if abs(est * est - x[i] * x[i]) > eps_sq * nrm2:
            fails_sq += 1
    return fails_amp / trials, fails_sq / trials


def sketch_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    # determinism: same config on fresh objects gives identical tables
    cfg = SketchConfig(rows=5, cols=64, seed=seed ^ 0xABCDEF, dim=512)
    v = rng.standard_normal(512)
    same = np.array_equal(sketch_vector(cfg, v).table, sketch_vector(cfg, v).table)
    results.append(CheckResult("sketch", "determinism", same, float(same), 1.0))

    # bucket uniformity: chi-square over 256 buckets
    from .sketch import _cell_hash  # vectorized path for speed

    cfg_u = SketchConfig(rows=1, cols=256, seed=seed + 1, dim=100_000)
    h_all = _cell_hash(cfg_u, 0, np.arange(100_000, dtype=np.uint64))
    buckets = ((h_all >> np.uint64(32)) % np.uint64(256)).astype(np.int64)
    counts = np.bincount(buckets, minlength=256)
    _, pvalue = stats.chisquare(counts)
    results.append(
        CheckResult("sketch", "bucket_uniformity_chi2", pvalue > 0.01, pvalue, 0.01,
                    "p-value must exceed bound")
    )

    # sign balance
    signs = np.where((h_all & np.uint64(1)) == 0, 1.0, -1.0)
    bias = abs(float(np.mean(signs)))
    results.append(CheckResult("sketch", "sign_balance", bias < 0.02, bias, 0.02))

    # single nonzero coordinate estimated exactly
    cfg_s = SketchConfig(rows=4, cols=32, seed=seed + 2, dim=1000)
    sk = CountSketch(cfg_s).accumulate(123, -2.5)
    err = abs(sk.estimate(123) + 2.5)
    results.append(CheckResult("sketch", "single_item_exact", err == 0.0, err, 0.0))

    # linearity of the table under random combinations
    worst = 0.0
    cfg_l = SketchConfig(rows=5, cols=50, seed=seed + 3, dim=300)
    for _ in range(20):
        x, y = rng.standard_normal(300), rng.standard_normal(300)
        a, b = rng.uniform(-3, 3), rng.uniform(-3, 3)
        lhs = sketch_vector(cfg_l, a * x + b * y).table
        rhs = a * sketch_vector(cfg_l, x).table + b * sketch_vector(cfg_l, y).table
        scale_ref = max(1.0, float(np.max(np.abs(rhs))))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale_ref)
    results.append(CheckResult("sketch", "table_linearity", worst <= 1e-12, worst, 1e-12))

    # merging n sketches equals sketching the summed vector
    vecs = [rng.standard_normal(300) for _ in range(8)]
    merged = CountSketch(cfg_l)
    for w in vecs:
        merged.table += sketch_vector(cfg_l, w).table
    total = np.zeros(300)
    for w in vecs:
        total = total + w
    direct = sketch_vector(cfg_l, total).table
    scale_ref = max(1.0, float(np.max(np.abs(direct))))
    err = float(np.max(np.abs(merged.table - direct))) / scale_ref
    results.append(CheckResult("sketch", "merge_equals_sum", err <= 1e-12, err, 1e-12))

    # point queries on random gaussian vectors at the reference shape
    trials = 500
    rate_amp, rate_sq = point_query_failure_rates(seed, trials=trials)
    results.append(
        CheckResult("sketch", "point_query_amplitude", rate_amp <= DELTA,
                    rate_amp, DELTA, f"eps = 60/c over {trials} trials")
    )
    results.append(
        CheckResult("sketch", "point_query_squared", rate_sq <= DELTA,
                    rate_sq, DELTA, "|est^2 - x_i^2| <= (3/c)*norm2(x)^2")
    )
    d, r, c = 10_000, 7, 2000

    # planted heavy coordinates are recovered among the top candidates;
    # heavies sit at >= 10 so they clear the l2-tail noise floor
    # norm2(x)/sqrt(c) that the point-query guarantee allows
    recovered = 0
    trials_rec = 200
    for trial in range(trials_rec):
        trng = np.random.default_rng([seed, 23, trial])
        base = trng.standard_normal(d)
        support = trng.choice(d, size=10, replace=False)
        base[support] = trng.uniform(10, 20, 10) * trng.choice([-1.0, 1.0], 10)
        cfg_p = SketchConfig(rows=r, cols=c, seed=int(trng.integers(1 << 62)), dim=d)
        cand = sketch_vector(cfg_p, base).heavy_candidates(20)
        if np.isin(support, cand).all():
            recovered += 1
    results.append(
        CheckResult("sketch", "planted_recovery", recovered / trials_rec >= 1 - DELTA,
                    recovered / trials_rec, 1 - DELTA, "10 planted, m=20")
    )
    return results


# ------------------------------------------------------------ compressor


def _contraction_trial(
    trial: int, seed: int, scaled: bool
) -> tuple[bool, bool, bool]:
    """One aggregation trial; returns (lemma bound holds, safety bound
    holds, mean consistency exact)."""
    d, r, c, k, p, n = 10_000, 7, 2000, 100, 4, 4
    rng = np.random.default_rng([seed, 31 if scaled else 29, trial])
    vectors, _ = _planted_vectors(rng, n, d, k)
    cfg = ProtocolConfig(
        k=k, p_factor=p, sketch=SketchConfig(rows=r, cols=c, seed=int(rng.integers(1 << 62)), dim=d)
    )
    if scaled:
        v_hat = np.exp(rng.uniform(math.log(1e-2), math.log(1e2), d))
        agg = sketched_topk_aggregate_scaled(vectors, v_hat, cfg)
        root = np.sqrt(v_hat)
        target = sequential_mean(vectors) / root
        approx = agg.global_update.densify() / root
    else:
        agg = sketched_topk_aggregate(vectors, cfg)
        target = sequential_mean(vectors)
        approx = agg.global_update.densify()
    diff = approx - target
    err_sq = float(np.dot(diff, diff))
    tgt_sq = float(np.dot(target, target))
    lemma = err_sq <= (1.0 - k / d) * tgt_sq
    safety = math.sqrt(err_sq) <= math.sqrt(tgt_sq)
    mean_dense = sequential_mean([u.densify() for u in agg.per_worker_updates])
    consistent = np.array_equal(mean_dense, agg.global_update.densify())
    return lemma, safety, consistent


def contraction_check(seed: int, trials: int = 500, scaled: bool = False) -> tuple[float, float, float]:
    """Frequencies of (lemma contraction, unconditional safety, exact
    mean consistency) over seeded planted-support aggregation trials."""
    lemma = safety = consistent = 0
    for trial in range(trials):
        ok_l, ok_s, ok_c = _contraction_trial(trial, seed, scaled)
        lemma += ok_l
        safety += ok_s
        consistent += ok_c
    return lemma / trials, safety / trials, consistent / trials


def compressor_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    # top_k against a python sorted() oracle
    ok = True
    for _ in range(200):
        d = int(rng.integers(1, 40))
        v = np.round(rng.standard_normal(d), 1)  # rounding forces ties
        k = int(rng.integers(1, d + 1))
        got = top_k(v, k)
        oracle = sorted(range(d), key=lambda i: (-abs(v[i]), i))[:k]
        ok &= sorted(oracle) == got.indices.tolist()
        ok &= np.array_equal(v[np.sort(oracle)], got.values)
    results.append(CheckResult("compressor", "top_k_vs_oracle", ok, float(ok), 1.0))

    # sign compressor contract on random vectors
    violations = 0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(1, 200))) * rng.uniform(0.1, 10)
        cx = sign_compress(x)
        lhs = float(np.sum((cx - x) ** 2))
        norm_sq = float(np.sum(x * x))
        rhs = norm_sq - float(np.sum(np.abs(x))) ** 2 / x.size
        if lhs > rhs + 1e-12 * max(1.0, norm_sq):
            violations += 1
    results.append(CheckResult("compressor", "sign_compress_bound", violations == 0,
                               float(violations), 0.0))

    # lemma contraction + unconditional safety + mean consistency, raw space
    trials = 500
    lemma, safety, consistent = contraction_check(seed, trials=trials, scaled=False)
    results.append(
        CheckResult("compressor", "contraction_lemma", lemma >= 1 - DELTA, lemma, 1 - DELTA,
                    f"{trials} planted trials, d=10^4 k=100")
    )
    results.append(
        CheckResult("compressor", "unconditional_safety", safety == 1.0, safety, 1.0)
    )
    results.append(
        CheckResult("compressor", "mean_consistency", consistent == 1.0, consistent, 1.0)
    )

    # same properties through the v_hat-scaled route
    lemma_s, safety_s, _ = contraction_check(seed, trials=200, scaled=True)
    results.append(
        CheckResult("compressor", "contraction_lemma_scaled", lemma_s >= 1 - DELTA,
                    lemma_s, 1 - DELTA, "log-uniform v_hat")
    )
    results.append(
        CheckResult("compressor", "unconditional_safety_scaled", safety_s == 1.0, safety_s, 1.0)
    )

    # communication accounting on one aggregation
    d_small = 200
    cfg = ProtocolConfig(
        k=10, p_factor=4, sketch=SketchConfig(rows=5, cols=50, seed=seed, dim=d_small)
    )
    agg = sketched_topk_aggregate([rng.standard_normal(d_small) for _ in range(3)], cfg)
    expect_up = 5 * 50 + 4 * 10
    acct = agg.upstream_scalars == expect_up and agg.downstream_scalars == 10
    results.append(CheckResult("compressor", "accounting", acct, float(acct), 1.0,
                               "upstream r*c + P*k, downstream k"))
    return results


# ------------------------------------------------------------- optimizer


def ga_dense_gap(
    seed: int,
    epsilon: float,
    steps: int = 100,
    dim: int = 50,
    n: int = 4,
    lag_first_variance: bool = False,
) -> float:
    """Max per-coordinate gap between GA at k = dim and a dense AMSGrad
    recursion over a shared random gradient sequence.

    With lag_first_variance the oracle's variance update skips the first
    gradient, mirroring the empty initial index set of the sketched
    server; that form matches at any epsilon. The plain form matches
    when epsilon dominates the squared gradients.
    """
    rng = np.random.default_rng(seed)
    hp = HyperParams(alpha=0.05, beta1=0.9, beta2=0.999, epsilon=epsilon,
                     horizon=steps, n_workers=n)
    cfg = ProtocolConfig(
        k=dim, p_factor=1, sketch=SketchConfig(rows=3, cols=32, seed=seed, dim=dim)
    )
    server = GAServerState.initial(np.zeros(dim), epsilon)
    workers = [GAWorkerState.initial(dim) for _ in range(n)]
    x = np.zeros(dim)
    m = np.zeros(dim)
    v = np.full(dim, epsilon)
    v_hat = np.full(dim, epsilon)
    alpha_t = step_size(hp, "ga")
    worst = 0.0
    for t in range(1, steps + 1):
        grads = [rng.standard_normal(dim) for _ in range(n)]
        ga_step(workers, server, grads, hp, cfg, t)
        g = sequential_mean(grads)
        m = hp.beta1 * m + (1 - hp.beta1) * g
        gv = np.zeros(dim) if (lag_first_variance and t == 1) else g
        v = hp.beta2 * v + (1 - hp.beta2) * gv * gv
        v_hat = np.maximum(v_hat, v)
        x = x - alpha_t * m / np.sqrt(v_hat)
        worst = max(worst, float(np.max(np.abs(server.x - x))))
    return worst


def shadow_gap_run(variant: str, seed: int, horizon: int = 300) -> float:
    """Largest shadow-identity violation over a noisy-quadratic run."""
    spec = ProblemSpec(kind="quadratic", dim=200, condition_number=10.0, noise_std=2.0)
    config = RunConfig(
        problem=spec, variant=variant, alpha=0.05, epsilon=1e-4, horizon=horizon,
        n_workers=4, k=20, p_factor=4, rows=5, cols=50, batch_size=16, seed=seed,
        check_invariants=True,
    )
    _, records = run(config)
    return max(r.shadow_gap for r in records)


def optimizer_suite(seed: int = 0) -> list[CheckResult]:
    results = []

    gap_plain = ga_dense_gap(seed, epsilon=100.0)
    results.append(
        CheckResult("optimizer", "ga_equals_dense_at_full_k", gap_plain <= 1e-12,
                    gap_plain, 1e-12, "epsilon above gradient scale")
    )
    gap_lag = ga_dense_gap(seed, epsilon=1e-8, lag_first_variance=True)
    results.append(
        CheckResult("optimizer", "ga_equals_lagged_dense", gap_lag <= 1e-12,
                    gap_lag, 1e-12, "first-step variance lag, epsilon 1e-8")
    )

    for variant in ("pa", "ga"):
        gap = shadow_gap_run(variant, seed)
        results.append(
            CheckResult("optimizer", f"{variant}_shadow_identity", gap <= 1e-9, gap, 1e-9)
        )

    # v_hat never decreases across random steps
    rng = np.random.default_rng(seed)
    dim, n = 30, 3
    hp = HyperParams(alpha=0.1, beta1=0.9, beta2=0.99, epsilon=1e-8, horizon=1000, n_workers=n)
    cfg = ProtocolConfig(k=3, p_factor=4, sketch=SketchConfig(rows=3, cols=16, seed=seed, dim=dim))
    pa_states = [PAWorkerState.initial(dim, hp.epsilon) for _ in range(n)]
    server = GAServerState.initial(np.zeros(dim), hp.epsilon)
    ga_states = [GAWorkerState.initial(dim) for _ in range(n)]
    dense = DenseAmsgradState.initial(np.zeros(dim), hp.epsilon)
    x = np.zeros(dim)
    monotone = True
    ortho = True
    for t in range(1, 1001):
        grads = [rng.standard_normal(dim) for _ in range(n)]
        prev = [w.v_hat.copy() for w in pa_states] + [server.v_hat.copy(), dense.v_hat.copy()]
        pa_step(pa_states, x, grads, hp, cfg, t)
        ga_step(ga_states, server, grads, hp, cfg, t)
        dense_amsgrad_step(dense, grads, hp, t)
        now = [w.v_hat for w in pa_states] + [server.v_hat, dense.v_hat]
        monotone &= all(np.all(b >= a) for a, b in zip(prev, now))
        ortho &= all(np.all(w.e[server.last_indices] == 0.0) for w in ga_states)
    results.append(CheckResult("optimizer", "v_hat_monotone", monotone, float(monotone), 1.0,
                               "1000 random steps, pa+ga+dense"))
    results.append(CheckResult("optimizer", "ga_error_zero_on_chosen", ortho, float(ortho), 1.0))

    # fixed seeds give bit-identical trajectories
    spec = ProblemSpec(kind="quadratic", dim=60, condition_number=5.0, noise_std=1.0)
    config = RunConfig(problem=spec, variant="ga", alpha=0.05, epsilon=1e-4, horizon=40,
                       n_workers=4, k=6, p_factor=4, rows=5, cols=30, seed=seed)
    xa, ra = run(config)
    xb, rb = run(config)
    same = np.array_equal(xa, xb) and ra == rb
    results.append(CheckResult("optimizer", "trajectory_determinism", same, float(same), 1.0))
    return results


SUITES = {
    "sketch": sketch_suite,
    "compressor": compressor_suite,
    "optimizer": optimizer_suite,
}


def run_suites(names: list[str], seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names:
        results.extend(SUITES[name](seed))
    return results
