"""Acceptance criteria 1-8.

Criteria 7 and 8 are judged on result tables written by the CLI (see
README); set ``BEAMFORM_ACCEPTANCE_FULL=1`` to regenerate them inside the
test instead.  Either way one solve per table is re-run here and must match
the stored trajectory bit for bit, so a stale table cannot pass.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from beamform import bench
from beamform.channel import (CMat, SolverState, SystemConfig, generate_channels, mse, power, project_power,
                              random_feasible_v, weighted_sum_rate)
from beamform.gradcheck import run_all
from beamform.meta import (MlbfConfig, MlbfIterate, ProblemGraph, make_learners, outer_step,
                           solve_mlbf)
from beamform.rng import Stream, derive_seed
from beamform.wmmse import WmmseConfig, solve_wmmse, update_u, update_w, wmmse_round

from conftest import ACCEPTANCE_LINES

RESULTS = Path(__file__).resolve().parent.parent / 'results'
FULL = os.environ.get('BEAMFORM_ACCEPTANCE_FULL') == '1'

C7_SPEC = bench.ExperimentSpec(snr_db_list=[10.0, 30.0], n_channels=50, n_restarts=3,
                               mlbf=MlbfConfig(T=500))
C8_SPEC = bench.ExperimentSpec.desk()


def report(n, passed, detail):
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


# --- shared solver runs (also audited for feasibility by criterion 5) ---------------

# iteration cap high enough that every solve stops on the eps rule; an L = 100
# run is the first 100 entries of the same trajectory
UNCAPPED = WmmseConfig(max_iters=5000)


@pytest.fixture(scope='module')
def wmmse_runs():
    runs = []
    for snr in (10.0, 30.0):
        cfg = SystemConfig.from_snr(4, 4, snr)
        for k, H in enumerate(generate_channels(cfg, 100, 3)):
            state, traj = solve_wmmse(H, random_feasible_v(cfg, 3, 1, k), cfg, UNCAPPED)
            runs.append((cfg, H, state, traj))
    return runs


@pytest.fixture(scope='module')
def mrt_runs():
    cfg = SystemConfig.from_snr(4, 1, 10.0)
    return [(cfg, H, *solve_wmmse(H, random_feasible_v(cfg, 4, 1, k), cfg))
            for k, H in enumerate(generate_channels(cfg, 50, 4))]


@pytest.fixture(scope='module')
def mlbf_runs():
    cfg = SystemConfig.from_snr(4, 4, 10.0)
    H = generate_channels(cfg, 1, 5)[0]
    V0 = random_feasible_v(cfg, 5, 1)
    mcfg = MlbfConfig(T=50)
    return cfg, H, V0, [solve_mlbf(H, V0, cfg, mcfg, seed=9) for _ in range(2)]


def load_or_run(spec, name):
    path = RESULTS / f'{name}.csv'
    if FULL:
        result = bench.run_experiment(spec)
        assert not result.failures, result.failures
        bench.write_rows(result.rows, path)
    if not path.exists():
        pytest.fail(f"{path} is missing; produce it with the command in README.md "
                    "or set BEAMFORM_ACCEPTANCE_FULL=1")
    return bench.read_rows(path)


def check_table(rows, spec, snr_db, channel_id=0, restart_id=0):
    """Table covers the experiment grid and one stored solve of each algorithm reproduces exactly."""
    keys = {r.key for r in rows}
    expected = {(s, c, r, a) for s in spec.snr_db_list for c in range(spec.n_channels)
                for r in range(spec.n_restarts) for a in spec.algos}
    assert keys == expected, "result table does not match the experiment spec"
    for algo in spec.algos:
        stored = [r.wsr for r in rows if r.key == (snr_db, channel_id, restart_id, algo)]
        cfg = spec.system(snr_db)
        H = generate_channels(cfg, spec.n_channels, spec.seed)[channel_id]
        V0 = bench.initial_beamformer(spec, cfg, channel_id, restart_id)
        if algo == 'wmmse':
            _, traj = solve_wmmse(H, V0, cfg, spec.wmmse)
        else:
            seed = derive_seed(spec.seed, 2, channel_id, restart_id)
            _, traj = solve_mlbf(H, V0, cfg, spec.mlbf, seed=seed)
        assert traj.wsr == stored, f"stored {algo} trajectory does not reproduce"


@pytest.fixture(scope='module')
def c7_rows():
    rows = load_or_run(C7_SPEC, 'criterion7')
    check_table(rows, C7_SPEC, 30.0)
    return rows


@pytest.fixture(scope='module')
def c8_rows():
    rows = load_or_run(C8_SPEC, 'desk')
    check_table(rows, C8_SPEC, 20.0)
    return rows


# --- criteria ----------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    results = run_all()
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst = {kind: max(r.error / r.tol for r in results if r.tol == tol)
             for kind, tol in (('subproblem', 1e-5), ('composite', 1e-6), ('window', 1e-3))}
    report(1, not failed and elapsed < 60.0,
           f"{len(results) - len(failed)}/{len(results)} checks, worst err/tol "
           + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s")


def test_criterion_2_wmmse_identities():
    stream = Stream(2, 2)
    worst_we, worst_rate = 0.0, 0.0
    for k in range(100):
        cfg = SystemConfig.from_snr(4, 4, float(k % 4) * 10.0)
        H = CMat.from_complex(stream.complex_normal((4, 4)))
        V = CMat.from_complex(stream.complex_normal((4, 4)) * np.sqrt(cfg.P / 16))
        u, w = update_u(H, V, cfg.sigma2), update_w(H, V, cfg.sigma2)
        worst_we = max(worst_we, np.max(np.abs(w * mse(H, V, u, cfg.sigma2) - 1.0)))
        worst_rate = max(worst_rate, abs(np.sum(np.log2(w)) - weighted_sum_rate(H, V, cfg)))
    report(2, worst_we <= 1e-10 and worst_rate <= 1e-9,
           f"max |w e - 1| = {worst_we:.1e} (tol 1e-10), max |sum log2 w - WSR| = {worst_rate:.1e} (tol 1e-9)")


def test_criterion_3_wmmse_monotone_and_fixed_point(wmmse_runs):
    worst_violation, worst_step = 0.0, 0.0
    converged = sum(traj.converged for *_, traj in wmmse_runs)
    capped = sum(traj.iters_used > 100 for *_, traj in wmmse_runs)
    for cfg, H, state, traj in wmmse_runs:
        obj = np.asarray(traj.objective)
        rel = np.diff(obj) / np.abs(obj[:-1])
        worst_violation = max(worst_violation, float(np.max(rel, initial=0.0)))
        _, _, V_next, _ = wmmse_round(H, state.V, cfg)
        worst_step = max(worst_step, abs(weighted_sum_rate(H, V_next, cfg) - traj.wsr[-1]))
    report(3, worst_violation <= 1e-8 and worst_step <= 1e-4 and converged == len(wmmse_runs),
           f"{len(wmmse_runs)} solves ({converged} stopped on eps; {capped} need more than L=100), "
           f"worst relative objective increase {worst_violation:.1e} (tol 1e-8), "
           f"extra-round WSR change {worst_step:.1e} (tol 1e-4)")


def test_criterion_4_single_user_optimality(mrt_runs):
    worst = max(abs(traj.wsr[-1] - np.log2(1 + cfg.P * np.sum(np.abs(H.to_complex()) ** 2) / cfg.sigma2))
                for cfg, H, _, traj in mrt_runs)
    report(4, worst <= 1e-6, f"50 channels, max |WSR - log2(1 + P|h|^2/s2)| = {worst:.1e} (tol 1e-6)")


def test_criterion_5_constraint_safety(wmmse_runs, mrt_runs, mlbf_runs, c7_rows):
    excess = []
    for cfg, _, _, traj in wmmse_runs + mrt_runs:
        excess.append(max(traj.power) - cfg.P)
    cfg = mlbf_runs[0]
    excess += [max(traj.power) - cfg.P for _, traj in mlbf_runs[3]]
    excess += [r.power - C7_SPEC.system(r.snr_db).P for r in c7_rows]
    stream = Stream(5, 5)
    idempotent = True
    for k in range(1000):
        P = float(10 ** stream.uniform(1)[0] * 3 - 1)
        V = CMat.from_complex(stream.complex_normal((4, 4)) * 10 ** (stream.uniform(1)[0] * 4 - 2))
        once = project_power(V, P)
        twice = project_power(once, P)
        excess.append(power(once) - P)
        idempotent &= np.array_equal(once.re, twice.re) and np.array_equal(once.im, twice.im)
    worst = max(excess)
    report(5, worst <= 1e-9 and idempotent,
           f"{len(excess)} audited solves/projections, max Tr(VV^H) - P = {worst:.1e} (tol 1e-9), "
           f"idempotent on 1000 matrices: {idempotent}")


def test_criterion_6_mlbf_sanity(mlbf_runs):
    cfg, H, V0, runs = mlbf_runs
    mcfg = MlbfConfig(T=50)
    learners = make_learners(cfg, mcfg, (0,))
    for m in learners.values():
        m.zero_()
    problem = ProblemGraph(H, cfg)
    it = start = MlbfIterate.from_state(
        SolverState(V0, update_u(H, V0, cfg.sigma2), update_w(H, V0, cfg.sigma2)))
    for _ in range(50):
        it, _ = outer_step(it, problem, mcfg, learners)
    fixed = all(np.array_equal(getattr(it, b).value, getattr(start, b).value) for b in ('u', 'w', 'V'))
    (_, a), (_, b) = runs
    monotone = bool(np.all(np.diff(a.best_so_far) >= 0))
    identical = a.wsr == b.wsr and a.power == b.power and a.objective == b.objective
    report(6, fixed and monotone and identical,
           f"zero-theta fixed point over 50 steps: {fixed}, best-so-far non-decreasing: {monotone}, "
           f"two seeded runs bit-identical: {identical}")


def test_criterion_7_desk_scale_reproduction(c7_rows):
    ratio10, err10 = bench.paired_ratio(c7_rows, 10.0)
    ratio30, err30 = bench.paired_ratio(c7_rows, 30.0)
    summary = {(s.snr_db, s.algo): s for s in bench.summarize(c7_rows)}
    report('7a', ratio10 >= 0.95,
           f"SNR 10 dB: mean best WSR MLBF {summary[(10.0, 'mlbf')].mean_wsr:.3f} / "
           f"WMMSE {summary[(10.0, 'wmmse')].mean_wsr:.3f} = {ratio10:.4f} +- {err10:.4f} (need >= 0.95)")
    report('7b', ratio30 >= 1.0 - err30,
           f"SNR 30 dB: mean best WSR MLBF {summary[(30.0, 'mlbf')].mean_wsr:.3f} / "
           f"WMMSE {summary[(30.0, 'wmmse')].mean_wsr:.3f} = {ratio30:.4f} +- {err30:.4f} "
           f"(need >= {1.0 - err30:.4f})")


def test_criterion_8_monotone_snr_trend(c8_rows):
    summary = bench.summarize(c8_rows)
    ok, parts = True, []
    for algo in ('wmmse', 'mlbf'):
        means = [s.mean_wsr for snr in (0.0, 10.0, 20.0, 30.0) for s in summary
                 if s.snr_db == snr and s.algo == algo]
        ok &= len(means) == 4 and all(b > a for a, b in zip(means, means[1:]))
        parts.append(f"{algo} " + " < ".join(f"{m:.3f}" for m in means))
    report(8, ok, "desk set (20 channels, 3 restarts, T=200), SNR 0/10/20/30 dB: " + "; ".join(parts))
