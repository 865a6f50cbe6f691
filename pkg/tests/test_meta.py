import copy

import numpy as np
import pytest

from beamform import autodiff as ad
from beamform.channel import (CMat, SolverState, SystemConfig, generate_channels, global_loss, power,
                              random_feasible_v, weighted_sum_rate)
from beamform.errors import NumericError, PreconditionError, StateError
from beamform.gradcheck import central_difference, relative_error, window_setup
from beamform.meta import (MetaLearner, MlbfConfig, MlbfIterate, ProblemGraph, inner_loop,
                           lstm_update, make_learners, outer_step, solve_mlbf, window_update)
from beamform.rng import Stream
from beamform.wmmse import update_u, update_w


def mini(T=50, hidden=16, **kw):
    cfg = SystemConfig.from_snr(2, 2, 10.0)
    H = generate_channels(cfg, 1, 31)[0]
    V0 = random_feasible_v(cfg, 31, 1)
    return cfg, H, V0, MlbfConfig(T=T, hidden=hidden, **kw)


def wmmse_state(H, V, cfg):
    return SolverState(V, update_u(H, V, cfg.sigma2), update_w(H, V, cfg.sigma2))


# --- configuration and learners ----------------------------------------------------

def test_config_defaults():
    c = MlbfConfig()
    assert (c.T, c.K, c.I, c.J, c.t_u, c.hidden, c.layers) == (500, 10, 10, 10, 5, 200, 2)
    assert (c.lr_V, c.lr_u, c.lr_w, c.mu, c.out_scale) == (1e-4, 1e-4, 1e-4, 0.0, 1.0)
    assert c.detach_grads and c.projection == 'inner'
    assert [c.weight(t) for t in (1, 500)] == [1.0, 1.0]


@pytest.mark.parametrize('bad', [dict(T=0), dict(T=12, t_u=5), dict(projection='never'),
                                 dict(w_floor=0.0), dict(T=5, omega=[1.0, 2.0])])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        MlbfConfig(**{'T': 10, **bad})


def test_learner_sizes_and_init():
    cfg = SystemConfig.from_snr(4, 3, 10.0)
    learners = make_learners(cfg, MlbfConfig(hidden=12), (0,))
    assert {k: m.n_coords for k, m in learners.items()} == {'u': 6, 'w': 3, 'V': 24}
    m = learners['V']
    assert [W.shape for W in m.weights] == [(13, 48), (24, 48)]
    assert np.all(np.abs(m.weights[0].value) <= 1 / np.sqrt(12))
    assert np.array_equal(m.biases[0].value[12:24], np.ones(12))
    assert not np.any(m.head_W.value) and not np.any(m.head_b.value)
    thetas = [np.concatenate([p.value.ravel() for p in l.params]) for l in learners.values()]
    assert not np.array_equal(thetas[0][:100], thetas[1][:100])


def test_zero_theta_learner_outputs_zero():
    m = MetaLearner(5, hidden=4)
    m.zero_()
    delta, (h, c) = lstm_update(m, Stream(1).normal(5))
    assert np.array_equal(delta.value, np.zeros(5))
    assert all(not np.any(x.value) for x in h + c)


def test_state_shapes_preserved():
    m = MetaLearner(7, hidden=5, key=(2,))
    for k in range(10):
        _, (h, c) = lstm_update(m, Stream(3, k).normal(7))
    assert all(x.shape == (7, 5) for x in h + c) and len(h) == 2


def test_lstm_update_input_checks():
    m = MetaLearner(3, hidden=4)
    with pytest.raises(NumericError):
        lstm_update(m, np.array([0.0, np.nan, 1.0]))
    with pytest.raises(ValueError):
        lstm_update(m, np.zeros(4))


def test_lstm_theta_gradient_one_cell():
    m = MetaLearner(4, hidden=3, key=(5,))
    m.head_W.value = Stream(6).normal((3, 1))
    g = Stream(7).normal(4)
    target = Stream(8).normal(4)

    def loss_of(learner):
        learner.reset_state()
        delta, _ = lstm_update(learner, g)
        return ad.sum(ad.square(ad.sub(delta, target)))

    ad.backward(loss_of(m))
    for k, p in enumerate(m.params):
        def f(x, k=k):
            trial = copy.deepcopy(m)
            trial.params[k].value = x.reshape(p.shape)
            return float(loss_of(trial).value)
        assert relative_error(p.grad.ravel(), central_difference(f, p.value.ravel())) < 1e-5


# --- inner and outer steps ------------------------------------------------------

def test_zero_theta_inner_loop_is_noop():
    cfg, H, V0, mcfg = mini(hidden=4)
    problem = ProblemGraph(H, cfg)
    learners = make_learners(cfg, mcfg, (0,))
    it0 = MlbfIterate.from_state(wmmse_state(H, V0, cfg))
    for block, m in learners.items():
        m.zero_()
        it = inner_loop(block, it0, problem, mcfg, m, steps=7)
        assert np.array_equal(it.get(block).value, it0.get(block).value)


def test_w_clamp_never_below_floor():
    cfg, H, V0, mcfg = mini(hidden=4, w_floor=0.3)
    m = MetaLearner(cfg.N, hidden=4)
    m.head_b.value = np.array([-5.0])
    it = inner_loop('w', MlbfIterate.from_state(wmmse_state(H, V0, cfg)),
                    ProblemGraph(H, cfg), mcfg, m, steps=10)
    assert np.min(it.w.value) == 0.3


def test_inner_u_step_reaches_theta():
    cfg, H, V0, mcfg = mini(hidden=4)
    problem = ProblemGraph(H, cfg)
    m = MetaLearner(2 * cfg.N, hidden=4, key=(9,))
    m.head_W.value = 0.1 * Stream(10).normal((4, 1))
    it = inner_loop('u', MlbfIterate.from_state(wmmse_state(H, V0, cfg)), problem, mcfg, m, steps=1)
    ad.backward(ad.scale(problem.loss(it), 1.0))
    assert any(np.any(p.grad) for p in m.params)


@pytest.mark.parametrize('projection', ['inner', 'outer'])
def test_outer_step_feasible(projection):
    cfg, H, V0, mcfg = mini(hidden=4, projection=projection)
    learners = make_learners(cfg, mcfg, (1,))
    for m in learners.values():
        m.head_b.value = np.array([0.5])
    it = MlbfIterate.from_state(wmmse_state(H, V0, cfg))
    it, F = outer_step(it, ProblemGraph(H, cfg), mcfg, learners)
    assert power(it.state().V) <= cfg.P + 1e-9
    assert float(F.value) == pytest.approx(global_loss(it.state(), H, cfg), rel=1e-12)


def test_zero_theta_fixed_point_over_50_steps():
    cfg, H, V0, mcfg = mini(hidden=4)
    problem = ProblemGraph(H, cfg)
    learners = make_learners(cfg, mcfg, (0,))
    for m in learners.values():
        m.zero_()
    start = wmmse_state(H, V0, cfg)
    F0 = global_loss(start, H, cfg)
    it = MlbfIterate.from_state(start)
    for _ in range(50):
        it, F = outer_step(it, problem, mcfg, learners)
        assert float(F.value) == F0
    s = it.state()
    assert np.array_equal(s.V.re, V0.re) and np.array_equal(s.V.im, V0.im)
    assert np.array_equal(s.u, start.u) and np.array_equal(s.w, start.w)


# --- window updates --------------------------------------------------------------

def run_window(learners, it, problem, mcfg, omega=1.0):
    window = []
    for _ in range(mcfg.t_u):
        it, F = outer_step(it, problem, mcfg, learners)
        window.append((omega, F))
    return it, window


def test_window_length_checked():
    cfg, mcfg, H, state, learners = window_setup(0)
    _, window = run_window(learners, MlbfIterate.from_state(state), ProblemGraph(H, cfg), mcfg)
    with pytest.raises(StateError):
        window_update(window[:1], learners, mcfg)


def test_zero_omega_leaves_theta_unchanged():
    cfg, mcfg, H, state, learners = window_setup(1)
    before = [p.value.copy() for m in learners.values() for p in m.params]
    _, window = run_window(learners, MlbfIterate.from_state(state), ProblemGraph(H, cfg), mcfg, 0.0)
    window_update(window, learners, mcfg)
    params = [p for m in learners.values() for p in m.params]
    assert all(np.array_equal(p.value, b) for p, b in zip(params, before))
    assert all(p.step == 1 and p.grad is None for p in params)


def theta_grads(learners):
    return [p.grad.copy() for m in learners.values() for p in m.params]


def test_detaching_gradient_inputs_changes_theta_grads_not_loss():
    results = {}
    for detach in (True, False):
        cfg, mcfg, H, state, learners = window_setup(2, detach_grads=detach)
        _, window = run_window(learners, MlbfIterate.from_state(state), ProblemGraph(H, cfg), mcfg)
        total = ad.add(*(ad.scale(F, 0.5) for _, F in window))
        ad.backward(total)
        results[detach] = (float(total.value), theta_grads(learners))
    assert results[True][0] == pytest.approx(results[False][0], rel=1e-13)
    assert any(not np.allclose(a, b) for a, b in zip(results[True][1], results[False][1]))


def test_truncation_cuts_history_between_windows():
    cfg, mcfg, H, state, learners = window_setup(3, detach_grads=False)
    problem = ProblemGraph(H, cfg)
    it, window = run_window(learners, MlbfIterate.from_state(state), problem, mcfg)
    window_update(window, learners, mcfg)
    it = it.detached()

    # replica with every carried value rebuilt from scratch
    fresh = copy.deepcopy(learners)
    for m_src, m_dst in zip(learners.values(), fresh.values()):
        m_dst.h = [ad.constant(h.value.copy()) for h in m_src.h]
        m_dst.c = [ad.constant(c.value.copy()) for c in m_src.c]
    it_fresh = MlbfIterate(*(ad.constant(x.value.copy()) for x in (it.u, it.w, it.V)))

    grads = []
    for ls, start in ((learners, it), (fresh, it_fresh)):
        _, w2 = run_window(ls, start, problem, mcfg)
        ad.backward(ad.add(*(ad.scale(F, 0.5) for _, F in w2)))
        grads.append(theta_grads(ls))
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


# --- full solver -----------------------------------------------------------------

def test_solve_contracts_and_no_regression():
    cfg, H, V0, mcfg = mini(T=50)
    state, traj = solve_mlbf(H, V0, cfg, mcfg, seed=4)
    assert traj.iters_used == 50 and len(traj.power) == 50
    assert max(traj.power) <= cfg.P + 1e-9
    assert state.extras['best_wsr'] == max(traj.wsr) >= weighted_sum_rate(H, V0, cfg)
    assert weighted_sum_rate(H, state.V, cfg) == state.extras['best_wsr']
    assert np.all(np.diff(traj.best_so_far) >= 0)
    assert np.min(state.w) >= mcfg.w_floor


def test_solve_deterministic():
    cfg, H, V0, mcfg = mini(T=20)
    a = solve_mlbf(H, V0, cfg, mcfg, seed=5)[1]
    b = solve_mlbf(H, V0, cfg, mcfg, seed=5)[1]
    assert a.wsr == b.wsr and a.power == b.power and a.objective == b.objective


def test_solve_zero_learners_stay_put():
    cfg, H, V0, mcfg = mini(T=50, hidden=4, lr_V=0.0, lr_u=0.0, lr_w=0.0)
    learners = make_learners(cfg, mcfg, (0,))
    for m in learners.values():
        m.zero_()
    state, traj = solve_mlbf(H, V0, cfg, mcfg, learners=learners)
    assert set(traj.wsr) == {weighted_sum_rate(H, V0, cfg)}
    assert np.array_equal(state.V.re, V0.re)


def test_solve_with_penalty_and_outer_projection():
    cfg, H, V0, mcfg = mini(T=20, mu=0.5, projection='outer')
    _, traj = solve_mlbf(H, V0, cfg, mcfg, seed=6)
    assert max(traj.power) <= cfg.P + 1e-9


def test_solve_rejects_infeasible_start():
    cfg, H, V0, mcfg = mini(T=5)
    with pytest.raises(PreconditionError):
        solve_mlbf(H, CMat.from_complex(2 * V0.to_complex()), cfg, mcfg)
