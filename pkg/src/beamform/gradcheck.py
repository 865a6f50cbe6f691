"""Finite-difference gradient checks for the analytic and taped gradients."""

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import CMat, SolverState, SystemConfig, global_loss, grad_subproblem, project_power
from .meta import (MlbfConfig, MlbfIterate, ProblemGraph, lstm_cell_composite,
                   make_learners, outer_step, project_power_graph)
from .rng import Stream
from .wmmse import update_u, update_w

__all__ = ['CheckResult', 'relative_error', 'central_difference', 'check_node_fn',
           'check_subproblem_gradients', 'check_elementary_ops', 'check_composites',
           'check_window_metagradient', 'run_all']

SUBPROBLEM_TOL = 1e-5
COMPOSITE_TOL = 1e-6
UNROLLED_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol

    def line(self):
        status = 'PASS' if self.passed else 'FAIL'
        return f"{status}  {self.name:<40s} max rel err {self.error:.3e}  (tol {self.tol:.0e})"


def relative_error(analytic, numeric):
    """Max-norm error relative to the larger of the two gradients."""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_difference(f, x, step=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = f(x)
        flat[k] = orig - step
        lo = f(x)
        flat[k] = orig
        out[k] = (hi - lo) / (2.0 * step)
    return grad


def check_node_fn(fn, arrays, key=(0,), step=1e-6):
    """Compare taped and finite-difference gradients of ``fn``.

    ``fn`` maps nodes to a node of any shape; it is reduced to a scalar with
    fixed random weights.  Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[ad.constant(a) for a in arrays])
    weights = Stream(*key, 99).normal(probe.shape) if probe.shape else np.array(1.0)

    def scalar(*nodes):
        return ad.sum(ad.mul(fn(*nodes), weights))

    leaves = [ad.Node(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(scalar(*leaves))
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        def f(x, idx=idx):
            args = [ad.constant(x if j == idx else a) for j, a in enumerate(arrays)]
            return float(scalar(*args).value)
        numeric = central_difference(f, arrays[idx], step)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[idx])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _random_point(cfg, stream):
    N, M = cfg.N, cfg.M
    H = CMat.from_complex(stream.complex_normal((N, M)))
    V = CMat.from_complex(stream.complex_normal((N, M)) * np.sqrt(cfg.P / (N * M)))
    u = stream.complex_normal(N) * 0.3
    w = 0.5 + 2.5 * stream.uniform(N)
    mu = float(stream.uniform(1)[0])
    return H, SolverState(V=V, u=u, w=w), mu


def check_subproblem_gradients(n_points=100, seed=0):
    """Analytic block gradients of the weighted-MSE loss vs central differences."""
    results = []
    for which in ('u', 'w', 'V'):
        worst = 0.0
        for k in range(n_points):
            stream = Stream(seed, 1, k)
            snr = (0.0, 10.0, 20.0, 30.0)[k % 4]
            alpha = 0.5 + stream.uniform(4)
            cfg = SystemConfig.from_snr(4, 4, snr, alpha=alpha)
            H, state, mu = _random_point(cfg, stream)
            analytic = grad_subproblem(state, H, cfg, mu, which)
            numeric = central_difference(lambda x: global_loss(_with_block(state, which, x), H, cfg, mu),
                                         _get_block(state, which))
            worst = max(worst, relative_error(analytic, numeric))
        results.append(CheckResult(f"subproblem grad {which} ({n_points} pts)", worst, SUBPROBLEM_TOL))
    return results


def _get_block(state, which):
    if which == 'u':
        return np.concatenate([state.u.real, state.u.imag])
    if which == 'w':
        return state.w.copy()
    return state.V.stacked()


def _with_block(state, which, x):
    if which == 'u':
        n = x.size // 2
        return SolverState(state.V, x[:n] + 1j * x[n:], state.w)
    if which == 'w':
        return SolverState(state.V, state.u, x.copy())
    return SolverState(CMat.from_stacked(x), state.u, state.w)


def check_elementary_ops(seed=0):
    s = Stream(seed, 2)
    a = s.normal((3, 4))
    b = s.normal((3, 4))
    pos = 0.5 + s.uniform((3, 4))
    cases = {
        'add': (lambda x, y: ad.add(x, y), [a, b]),
        'add (broadcast)': (lambda x, y: ad.add(x, y), [a, s.normal(4)]),
        'sub': (lambda x, y: ad.sub(x, y), [a, b]),
        'mul': (lambda x, y: ad.mul(x, y), [a, b]),
        'mul (broadcast)': (lambda x, y: ad.mul(x, y), [a, s.normal((3, 1))]),
        'matmul': (lambda x, y: ad.matmul(x, y), [a, s.normal((4, 2))]),
        'sum': (lambda x: ad.sum(x), [a]),
        'sum axis=0': (lambda x: ad.sum(x, axis=0), [a]),
        'mean': (lambda x: ad.mean(x), [a]),
        'square': (lambda x: ad.square(x), [a]),
        'sqrt': (lambda x: ad.sqrt(x), [pos]),
        'reciprocal': (lambda x: ad.reciprocal(x), [pos]),
        'log2': (lambda x: ad.log2(x), [pos]),
        'sigmoid': (lambda x: ad.sigmoid(x), [a]),
        'tanh': (lambda x: ad.tanh(x), [a]),
        'concat': (lambda x, y: ad.concat([x, y], axis=1), [a, b]),
        'slice': (lambda x: x[1:, 2:], [a]),
        'scale': (lambda x: ad.scale(x, -2.5), [a]),
        'reshape': (lambda x: ad.reshape(x, (2, 6)), [a]),
        'clamp_min': (lambda x: ad.clamp_min(x, 0.05), [a + 0.013]),
    }
    return [CheckResult(f"op {name}", check_node_fn(fn, arrays, key=(seed, i)), COMPOSITE_TOL)
            for i, (name, (fn, arrays)) in enumerate(cases.items())]


def check_composites(seed=0):
    """LSTM cell, power projection and the weighted-MSE loss graph."""
    s = Stream(seed, 3)
    n, n_in, hidden = 3, 1, 5
    cell_args = [s.normal((n, n_in)), 0.5 * s.normal((n, hidden)), 0.5 * s.normal((n, hidden)),
                 0.4 * s.normal((n_in + hidden, 4 * hidden)), 0.4 * s.normal(4 * hidden)]
    results = [
        CheckResult("lstm_cell (fused)", check_node_fn(ad.lstm_cell, cell_args), COMPOSITE_TOL),
        CheckResult("lstm_cell (composite)",
                    check_node_fn(lambda *a: ad.concat(lstm_cell_composite(*a), axis=1), cell_args),
                    COMPOSITE_TOL),
    ]
    fused = ad.lstm_cell(*[ad.constant(a) for a in cell_args]).value
    composite = ad.concat(lstm_cell_composite(*[ad.constant(a) for a in cell_args]), axis=1).value
    results.append(CheckResult("lstm_cell fused == composite", relative_error(fused, composite), 1e-12))

    P = 2.0
    inside = 0.2 * s.normal((2, 4))
    outside = 2.0 * s.normal((2, 4))
    results.append(CheckResult("projection (feasible branch)",
                               check_node_fn(lambda v: project_power_graph(v, P), [inside]),
                               COMPOSITE_TOL))
    results.append(CheckResult("projection (scaling branch)",
                               check_node_fn(lambda v: project_power_graph(v, P), [outside]),
                               COMPOSITE_TOL))
    projected = project_power_graph(ad.constant(outside), P).value
    reference = project_power(CMat.from_stacked(outside), P).stacked()
    results.append(CheckResult("projection graph == numpy", relative_error(projected, reference), 1e-12))

    worst_loss, worst_value, worst_block = 0.0, 0.0, 0.0
    for k in range(10):
        st = Stream(seed, 4, k)
        cfg = SystemConfig.from_snr(3, 2, 10.0, alpha=0.5 + st.uniform(2))
        H, state, mu = _random_point(cfg, st)
        problem = ProblemGraph(H, cfg)
        it = MlbfIterate.from_state(state)
        arrays = [it.u.value, it.w.value, it.V.value]
        worst_loss = max(worst_loss, check_node_fn(
            lambda u, w, V: problem.loss(MlbfIterate(u, w, V), mu), arrays, key=(seed, 5, k)))
        worst_value = max(worst_value, abs(float(problem.loss(it, mu).value) - global_loss(state, H, cfg, mu))
                          / max(1.0, abs(global_loss(state, H, cfg, mu))))
        for which in ('u', 'w', 'V'):
            taped = problem.block_grad(it, which, mu).value
            worst_block = max(worst_block, relative_error(taped, grad_subproblem(state, H, cfg, mu, which)))
    results.append(CheckResult("weighted-MSE loss graph", worst_loss, COMPOSITE_TOL))
    results.append(CheckResult("loss graph == numpy loss", worst_value, 1e-12))
    results.append(CheckResult("block_grad graph == numpy", worst_block, 1e-12))
    return results


def window_setup(seed=0, snr_db=10.0, hidden=8, t_u=2, detach_grads=False):
    """Miniature MLBF problem with active learners (nonzero output heads)."""
    cfg = SystemConfig.from_snr(2, 2, snr_db)
    mcfg = MlbfConfig(T=t_u, K=3, I=3, J=3, t_u=t_u, hidden=hidden, detach_grads=detach_grads)
    s = Stream(seed, 6)
    H = CMat.from_complex(s.complex_normal((2, 2)))
    z = s.complex_normal((2, 2))
    V0 = CMat.from_complex(z * np.sqrt(0.8 * cfg.P / np.sum(np.abs(z) ** 2)))
    state = SolverState(V0, update_u(H, V0, cfg.sigma2), update_w(H, V0, cfg.sigma2))
    learners = make_learners(cfg, mcfg, (seed, 7))
    for idx, m in enumerate(learners.values()):
        m.head_W.value = 0.05 * Stream(seed, 8, idx).normal(m.head_W.shape)
        m.head_b.value = 0.01 * Stream(seed, 9, idx).normal(1)
    return cfg, mcfg, H, state, learners


def window_loss(cfg, mcfg, H, state, learners):
    """Weighted mean loss of one window, starting from fresh learner states."""
    problem = ProblemGraph(H, cfg)
    it = MlbfIterate.from_state(state)
    total = None
    for t in range(1, mcfg.t_u + 1):
        it, F = outer_step(it, problem, mcfg, learners)
        term = ad.scale(F, mcfg.weight(t) / mcfg.t_u)
        total = term if total is None else ad.add(total, term)
    return total


def check_window_metagradient(seed=0, n_coords=6, step=1e-5):
    """Backpropagated window loss vs central differences in the learner weights."""
    cfg, mcfg, H, state, learners = window_setup(seed)
    loss = window_loss(cfg, mcfg, H, state, learners)
    ad.backward(loss)
    worst = 0.0
    pick = Stream(seed, 10)
    for block, m in learners.items():
        for p in m.params:
            analytic = p.grad.reshape(-1)
            idx = np.argsort(-np.abs(analytic))[:n_coords // 2]
            extra = (pick.uniform(n_coords - idx.size) * analytic.size).astype(int)
            idx = np.unique(np.concatenate([idx, extra]))
            numeric = []
            for k in idx:
                vals = []
                for sign in (1.0, -1.0):
                    trial = copy.deepcopy(learners)
                    for m_t in trial.values():
                        m_t.reset_state()
                    target = [q for q in trial[block].params if q.name == p.name][0]
                    flat = target.value.reshape(-1).copy()
                    flat[k] += sign * step
                    target.value = flat.reshape(target.value.shape)
                    vals.append(float(window_loss(cfg, mcfg, H, state, trial).value))
                numeric.append((vals[0] - vals[1]) / (2.0 * step))
            worst = max(worst, relative_error(analytic[idx], np.array(numeric)))
    return [CheckResult("window meta-gradient (M=N=2, h=8, t_u=2)", worst, UNROLLED_TOL)]


def run_all(seed=0):
    return (check_subproblem_gradients(seed=seed) + check_elementary_ops(seed)
            + check_composites(seed) + check_window_metagradient(seed))
