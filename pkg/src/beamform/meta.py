"""
Meta-learned beamforming (MLBF).

Three coordinatewise LSTM meta-learners, one per variable block (receivers
``u``, MSE weights ``w``, beamformers ``V``), propose additive updates from
the block's gradient.  Every outer step runs ``I`` updates of ``u``, ``J``
of ``w`` and ``K`` of ``V`` (each projected onto the power budget), then
evaluates the weighted-MSE loss.  Every ``t_u`` outer steps the weighted
mean of those losses is backpropagated through the unrolled updates and each
learner takes an Adam step.  Learner parameters start from scratch for every
problem instance; the meta-training *is* the solve.

All variables live in real-split coordinates: ``u' = [Re u, Im u]``,
``w`` and ``V' = [Re V, Im V]``.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import CMat, SolverState, grad_subproblem, power, weighted_sum_rate
from .errors import NumericError, PreconditionError, StateError
from .rng import Stream
from .wmmse import Trajectory, update_u, update_w

__all__ = ['MlbfConfig', 'MetaLearner', 'MlbfIterate', 'ProblemGraph',
           'make_learners', 'lstm_update', 'inner_loop', 'outer_step',
           'window_update', 'solve_mlbf', 'project_power_graph',
           'lstm_cell_composite']

BLOCKS = ('u', 'w', 'V')


@dataclass(frozen=True)
class MlbfConfig:
    """Hyperparameters of the MLBF solver.

    ``omega`` is ``None`` (all outer steps weighted 1), a float, or a sequence
    of ``T`` weights.  ``projection='inner'`` projects ``V`` after every
    inner step, ``'outer'`` once after the ``V`` loop.  ``detach_grads``
    stops the meta-gradient at the LSTM gradient inputs (first-order
    meta-gradient).
    """

    T: int = 500
    K: int = 10
    I: int = 10
    J: int = 10
    t_u: int = 5
    omega: object = None
    lr_V: float = 1e-4
    lr_u: float = 1e-4
    lr_w: float = 1e-4
    hidden: int = 200
    layers: int = 2
    mu: float = 0.0
    w_floor: float = 1e-6
    out_scale: float = 1.0
    detach_grads: bool = True
    projection: str = 'inner'

    def __post_init__(self):
        for name in ('T', 'K', 'I', 'J', 't_u', 'hidden', 'layers'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.T % self.t_u:
            raise ValueError(f"t_u={self.t_u} must divide T={self.T}")
        if self.projection not in ('inner', 'outer'):
            raise ValueError(f"projection must be 'inner' or 'outer', got {self.projection!r}")
        if not self.w_floor > 0:
            raise ValueError("w_floor must be positive")
        if self.omega is not None and not np.isscalar(self.omega):
            if len(self.omega) != self.T:
                raise ValueError(f"omega needs {self.T} entries, got {len(self.omega)}")
            if any(o < 0 for o in self.omega):
                raise ValueError("omega must be nonnegative")

    def steps(self, block):
        return {'u': self.I, 'w': self.J, 'V': self.K}[block]

    def lr(self, block):
        return {'u': self.lr_u, 'w': self.lr_w, 'V': self.lr_V}[block]

    def weight(self, t):
        """Loss weight of outer step ``t`` (1-based)."""
        if self.omega is None:
            return 1.0
        if np.isscalar(self.omega):
            return float(self.omega)
        return float(self.omega[t - 1])


class MetaLearner:
    """Coordinatewise LSTM: shared weights, private state per coordinate.

    Each layer maps ``[x, h]`` through one ``(in + hidden) x 4 hidden`` weight
    matrix with gate blocks ordered input, forget, candidate, output.  A
    linear head maps the top hidden state to one scalar update per
    coordinate.
    """

    def __init__(self, n_coords, hidden=200, layers=2, key=(0,), name=''):
        self.n_coords = n_coords
        self.hidden = hidden
        self.name = name
        stream = Stream(*key)
        bound = 1.0 / math.sqrt(hidden)
        self.weights, self.biases = [], []
        n_in = 1
        for layer in range(layers):
            W = stream.uniform((n_in + hidden, 4 * hidden)) * (2 * bound) - bound
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0  # forget gate
            self.weights.append(ad.Parameter(W, f"{name}.W{layer}"))
            self.biases.append(ad.Parameter(b, f"{name}.b{layer}"))
            n_in = hidden
        self.head_W = ad.Parameter(np.zeros((hidden, 1)), f"{name}.head_W")
        self.head_b = ad.Parameter(np.zeros(1), f"{name}.head_b")
        self.reset_state()

    @property
    def params(self):
        return [*self.weights, *self.biases, self.head_W, self.head_b]

    @property
    def layers(self):
        return len(self.weights)

    def reset_state(self):
        zero = np.zeros((self.n_coords, self.hidden))
        self.h = [ad.constant(zero) for _ in range(self.layers)]
        self.c = [ad.constant(zero) for _ in range(self.layers)]

    def detach_state(self):
        self.h = [ad.detach(h) for h in self.h]
        self.c = [ad.detach(c) for c in self.c]

    def zero_(self):
        """Set every parameter to zero (the learner then proposes no updates)."""
        for p in self.params:
            p.value = np.zeros_like(p.value)

    def __call__(self, grad, out_scale=1.0):
        x = ad.reshape(grad, (self.n_coords, 1))
        n = self.hidden
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            hc = ad.lstm_cell(x, self.h[layer], self.c[layer], W, b)
            self.h[layer], self.c[layer] = hc[:, :n], hc[:, n:]
            x = self.h[layer]
        out = ad.add(ad.matmul(x, self.head_W), self.head_b)
        return ad.scale(ad.reshape(out, (self.n_coords,)), out_scale)


def lstm_cell_composite(x, h, c, W, b):
    """Reference LSTM cell built from elementary ops; returns ``(h, c)``."""
    n = h.shape[1]
    z = ad.add(ad.matmul(ad.concat([x, h], axis=1), W), b)
    i_gate = ad.sigmoid(z[:, :n])
    f_gate = ad.sigmoid(z[:, n:2 * n])
    cand = ad.tanh(z[:, 2 * n:3 * n])
    o_gate = ad.sigmoid(z[:, 3 * n:])
    c_new = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, cand))
    return ad.mul(o_gate, ad.tanh(c_new)), c_new


def lstm_update(m, grad, out_scale=1.0):
    """One meta-learner step: returns the update and the advanced states.

    ``grad`` is a node or array of length ``m.n_coords``.
    """
    grad = grad if isinstance(grad, ad.Node) else ad.constant(grad)
    if grad.shape != (m.n_coords,):
        raise ValueError(f"{m.name}: gradient has shape {grad.shape}, expected ({m.n_coords},)")
    if not np.all(np.isfinite(grad.value)):
        raise NumericError(f"{m.name}: non-finite gradient input",
                           learner=m.name, n_bad=int(np.sum(~np.isfinite(grad.value))))
    delta = m(grad, out_scale)
    return delta, (m.h, m.c)


def make_learners(cfg, mcfg, key):
    """Fresh ``{'u', 'w', 'V'}`` learners seeded from the key tuple."""
    sizes = {'u': 2 * cfg.N, 'w': cfg.N, 'V': 2 * cfg.N * cfg.M}
    return {block: MetaLearner(sizes[block], mcfg.hidden, mcfg.layers,
                               key=(*key, idx), name=f"m_{block}")
            for idx, block in enumerate(BLOCKS)}


class ProblemGraph:
    """Channel constants plus the differentiable loss and block gradients."""

    def __init__(self, H, cfg):
        self.H = H
        self.cfg = cfg
        self.N, self.M = H.shape
        self.Hr = ad.constant(H.re)
        self.Hi = ad.constant(H.im)
        self.HrT = ad.constant(H.re.T.copy())
        self.HiT = ad.constant(H.im.T.copy())
        re_mask, im_mask = CMat.masks(self.M)
        self.mask_re = ad.constant(re_mask)
        self.mask_im = ad.constant(im_mask)
        self.eye = ad.constant(np.eye(self.N))
        self.alpha = ad.constant(cfg.weights)

    def split(self, it):
        N = self.N
        ur, ui = it.u[:N], it.u[N:]
        Vr = ad.matmul(it.V, self.mask_re)
        Vi = ad.matmul(it.V, self.mask_im)
        # Gr[j, i] + 1j Gi[j, i] = h_i^H v_j
        Gr = ad.add(ad.matmul(Vr, self.HrT), ad.matmul(Vi, self.HiT))
        Gi = ad.sub(ad.matmul(Vi, self.HrT), ad.matmul(Vr, self.HiT))
        total = ad.add(ad.sum(ad.add(ad.square(Gr), ad.square(Gi)), axis=0), self.cfg.sigma2)
        gr = ad.sum(ad.mul(Gr, self.eye), axis=0)
        gi = ad.sum(ad.mul(Gi, self.eye), axis=0)
        return ur, ui, Vr, Vi, Gr, Gi, total, gr, gi

    def mse(self, it, parts=None):
        ur, ui, _, _, _, _, total, gr, gi = parts or self.split(it)
        u2 = ad.add(ad.square(ur), ad.square(ui))
        cross = ad.sub(ad.mul(ur, gr), ad.mul(ui, gi))
        return ad.add(ad.sub(ad.mul(u2, total), ad.scale(cross, 2.0)), 1.0)

    def loss(self, it, mu=0.0):
        e = self.mse(it)
        per_user = ad.sub(ad.mul(it.w, e), ad.log2(it.w))
        F = ad.sum(ad.mul(self.alpha, per_user))
        if mu:
            F = ad.add(F, ad.scale(ad.sub(ad.sum(ad.square(it.V)), self.cfg.P), mu))
        return F

    def block_grad(self, it, which, mu=0.0):
        """Differentiable gradient of the loss for one block (same layout as
        :func:`beamform.channel.grad_subproblem`, flattened)."""
        parts = self.split(it)
        ur, ui, Vr, Vi, Gr, Gi, total, gr, gi = parts
        aw = ad.mul(self.alpha, it.w)
        if which == 'w':
            e = self.mse(it, parts)
            return ad.mul(self.alpha, ad.sub(e, ad.scale(ad.reciprocal(it.w), 1.0 / math.log(2.0))))
        if which == 'u':
            g_re = ad.scale(ad.mul(aw, ad.sub(ad.mul(total, ur), gr)), 2.0)
            g_im = ad.scale(ad.mul(aw, ad.add(ad.mul(total, ui), gi)), 2.0)
            return ad.concat([g_re, g_im])
        if which == 'V':
            c = ad.mul(aw, ad.add(ad.square(ur), ad.square(ui)))
            Gc_r = ad.mul(Gr, c)
            Gc_i = ad.mul(Gi, c)
            T_re = ad.sub(ad.matmul(Gc_r, self.Hr), ad.matmul(Gc_i, self.Hi))
            T_im = ad.add(ad.matmul(Gc_r, self.Hi), ad.matmul(Gc_i, self.Hr))
            col = (self.N, 1)
            d = ad.reshape(aw, col)
            ur_c, ui_c = ad.reshape(ur, col), ad.reshape(ui, col)
            h_re = ad.add(ad.mul(ur_c, self.Hr), ad.mul(ui_c, self.Hi))
            h_im = ad.sub(ad.mul(ur_c, self.Hi), ad.mul(ui_c, self.Hr))
            g_re = ad.sub(ad.add(T_re, ad.scale(Vr, mu)), ad.mul(d, h_re))
            g_im = ad.sub(ad.add(T_im, ad.scale(Vi, mu)), ad.mul(d, h_im))
            return ad.reshape(ad.scale(ad.concat([g_re, g_im], axis=1), 2.0), (-1,))
        raise ValueError(f"which must be 'u', 'w' or 'V', got {which!r}")


class MlbfIterate:
    """The (u', w, V') triple as graph nodes."""

    def __init__(self, u, w, V):
        self.u, self.w, self.V = u, w, V

    @classmethod
    def from_state(cls, state):
        u = np.asarray(state.u, dtype=np.complex128)
        return cls(ad.constant(np.concatenate([u.real, u.imag])),
                   ad.constant(np.asarray(state.w, dtype=np.float64)),
                   ad.constant(state.V.stacked()))

    def get(self, block):
        return getattr(self, block)

    def set(self, block, node):
        setattr(self, block, node)

    def detached(self):
        return MlbfIterate(ad.detach(self.u), ad.detach(self.w), ad.detach(self.V))

    def state(self, outer_step=0):
        n = self.w.shape[0]
        u = self.u.value[:n] + 1j * self.u.value[n:]
        return SolverState(V=CMat.from_stacked(self.V.value), u=u, w=self.w.value.copy(),
                           outer_step=outer_step)


def _stacked_power(Vp):
    half = Vp.shape[1] // 2
    re = np.ascontiguousarray(Vp[:, :half])
    im = np.ascontiguousarray(Vp[:, half:])
    return float(np.sum(re * re) + np.sum(im * im))


def project_power_graph(Vp, P):
    """Differentiable power projection of a stacked ``[Re V, Im V]`` node.

    Identity when ``Tr(V V^H) <= P`` (including the boundary), otherwise
    ``V sqrt(P) / ||V||_F``.
    """
    pw = _stacked_power(Vp.value)
    if pw <= P:
        return Vp
    factor = math.sqrt(P)
    while _stacked_power(Vp.value * (factor / math.sqrt(pw))) > P:
        factor *= 1.0 - 2.0 ** -52
    norm = ad.sqrt(ad.sum(ad.square(Vp)))
    return ad.scale(ad.mul(Vp, ad.reciprocal(norm)), factor)


def _subproblem_grad(problem, it, which, mcfg):
    if not mcfg.detach_grads:
        return problem.block_grad(it, which, mcfg.mu)
    for block in BLOCKS:
        if not np.all(np.isfinite(it.get(block).value)):
            raise NumericError(f"non-finite values in block {block}", block=block)
    g = grad_subproblem(it.state(), problem.H, problem.cfg, mcfg.mu, which)
    return ad.constant(g.reshape(-1))


def inner_loop(block, it, problem, mcfg, m, steps=None):
    """Apply ``steps`` learned updates to one block, the others frozen.

    ``w`` is clamped to ``w_floor`` after every step; ``V`` is projected after
    every step when ``mcfg.projection == 'inner'``.  Returns the iterate
    with the block replaced (the input iterate is not modified).
    """
    steps = mcfg.steps(block) if steps is None else steps
    it = MlbfIterate(it.u, it.w, it.V)
    shape = it.get(block).shape
    for _ in range(steps):
        g = _subproblem_grad(problem, it, block, mcfg)
        delta, _ = lstm_update(m, g, mcfg.out_scale)
        x = ad.add(it.get(block), ad.reshape(delta, shape))
        if block == 'w':
            x = ad.clamp_min(x, mcfg.w_floor)
        elif block == 'V' and mcfg.projection == 'inner':
            x = project_power_graph(x, problem.cfg.P)
        it.set(block, x)
    if block == 'V' and mcfg.projection == 'outer':
        it.set('V', project_power_graph(it.V, problem.cfg.P))
    return it


def outer_step(it, problem, mcfg, learners):
    """u loop, then w loop, then V loop; returns ``(iterate, F_t)``."""
    for block in BLOCKS:
        it = inner_loop(block, it, problem, mcfg, learners[block])
    return it, problem.loss(it, mcfg.mu)


def window_update(window, learners, mcfg):
    """Meta-update from one window of ``t_u`` outer-step losses.

    ``window`` is a sequence of ``(omega_t, F_t)`` pairs.  Backpropagates the
    weighted mean loss, takes one Adam step per learner, clears the
    gradients and cuts the learners' state history.  Returns the window loss.
    """
    if len(window) != mcfg.t_u:
        raise StateError(f"window holds {len(window)} losses, expected t_u={mcfg.t_u}")
    terms = [ad.scale(F, omega / mcfg.t_u) for omega, F in window]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    ad.backward(total)
    for block, m in learners.items():
        for p in m.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            ad.adam_step(p, mcfg.lr(block))
        ad.zero_grad(m.params)
        m.detach_state()
    return float(total.value)


def solve_mlbf(H, V0, cfg, mcfg=MlbfConfig(), seed=0, learners=None):
    """Solve one WSR instance with freshly initialized meta-learners.

    ``u`` and ``w`` start at their closed-form MMSE values for ``V0``.

    Returns
    -------
    state : SolverState
        The iterate with the highest WSR among all recorded outer steps.
    traj : Trajectory
        WSR, power and loss at every outer step (``T`` entries).
    """
    if power(V0) > cfg.P + 1e-9:
        raise PreconditionError(f"V0 is infeasible: Tr(VV^H) = {power(V0)} > P = {cfg.P}")
    start = time.perf_counter()
    problem = ProblemGraph(H, cfg)
    if learners is None:
        learners = make_learners(cfg, mcfg, (seed,))
    init = SolverState(V=V0, u=update_u(H, V0, cfg.sigma2), w=update_w(H, V0, cfg.sigma2))
    it = MlbfIterate.from_state(init)
    traj = Trajectory()
    best, best_state = -np.inf, None
    window = []
    for t in range(1, mcfg.T + 1):
        it, F = outer_step(it, problem, mcfg, learners)
        state = it.state(t)
        rate = weighted_sum_rate(H, state.V, cfg)
        traj.record(rate, power(state.V), float(F.value), 1e3 * (time.perf_counter() - start))
        if rate > best:
            best, best_state = rate, state
        window.append((mcfg.weight(t), F))
        if t % mcfg.t_u == 0:
            window_update(window, learners, mcfg)
            window = []
            it = it.detached()
    if best_state is None:
        raise NumericError("no finite WSR was recorded", T=mcfg.T)
    traj.converged = True
    best_state.extras['best_wsr'] = best
    return best_state, traj
