"""
MISO downlink problem model.

A base station with ``M`` antennas serves ``N`` single-antenna users.  Row
``i`` of the channel matrix ``H`` (``N x M``) is the channel vector ``h_i``
and row ``i`` of the beamforming matrix ``V`` (``N x M``) is the beamformer
``v_i``, so the effective gain from stream ``j`` to user ``i`` is
``g_ij = h_i^H v_j``.

The receiver estimates its symbol as ``x_hat_i = u_i * y_i``, which gives the
mean-square error

    e_i = |u_i g_ii - 1|^2 + sum_{j != i} |u_i g_ij|^2 + sigma2 |u_i|^2

and the weighted-MSE loss

    F(u, w, V) = sum_i alpha_i (w_i e_i - log2 w_i) + mu (Tr(V V^H) - P).

Gradients are taken with respect to the real-split coordinates of each
block: ``u' = [Re u, Im u]``, ``w`` and ``V' = [Re V, Im V]`` (``N x 2M``).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .rng import Stream

__all__ = ['CMat', 'SystemConfig', 'ChannelSet', 'SolverState',
           'generate_channels', 'random_feasible_v', 'matched_filter_v',
           'effective_gains', 'sinr', 'weighted_sum_rate', 'mse',
           'global_loss', 'grad_subproblem', 'project_power', 'power']


@dataclass(frozen=True)
class CMat:
    """Complex matrix held as a pair of real arrays."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.array(self.re, dtype=np.float64)
        im = np.array(self.im, dtype=np.float64)
        if re.ndim != 2 or re.shape != im.shape:
            raise ShapeError(f"re {re.shape} and im {im.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise DomainError("CMat entries must be finite")
        object.__setattr__(self, 're', re)
        object.__setattr__(self, 'im', im)

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=np.complex128)
        if z.ndim == 1:
            z = z[None, :]
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def from_stacked(cls, stacked):
        """Inverse of :meth:`stacked`."""
        stacked = np.asarray(stacked, dtype=np.float64)
        re_mask, im_mask = cls.masks(stacked.shape[1] // 2)
        return cls(stacked @ re_mask, stacked @ im_mask)

    @property
    def rows(self):
        return self.re.shape[0]

    @property
    def cols(self):
        return self.re.shape[1]

    @property
    def shape(self):
        return self.re.shape

    def to_complex(self):
        return self.re + 1j * self.im

    def stacked(self):
        """The real matrix ``[re, im]`` of shape ``rows x 2 cols``."""
        return np.hstack([self.re, self.im])

    @staticmethod
    def masks(cols):
        """Mask matrices ``(M_re, M_im)`` with ``stacked @ M_re == re``."""
        eye = np.eye(cols)
        zero = np.zeros((cols, cols))
        return np.vstack([eye, zero]), np.vstack([zero, eye])


def _as_complex(x):
    if isinstance(x, CMat):
        return x.to_complex()
    return np.asarray(x, dtype=np.complex128)


@dataclass(frozen=True)
class SystemConfig:
    """Physical problem instance.

    The default SNR convention fixes the noise power to one and sets
    ``P = 10**(snr_db/10)``; ``power_mode='fixed-power'`` instead fixes
    ``P = 1`` and sets ``sigma2 = 10**(-snr_db/10)``.
    """

    M: int
    N: int
    P: float
    sigma2: float
    alpha: tuple
    snr_db: float

    def __post_init__(self):
        alpha = tuple(float(a) for a in np.broadcast_to(self.alpha, (self.N,)))
        object.__setattr__(self, 'alpha', alpha)
        if self.M < 1 or self.N < 1:
            raise ValueError(f"need M >= 1 and N >= 1, got M={self.M}, N={self.N}")
        if not self.P > 0 or not self.sigma2 > 0:
            raise ValueError(f"need P > 0 and sigma2 > 0, got P={self.P}, sigma2={self.sigma2}")
        if any(a < 0 for a in alpha):
            raise ValueError("user weights must be nonnegative")
        snr = 10.0 ** (self.snr_db / 10.0)
        if not np.isclose(self.P / self.sigma2, snr, rtol=1e-9, atol=0.0):
            raise ValueError(f"P/sigma2 = {self.P / self.sigma2} does not match snr_db={self.snr_db}")

    @classmethod
    def from_snr(cls, M, N, snr_db, alpha=1.0, power_mode='fixed-noise'):
        snr = 10.0 ** (snr_db / 10.0)
        if power_mode == 'fixed-noise':
            P, sigma2 = snr, 1.0
        elif power_mode == 'fixed-power':
            P, sigma2 = 1.0, 1.0 / snr
        else:
            raise ValueError(f"unknown power_mode {power_mode!r}")
        return cls(M=M, N=N, P=P, sigma2=sigma2, alpha=alpha, snr_db=float(snr_db))

    @property
    def weights(self):
        return np.array(self.alpha)


@dataclass
class ChannelSet:
    """Seeded collection of i.i.d. Rayleigh channel realizations."""

    seed: int
    realizations: list

    def __len__(self):
        return len(self.realizations)

    def __getitem__(self, k):
        return self.realizations[k]

    def __iter__(self):
        return iter(self.realizations)


@dataclass
class SolverState:
    """Current (V, u, w) iterate of either solver."""

    V: CMat
    u: np.ndarray
    w: np.ndarray
    outer_step: int = 0
    extras: dict = field(default_factory=dict)

    def copy(self):
        return SolverState(self.V, self.u.copy(), self.w.copy(), self.outer_step, dict(self.extras))


def generate_channels(cfg, count, seed):
    """Draw ``count`` channel matrices with i.i.d. CN(0, 1) entries."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    z = Stream(seed, 0).complex_normal((count, cfg.N, cfg.M))
    return ChannelSet(seed=seed, realizations=[CMat.from_complex(h) for h in z])


def power(V):
    """Total transmit power Tr(V V^H)."""
    if isinstance(V, CMat):
        return float(np.sum(V.re * V.re) + np.sum(V.im * V.im))
    V = np.asarray(V)
    return float(np.sum(V.real * V.real) + np.sum(V.imag * V.imag))


def _scale_to_power(Vc, P):
    # Frobenius rescale, nudged down until the computed power is <= P so
    # that a second projection is an exact no-op.
    scaled = Vc * np.sqrt(P / power(Vc))
    while power(scaled) > P:
        scaled = scaled * (1.0 - 2.0 ** -52)
    return scaled


def project_power(V, P):
    """Project ``V`` onto ``{V : Tr(V V^H) <= P}`` by Frobenius rescaling."""
    if not P > 0:
        raise ValueError(f"P must be positive, got {P}")
    if power(V) <= P:
        return V if isinstance(V, CMat) else np.asarray(V)
    out = _scale_to_power(_as_complex(V), P)
    return CMat.from_complex(out) if isinstance(V, CMat) else out


def random_feasible_v(cfg, *key):
    """Random beamformer with i.i.d. CN(0, 1) entries scaled to ``Tr = P``."""
    z = Stream(*key).complex_normal((cfg.N, cfg.M))
    return CMat.from_complex(_scale_to_power(z, cfg.P))


def matched_filter_v(H, cfg):
    """Row ``i`` is ``sqrt(P/N) h_i / ||h_i||``."""
    Hc = _as_complex(H)
    norms = np.linalg.norm(Hc, axis=1, keepdims=True)
    return CMat.from_complex(_scale_to_power(np.sqrt(cfg.P / cfg.N) * Hc / norms, cfg.P))


def effective_gains(H, V):
    """Matrix ``G`` with ``G[i, j] = h_i^H v_j``."""
    Hc = _as_complex(H)
    Vc = _as_complex(V)
    if Hc.ndim != 2 or Hc.shape != Vc.shape:
        raise ShapeError(f"H {Hc.shape} and V {Vc.shape} must both be N x M")
    return Hc.conj() @ Vc.T


def sinr(H, V, sigma2):
    G2 = np.abs(effective_gains(H, V)) ** 2
    signal = np.diag(G2)
    interference = G2.sum(axis=1) - signal
    return signal / (interference + sigma2)


def weighted_sum_rate(H, V, cfg):
    """sum_i alpha_i log2(1 + SINR_i), evaluated whether or not V is feasible."""
    return float(np.dot(cfg.weights, np.log2(1.0 + sinr(H, V, cfg.sigma2))))


def mse(H, V, u, sigma2=1.0):
    """Per-user mean-square error of the estimate ``u_i y_i``."""
    G = effective_gains(H, V)
    u = np.asarray(u, dtype=np.complex128)
    if u.shape != (G.shape[0],):
        raise ShapeError(f"u has shape {u.shape}, expected ({G.shape[0]},)")
    total = (np.abs(G) ** 2).sum(axis=1) + sigma2
    return np.abs(u) ** 2 * total - 2.0 * np.real(u * np.diag(G)) + 1.0


def _check_w(w):
    w = np.asarray(w, dtype=np.float64)
    if np.any(~(w > 0)):
        raise DomainError(f"MMSE weights must be positive, got {w}")
    return w


def global_loss(state, H, cfg, mu=0.0):
    w = _check_w(state.w)
    e = mse(H, state.V, state.u, cfg.sigma2)
    penalty = mu * (power(state.V) - cfg.P)
    return float(np.dot(cfg.weights, w * e - np.log2(w)) + penalty)


def grad_subproblem(state, H, cfg, mu, which):
    """Gradient of the weighted-MSE loss with respect to one block.

    Parameters
    ----------
    state : SolverState
    H : CMat
    cfg : SystemConfig
    mu : float
        Penalty coefficient on ``Tr(V V^H) - P``.
    which : {'u', 'w', 'V'}

    Returns
    -------
    numpy.ndarray
        ``[Re, Im]`` of length ``2N`` for ``u``, length ``N`` for ``w``, and
        an ``N x 2M`` array in the ``[Re V, Im V]`` layout for ``V``.
    """
    w = _check_w(state.w)
    alpha = cfg.weights
    Hc = _as_complex(H)
    Vc = _as_complex(state.V)
    u = np.asarray(state.u, dtype=np.complex128)
    G = effective_gains(Hc, Vc)

    if which == 'w':
        return alpha * (mse(Hc, Vc, u, cfg.sigma2) - 1.0 / (w * np.log(2.0)))
    if which == 'u':
        total = (np.abs(G) ** 2).sum(axis=1) + cfg.sigma2
        # real-coordinate gradient packed as re + j im
        g = 2.0 * alpha * w * (total * u - np.conj(np.diag(G)))
        return np.concatenate([g.real, g.imag])
    if which == 'V':
        c = alpha * w * np.abs(u) ** 2
        # row j: sum_i c_i g_ij h_i + mu v_j - alpha_j w_j conj(u_j) h_j
        g = G.T @ (c[:, None] * Hc) + mu * Vc - (alpha * w * np.conj(u))[:, None] * Hc
        g = 2.0 * g
        return np.hstack([g.real, g.imag])
    raise ValueError(f"which must be 'u', 'w' or 'V', got {which!r}")
