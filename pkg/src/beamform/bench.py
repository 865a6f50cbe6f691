"""
Benchmark harness: WMMSE vs MLBF over channels, restarts and SNR points.

Every (channel, restart) pair gets one random feasible initial beamformer
that is shared bit-for-bit by both algorithms.  A solve's score is its final
WSR (WMMSE) or best recorded WSR (MLBF); a channel's score is the best over
its restarts, and the summary averages channel scores per (SNR, algorithm).
"""

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import SystemConfig, generate_channels, random_feasible_v
from .errors import BeamformError
from .meta import MlbfConfig, solve_mlbf
from .rng import derive_seed
from .wmmse import WmmseConfig, solve_wmmse

__all__ = ['ExperimentSpec', 'ResultRow', 'SummaryRow', 'ExperimentResult',
           'run_experiment', 'solve_scores', 'summarize', 'paired_ratio',
           'write_rows', 'read_rows', 'write_summary', 'CSV_HEADER']

log = logging.getLogger(__name__)

CSV_HEADER = ('snr_db', 'channel_id', 'restart_id', 'algo', 'iter', 'wsr', 'power', 'wall_ms')
ALGOS = ('wmmse', 'mlbf')
THREADS_ENV = 'BEAMFORM_THREADS'


@dataclass(frozen=True)
class ExperimentSpec:
    snr_db_list: tuple = (0.0, 10.0, 20.0, 30.0)
    n_channels: int = 1000
    n_restarts: int = 10
    algos: tuple = ALGOS
    seed: int = 0
    M: int = 4
    N: int = 4
    alpha: float = 1.0
    power_mode: str = 'fixed-noise'
    wmmse: WmmseConfig = field(default_factory=WmmseConfig)
    mlbf: MlbfConfig = field(default_factory=MlbfConfig)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'snr_db_list', tuple(float(s) for s in self.snr_db_list))
        object.__setattr__(self, 'algos', tuple(self.algos))
        if self.n_channels < 1 or self.n_restarts < 1:
            raise ValueError("n_channels and n_restarts must be >= 1")
        if not self.snr_db_list or not all(math.isfinite(s) for s in self.snr_db_list):
            raise ValueError("snr_db_list must be non-empty and finite")
        if not self.algos or any(a not in ALGOS for a in self.algos):
            raise ValueError(f"algos must be a non-empty subset of {ALGOS}, got {self.algos}")

    @classmethod
    def desk(cls, **overrides):
        """20 channels, 3 restarts, T = 200."""
        base = dict(n_channels=20, n_restarts=3, mlbf=MlbfConfig(T=200))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **overrides):
        """1000 channels, 10 restarts, T = 500."""
        base = dict(n_channels=1000, n_restarts=10, mlbf=MlbfConfig(T=500))
        base.update(overrides)
        return cls(**base)

    def system(self, snr_db):
        return SystemConfig.from_snr(self.M, self.N, snr_db, self.alpha, self.power_mode)


@dataclass(frozen=True)
class ResultRow:
    snr_db: float
    channel_id: int
    restart_id: int
    algo: str
    iter: int
    wsr: float
    power: float
    wall_ms: float

    @property
    def key(self):
        return (self.snr_db, self.channel_id, self.restart_id, self.algo)


@dataclass(frozen=True)
class SummaryRow:
    snr_db: float
    algo: str
    n_channels: int
    mean_wsr: float
    stderr_wsr: float
    mean_iters: float
    mean_wall_ms: float


@dataclass
class ExperimentResult:
    rows: list
    failures: list

    def summary(self):
        return summarize(self.rows)


def initial_beamformer(spec, cfg, channel_id, restart_id):
    return random_feasible_v(cfg, spec.seed, 1, channel_id, restart_id)


def _solve(task):
    spec, snr_db, channel_id, restart_id, algo = task
    cfg = spec.system(snr_db)
    H = generate_channels(cfg, spec.n_channels, spec.seed)[channel_id]
    V0 = initial_beamformer(spec, cfg, channel_id, restart_id)
    try:
        if algo == 'wmmse':
            _, traj = solve_wmmse(H, V0, cfg, spec.wmmse)
        else:
            seed = derive_seed(spec.seed, 2, channel_id, restart_id)
            _, traj = solve_mlbf(H, V0, cfg, spec.mlbf, seed=seed)
    except BeamformError as exc:
        return task[1:], None, f"{type(exc).__name__}: {exc}"
    rows = [ResultRow(snr_db, channel_id, restart_id, algo, t + 1, w, p, ms)
            for t, (w, p, ms) in enumerate(zip(traj.wsr, traj.power, traj.elapsed_ms))]
    return task[1:], rows, None


def _worker_count(requested):
    limit = os.environ.get(THREADS_ENV)
    n = max(1, int(requested or 1))
    if limit:
        n = min(n, max(1, int(limit)))
    return n


def run_experiment(spec, progress=None):
    """Run every (SNR, channel, restart, algorithm) solve in ``spec``.

    Rows come back in a fixed order (SNR list order, then channel, restart,
    algorithm, iteration) regardless of how many workers were used.  Solves
    that raise are listed in ``failures`` and contribute no rows.
    """
    tasks = [(spec, snr, c, r, algo)
             for snr in spec.snr_db_list
             for c in range(spec.n_channels)
             for r in range(spec.n_restarts)
             for algo in spec.algos]
    workers = _worker_count(spec.workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_solve, tasks, chunksize=1))
    else:
        outcomes = []
        for k, task in enumerate(tasks):
            outcomes.append(_solve(task))
            if progress:
                progress(k + 1, len(tasks), task[1:])
    rows, failures = [], []
    for key, task_rows, error in outcomes:
        if error is not None:
            log.warning("solve %s failed: %s", key, error)
            failures.append({'key': key, 'error': error})
        else:
            rows.extend(task_rows)
    return ExperimentResult(rows=rows, failures=failures)


def solve_scores(rows):
    """Map each solve key to ``(score, iterations, wall_ms)``."""
    grouped = {}
    for row in rows:
        grouped.setdefault(row.key, []).append(row)
    scores = {}
    for key, solve_rows in grouped.items():
        solve_rows.sort(key=lambda r: r.iter)
        wsr = [r.wsr for r in solve_rows]
        score = max(wsr) if key[3] == 'mlbf' else wsr[-1]
        scores[key] = (score, len(solve_rows), solve_rows[-1].wall_ms)
    return scores


def channel_scores(rows):
    """Best-of-restarts score per ``(snr_db, algo, channel_id)``."""
    best = {}
    for (snr, channel, _, algo), (score, _, _) in solve_scores(rows).items():
        k = (snr, algo, channel)
        best[k] = max(best.get(k, -np.inf), score)
    return best


def _stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def summarize(rows):
    """Per (SNR, algorithm): mean and standard error of channel scores, plus
    mean iterations and wall time per solve."""
    if not rows:
        raise ValueError("cannot summarize an empty result table")
    solves = solve_scores(rows)
    best = channel_scores(rows)
    order = []
    for row in rows:
        if (row.snr_db, row.algo) not in order:
            order.append((row.snr_db, row.algo))
    summary = []
    for snr, algo in order:
        values = [v for (s, a, _), v in best.items() if s == snr and a == algo]
        runs = [(n, ms) for (s, _, _, a), (_, n, ms) in solves.items() if s == snr and a == algo]
        summary.append(SummaryRow(
            snr_db=snr, algo=algo, n_channels=len(values),
            mean_wsr=float(np.mean(values)), stderr_wsr=_stderr(values),
            mean_iters=float(np.mean([n for n, _ in runs])),
            mean_wall_ms=float(np.mean([ms for _, ms in runs]))))
    return summary


def paired_ratio(rows, snr_db, num='mlbf', den='wmmse'):
    """Ratio of mean channel scores and its delta-method standard error.

    Channels are paired, so the error is that of ``mean(a - R b) / mean(b)``.
    """
    best = channel_scores(rows)
    channels = sorted(c for (s, a, c) in best if s == snr_db and a == num
                      and (s, den, c) in best)
    if not channels:
        raise ValueError(f"no paired channels at snr_db={snr_db}")
    a = np.array([best[(snr_db, num, c)] for c in channels])
    b = np.array([best[(snr_db, den, c)] for c in channels])
    ratio = a.mean() / b.mean()
    return float(ratio), _stderr(a - ratio * b) / float(b.mean())


def _fmt(x):
    return repr(float(x))


def write_rows(rows, path_or_file):
    def _write(fh):
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([_fmt(r.snr_db), r.channel_id, r.restart_id, r.algo, r.iter,
                             _fmt(r.wsr), _fmt(r.power), f"{r.wall_ms:.3f}"])

    if hasattr(path_or_file, 'write'):
        _write(path_or_file)
    else:
        with open(path_or_file, 'w', newline='', encoding='utf-8') as fh:
            _write(fh)


def read_rows(path):
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRow(float(s), int(c), int(r), a, int(i), float(w), float(p), float(ms))
                for s, c, r, a, i, w, p, ms in reader]


def write_summary(summary, fh):
    writer = csv.writer(fh, lineterminator='\n')
    writer.writerow(('snr_db', 'algo', 'n_channels', 'mean_wsr', 'stderr_wsr',
                     'mean_iters', 'mean_wall_ms'))
    for s in summary:
        writer.writerow([_fmt(s.snr_db), s.algo, s.n_channels, f"{s.mean_wsr:.6f}",
                         f"{s.stderr_wsr:.6f}", f"{s.mean_iters:.2f}", f"{s.mean_wall_ms:.1f}"])
