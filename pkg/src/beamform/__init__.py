"""Weighted-sum-rate beamforming for the MISO downlink: WMMSE and MLBF solvers."""

from .channel import (CMat, SolverState, SystemConfig, generate_channels, power,
                      project_power, random_feasible_v, weighted_sum_rate)
from .errors import (BeamformError, DomainError, NumericError, PreconditionError,
                     ShapeError, SolverError, StateError)
from .meta import MlbfConfig, solve_mlbf
from .wmmse import Trajectory, WmmseConfig, solve_wmmse

__version__ = '0.1.0'

__all__ = ['CMat', 'SolverState', 'SystemConfig', 'generate_channels', 'power', 'project_power',
           'random_feasible_v', 'weighted_sum_rate', 'BeamformError', 'DomainError',
           'NumericError', 'PreconditionError', 'ShapeError', 'SolverError', 'StateError',
           'MlbfConfig', 'solve_mlbf', 'Trajectory', 'WmmseConfig', 'solve_wmmse']
