"""Exceptions raised by the solvers and simulators."""


class ContMPCError(Exception):
    pass


class Divergence(ContMPCError):
    """A state became non-finite during a rollout or a simulation."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class AssumptionViolation(ContMPCError):
    """The Hessian of the horizon cost is not positive definite.

    ``min_eigenvalue`` carries the offending smallest eigenvalue, ``time``
    the simulation time when raised mid-trajectory.
    """

    def __init__(self, message, min_eigenvalue=None, time=None, point=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.time = time
        self.point = point


class NoConvergence(ContMPCError):
    def __init__(self, message, residual=None, time=None, point=None):
        super().__init__(message)
        self.residual = residual
        self.time = time
        self.point = point


class MetricViolation(ContMPCError):
    """The differential Lyapunov function became non-positive."""
