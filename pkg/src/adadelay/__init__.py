"""Delay-adaptive asynchronous stochastic gradient methods and their analysis tools."""
from .core import (
    DelayedGradientMessage,
    DelaySample,
    ProblemConstants,
    RunRecord,
    SparseVector,
    sparse_axpy,
)
from .delay import ScaledDelay, TraceDelay, UniformDelay, delay_stats
from .engine import Server, run, run_batch
from .problems import L2Ball, LogisticProblem, QuadraticProblem, make_logistic, make_synthetic
from .stepsize import AdaDelayCoord, AdaDelayScalar, AdaptiveRevision, AsyncAdaGrad, make_policy

__version__ = "0.1.0"
