"""Exception types shared across the package."""

from __future__ import annotations


class StackLQError(Exception):
    """Base class for every error raised by stacklq."""


class ValidationError(StackLQError):
    """Raised when a model or configuration fails validation.

    ``messages`` holds the individual findings.
    """

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages) or "validation failed")


class NonFinite(StackLQError):
    """A backward integration or a simulation produced NaN/Inf or a huge value.

    Attributes
    ----------
    t : float
        Time (or stage time) at which the blow-up was detected.
    which : str or None
        Name of the block that blew up, if known.
    path : int or None
        Monte Carlo path index, for simulation failures.
    """

    def __init__(self, t, which=None, path=None):
        self.t = float(t)
        self.which = which
        self.path = path
        parts = [f"non-finite value at t={self.t:.6g}"]
        if which is not None:
            parts.append(f"block={which}")
        if path is not None:
            parts.append(f"path={path}")
        super().__init__(", ".join(parts))


class AssumptionViolated(StackLQError):
    """A structural invertibility assumption fails numerically.

    ``which`` is one of ``"A2.1"`` (follower control weight), ``"A2.2"`` ..
    ``"A2.5"`` (the four linear solves of the leader's martingale
    representation).
    """

    def __init__(self, t, which, node=None, condition=None):
        self.t = float(t)
        self.which = which
        self.node = node
        self.condition = condition
        msg = f"assumption {which} violated at t={self.t:.6g}"
        if node is not None:
            msg += f" (node {node})"
        if condition is not None:
            msg += f", condition number {condition:.3e}"
        super().__init__(msg)


class AssumptionA21Violated(AssumptionViolated):
    """The follower's effective control weight is numerically singular."""

    def __init__(self, t, node=None, condition=None):
        super().__init__(t, "A2.1", node=node, condition=condition)


class DegenerateFit(StackLQError):
    """All perturbed costs coincide within Monte Carlo noise."""
