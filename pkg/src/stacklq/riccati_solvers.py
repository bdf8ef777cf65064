"""Backward solvers for the follower's and the leader's Riccati systems.

Every solver integrates the follower's equation *jointly* with whatever
depends on it, so that RK4 stage values of the follower solution are exact
stage values rather than interpolants.  Because the follower block of the
joint right-hand side depends only on itself, the follower component of a
joint solve is bit-identical to a standalone :func:`solve_follower_riccati`
run on the same grid; the supplied follower path is checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cid_model
from .decoupling import riccati_rhs
from .errors import AssumptionViolated, NonFinite
from .game_model import (CidSpec, GameSpec, MatPath, TimeGrid, as_game,
                         validate_spec)
from .errors import ValidationError
from .general_assembly import (check_effective_weight, effective_weight,
                               leader_blocks_at)
from .ode import (BlockLayout, RiccatiField, integrate_backward,
                  residual_bound, riccati_residual)

__all__ = [
    "RiccatiField", "integrate_backward", "riccati_residual", "residual_bound",
    "LeaderSystemCid", "GeneralLeaderResult", "follower_field",
    "solve_follower_riccati", "solve_error_lyapunov", "cid_leader_field",
    "solve_cid_leader_system", "solve_cid", "general_leader_field",
    "attempt_general_leader_system",
]

LEVEL_BLOCKS = ("Pcal_full", "Pcal_hat", "Pcal_check", "Pcal_common")


def _require_valid(spec: GameSpec) -> None:
    report = validate_spec(spec)
    if not report.ok:
        raise ValidationError(report.messages)


def _node_of(t: float, grid: TimeGrid) -> int:
    return int(min(grid.n_steps, max(0, np.ceil(t / grid.h - 1e-9))))


def _require_cid(spec: GameSpec) -> None:
    if not spec.control_independent:
        raise ValueError("this solver requires control-independent diffusion "
                         "(B_i = C_i = 0 for i = 1, 2, 3)")


# ---------------------------------------------------------------------------
# follower
# ---------------------------------------------------------------------------

def follower_field(spec, model: str = "reduced") -> RiccatiField:
    """Follower Riccati field; ``model="extended"`` adds the Lyapunov block ``Pi``."""
    spec = as_game(spec)
    n = spec.n
    if cid_model.check_model(model) == "reduced":
        rhs = cid_model.follower_rhs_factory(spec)
        return RiccatiField(lambda t, P: rhs(P), np.array(spec.G1), name="P")
    _require_cid(spec)
    layout = BlockLayout([("P", (n, n)), ("Pi", (n, n))])

    def rhs(t, flat):
        b = layout.unpack(flat)
        return layout.pack({"P": cid_model.follower_rhs_extended(spec, b["P"], b["Pi"]),
                            "Pi": cid_model.lyapunov_rhs(spec, b["Pi"])})

    return RiccatiField(rhs, layout.pack({"P": spec.G1, "Pi": spec.G1}), layout, name="P")


def _check_a21(spec: GameSpec, path: MatPath) -> None:
    grid = path.grid
    if spec.control_independent:       # effective weight is N1 at every node
        check_effective_weight(effective_weight(spec, path[-1]), grid.horizon_T,
                               node=grid.n_steps)
        return
    for k in range(grid.n_steps, -1, -1):
        check_effective_weight(effective_weight(spec, path[k]), grid.time(k), node=k)


def solve_follower_riccati(spec, grid: TimeGrid, model: str = "reduced",
                           validate: bool = True) -> MatPath:
    """Follower's Riccati solution ``P`` on ``grid``.

    Raises :class:`~stacklq.errors.AssumptionA21Violated` when
    ``N1 + sum_i Bi^T P Bi`` is numerically singular at some node and
    :class:`~stacklq.errors.NonFinite` on blow-up.  ``validate=False`` skips
    the definiteness checks (used for games with indefinite weights).
    """
    spec = as_game(spec)
    if validate:
        _require_valid(spec)
    check_effective_weight(effective_weight(spec, np.asarray(spec.G1)),
                           grid.horizon_T, node=grid.n_steps)
    fld = follower_field(spec, model)
    try:
        path = integrate_backward(fld, grid)
    except np.linalg.LinAlgError as exc:  # singular effective weight mid-step
        raise AssumptionViolated(float("nan"), "A2.1") from exc
    P = fld.split(path)["P"]
    _check_a21(spec, P)
    return P


def solve_error_lyapunov(spec, grid: TimeGrid) -> MatPath:
    """Full-information Lyapunov solution used by the extended follower model."""
    spec = as_game(spec)
    fld = RiccatiField(lambda t, Pi: cid_model.lyapunov_rhs(spec, Pi),
                       np.array(spec.G1), name="Pi")
    return integrate_backward(fld, grid)


# ---------------------------------------------------------------------------
# leader system, control-independent diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeaderSystemCid:
    """Decoupling coefficients of the leader system on a grid.

    ``P1..P4`` multiply the full, hat, check and common projections of the
    augmented state (``2n x 2n`` for ``model="reduced"``, ``3n x 3n`` for
    ``"extended"``).  ``follower`` is the follower solution used and ``Pi``
    the Lyapunov block (extended model only).
    """

    P1: MatPath
    P2: MatPath
    P3: MatPath
    P4: MatPath
    grid: TimeGrid
    model: str = "reduced"
    follower: MatPath | None = None
    Pi: MatPath | None = None
    spec: GameSpec | None = field(default=None, repr=False, compare=False)

    @property
    def blocks(self) -> tuple:
        return (self.P1, self.P2, self.P3, self.P4)

    def at(self, k: int) -> list:
        return [b[k] for b in self.blocks]

    @property
    def dim(self) -> int:
        return self.P1.shape[0]


def _joint_layout(n: int, m: int, extended: bool) -> BlockLayout:
    blocks = [("P", (n, n))]
    if extended:
        blocks.append(("Pi", (n, n)))
    blocks += [(name, (m, m)) for name in LEVEL_BLOCKS]
    return BlockLayout(blocks)


def cid_leader_field(spec, model: str = "reduced", method: str = "direct") -> RiccatiField:
    """Joint field of the follower block(s) and the four leader blocks.

    ``method="direct"`` uses the explicitly written reduced system;
    ``method="engine"`` derives the equations from the generic decoupling
    engine (required for the extended model).
    """
    spec = as_game(spec)
    _require_cid(spec)
    cid_model.check_model(model)
    if method not in ("direct", "engine"):
        raise ValueError("method must be 'direct' or 'engine'")
    if model == "extended" and method == "direct":
        method = "engine"
    n = spec.n
    extended = model == "extended"
    m = (3 if extended else 2) * n
    layout = _joint_layout(n, m, extended)
    fb_T = (cid_model.extended_fbsde(spec, np.array(spec.G1), np.array(spec.G1))
            if extended else cid_model.reduced_fbsde(spec, np.array(spec.G1)))
    term = {"P": spec.G1, "Pcal_full": fb_T.terminal}
    if extended:
        term["Pi"] = spec.G1
    for name in LEVEL_BLOCKS[1:]:
        term[name] = np.zeros((m, m))

    def rhs(t, flat):
        b = layout.unpack(flat)
        P = b["P"]
        Pcal = [b[name] for name in LEVEL_BLOCKS]
        out = {}
        if extended:
            Pi = b["Pi"]
            out["P"] = cid_model.follower_rhs_extended(spec, P, Pi)
            out["Pi"] = cid_model.lyapunov_rhs(spec, Pi)
            dP, _ = riccati_rhs(cid_model.extended_fbsde(spec, P, Pi), Pcal, t=t)
        else:
            out["P"] = cid_model.follower_rhs_reduced(spec, P)
            if method == "direct":
                dP = cid_model.reduced_leader_rhs(spec, P, Pcal)
            else:
                dP, _ = riccati_rhs(cid_model.reduced_fbsde(spec, P), Pcal, t=t)
        for name, d in zip(LEVEL_BLOCKS, dP):
            out[name] = d
        return layout.pack(out)

    return RiccatiField(rhs, layout.pack(term), layout, name="leader")


def _check_follower_input(P: MatPath, P_joint: MatPath) -> None:
    scale = 1.0 + P_joint.max_norm()
    if P.values.shape != P_joint.values.shape or \
            np.max(np.abs(P.values - P_joint.values)) > 1e-10 * scale:
        raise ValueError("P is not the follower solution of this spec and model on this grid")


def solve_cid_leader_system(spec, P: MatPath | None, grid: TimeGrid,
                            model: str = "reduced", method: str = "direct",
                            validate: bool = True) -> LeaderSystemCid:
    """Solve the four leader blocks backward from ``P1(T) = diag(G2, 0)``.

    The system is lower triangular (full; hat and check from full; common
    from all), so the joint RK4 step is equivalent to integrating the blocks
    one after the other with exact stage values of their inputs.
    """
    spec = as_game(spec)
    if validate:
        _require_valid(spec)
    _require_cid(spec)
    fld = cid_leader_field(spec, model, method)
    path = integrate_backward(fld, grid)
    parts = fld.split(path)
    if P is not None:
        if P.grid != grid:
            raise ValueError("P was solved on a different grid")
        _check_follower_input(P, parts["P"])
    return LeaderSystemCid(
        P1=parts["Pcal_full"], P2=parts["Pcal_hat"], P3=parts["Pcal_check"],
        P4=parts["Pcal_common"], grid=grid, model=model, follower=parts["P"],
        Pi=parts.get("Pi"), spec=spec)


def solve_cid(spec, grid: TimeGrid, model: str = "reduced",
              validate: bool = True) -> LeaderSystemCid:
    """Follower and leader solutions in one call."""
    return solve_cid_leader_system(spec, None, grid, model, validate=validate)


# ---------------------------------------------------------------------------
# leader system, general diffusion
# ---------------------------------------------------------------------------

@dataclass
class GeneralLeaderResult:
    """Outcome of :func:`attempt_general_leader_system`.

    On success ``blocks`` holds the four leader paths and ``cond`` an array
    ``(n_nodes, 4)`` of step-matrix condition numbers ordered by level
    (full, hat, check, common).  On failure ``failure`` holds the exception
    (with ``node`` and ``which``) and the paths are ``None``.
    """

    grid: TimeGrid
    ok: bool
    follower: MatPath | None = None
    blocks: tuple | None = None
    cond: np.ndarray | None = None
    failure: Exception | None = None

    @property
    def P1(self):
        return self.blocks[0] if self.blocks else None

    @property
    def P2(self):
        return self.blocks[1] if self.blocks else None

    @property
    def P3(self):
        return self.blocks[2] if self.blocks else None

    @property
    def P4(self):
        return self.blocks[3] if self.blocks else None

    def raise_for_failure(self) -> None:
        if self.failure is not None:
            raise self.failure


def general_leader_field(spec: GameSpec, grid: TimeGrid | None = None) -> RiccatiField:
    """Joint field (follower + four leader blocks) for control-dependent diffusion.

    The martingale representation is recomputed at every stage.
    """
    spec = as_game(spec)
    n = spec.n
    m = 2 * n
    layout = _joint_layout(n, m, False)
    term = {"P": spec.G1, "Pcal_full": leader_blocks_at(
        spec, np.array(spec.G1), spec_time(grid),
        node=grid.n_steps if grid is not None else None).fbsde.terminal}
    for name in LEVEL_BLOCKS[1:]:
        term[name] = np.zeros((m, m))

    def rhs(t, flat):
        b = layout.unpack(flat)
        P = b["P"]
        node = _node_of(t, grid) if grid is not None else None
        blk = leader_blocks_at(spec, P, t, node=node)
        dP, _ = riccati_rhs(blk.fbsde, [b[name] for name in LEVEL_BLOCKS], t=t, node=node)
        out = {"P": cid_model.follower_rhs_reduced(spec, P)}
        out.update(zip(LEVEL_BLOCKS, dP))
        return layout.pack(out)

    return RiccatiField(rhs, layout.pack(term), layout, name="leader")


def spec_time(grid: TimeGrid | None) -> float:
    return grid.horizon_T if grid is not None else float("nan")


def attempt_general_leader_system(spec: GameSpec, grid: TimeGrid) -> GeneralLeaderResult:
    """Best-effort backward integration of the coupled leader system.

    Never raises for assumption failures or blow-up: these are reported in
    the returned :class:`GeneralLeaderResult`.
    """
    from .decoupling import solve_sigma

    spec = as_game(spec)
    _require_valid(spec)
    try:
        fld = general_leader_field(spec, grid)
        path = integrate_backward(fld, grid)
    except (AssumptionViolated, NonFinite) as exc:
        return GeneralLeaderResult(grid=grid, ok=False, failure=exc)
    parts = fld.split(path)
    blocks = tuple(parts[name] for name in LEVEL_BLOCKS)
    cond = np.empty((grid.n_steps + 1, 4))
    for k in range(grid.n_steps + 1):
        blk = leader_blocks_at(spec, parts["P"][k], grid.time(k), node=k)
        chain = solve_sigma(blk.fbsde, [b[k] for b in blocks], check=False)
        cond[k] = [chain.cond[lv] for lv in (0, 1, 2, 3)]
    return GeneralLeaderResult(grid=grid, ok=True, follower=parts["P"], blocks=blocks,
                               cond=cond)


def residuals(field: RiccatiField, path: MatPath, grid: TimeGrid) -> dict:
    """Per-block residual and acceptance bound of a joint solution."""
    out = {}
    if field.layout is None:
        return {field.name: (riccati_residual(path, field, grid), residual_bound(path, grid))}
    h = grid.h
    v = path.values
    worst = {name: 0.0 for name in field.layout.names}
    for k in range(1, grid.n_steps):
        d = (v[k + 1] - v[k - 1]) / (2.0 * h) - field.rhs(grid.time(k), v[k])
        for name in field.layout.names:
            worst[name] = max(worst[name], float(np.max(np.abs(d[field.layout.slices[name]]))))
    parts = field.split(path)
    for name in field.layout.names:
        out[name] = (worst[name], residual_bound(parts[name], grid))
    return out


def as_spec(spec) -> GameSpec:
    """Re-export of :func:`stacklq.game_model.as_game` for convenience."""
    if isinstance(spec, (CidSpec, GameSpec)):
        return as_game(spec)
    raise TypeError("expected CidSpec or GameSpec")
