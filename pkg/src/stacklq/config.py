"""JSON run configurations for the command-line front end.

A configuration is one JSON object::

    {
      "mode": "cid" | "general" | "principal_agent",
      "grid": {"horizon": 1.0, "n_steps": 200},
      "spec": {...},
      "sim": {"n_paths": 10000, "seed": 1, "n_output_paths": 5},
      "perturbation": {"n_paths": 100000, "epsilons": [-0.04, -0.02, 0.02, 0.04]},
      "model": "reduced",
      "output_dir": "out"
    }

``grid.T`` is accepted as an alias of ``grid.horizon``.  ``spec`` is
either a scalar game (keys ``A0 A1 A2 A3 B0 C0 Q1 N1 G1 Q2 N2
G2 x0``), a matrix game (keys ``n k1 k2 A B C Q1 N1 G1 Q2 N2 G2 x0`` and
optionally ``noise``; ``A``, ``B``, ``C`` hold four matrices each) or, in
mode ``principal_agent``, the contract parameters (``r B sigma sigma_bar y0
m0 T``).  ``perturbation`` is optional; without it no stationarity tests
are run.  ``model`` (``cid`` mode only) selects the leader formulation.

Matrices are written either as ``{"rows": r, "cols": c, "data": [...]}``
with row-major data or as nested lists; a bare number is a 1x1 matrix.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cid_model import MODELS
from .errors import ValidationError
from .game_model import CidSpec, GameSpec, TimeGrid, validate_spec

MODES = ("cid", "general", "principal_agent")
CID_KEYS = ("A0", "A1", "A2", "A3", "B0", "C0", "Q1", "N1", "G1", "Q2", "N2", "G2", "x0")
GAME_KEYS = ("n", "k1", "k2", "A", "B", "C", "Q1", "N1", "G1", "Q2", "N2", "G2", "x0")
DEFAULT_EPSILONS = (-0.04, -0.02, 0.02, 0.04)


@dataclass(frozen=True)
class SimSettings:
    n_paths: int = 10000
    seed: int = 0
    n_output_paths: int = 5


@dataclass(frozen=True)
class PerturbSettings:
    n_paths: int = 100000
    epsilons: tuple = DEFAULT_EPSILONS
    seed: int | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: str
    grid: TimeGrid
    spec: object                  # GameSpec, or PaParams in principal_agent mode
    sim: SimSettings
    perturbation: PerturbSettings | None
    output_dir: Path
    model: str = "reduced"
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def with_seed(self, seed: int) -> "RunConfig":
        pert = self.perturbation
        if pert is not None:
            pert = PerturbSettings(pert.n_paths, pert.epsilons, seed)
        return RunConfig(self.mode, self.grid, self.spec,
                         SimSettings(self.sim.n_paths, seed, self.sim.n_output_paths),
                         pert, self.output_dir, self.model, self.raw)

    @property
    def perturbation_seed(self) -> int:
        if self.perturbation is not None and self.perturbation.seed is not None:
            return self.perturbation.seed
        return self.sim.seed


def _int(msgs, where, value, minimum=0):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        msgs.append(f"{where} must be an integer")
        return None
    if value < minimum:
        msgs.append(f"{where} must be >= {minimum}")
        return None
    return int(value)


def _matrix(msgs, where, value):
    if isinstance(value, dict):
        try:
            r, c = int(value["rows"]), int(value["cols"])
            data = np.array(value["data"], dtype=float).ravel()
        except (KeyError, TypeError, ValueError):
            msgs.append(f"{where} must have integer rows, cols and numeric data")
            return None
        if r < 1 or c < 1 or data.size != r * c:
            msgs.append(f"{where}: data has {data.size} entries, expected rows*cols")
            return None
        return data.reshape(r, c)
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError):
        msgs.append(f"{where} must be numeric")
        return None
    if M.ndim == 0:
        M = M.reshape(1, 1)
    return M


def _vector(msgs, where, value):
    if isinstance(value, dict):
        M = _matrix(msgs, where, value)
        return None if M is None else M.ravel()
    try:
        return np.atleast_1d(np.array(value, dtype=float)).ravel()
    except (TypeError, ValueError):
        msgs.append(f"{where} must be numeric")
        return None


def parse_game_spec(data: dict) -> GameSpec:
    """Build and validate a :class:`GameSpec` from a scalar or matrix description."""
    if not isinstance(data, dict):
        raise ValidationError(["spec must be an object"])
    msgs: list = []
    if "n" not in data:
        missing = [k for k in CID_KEYS if k not in data]
        if missing:
            raise ValidationError([f"spec: missing key {k}" for k in missing])
        try:
            cid = CidSpec(**{k: float(data[k]) for k in CID_KEYS})
        except (TypeError, ValueError) as exc:
            raise ValidationError([f"spec: {exc}"]) from exc
        from .game_model import embed_cid
        spec = embed_cid(cid)
    else:
        missing = [k for k in GAME_KEYS if k not in data]
        if missing:
            raise ValidationError([f"spec: missing key {k}" for k in missing])
        mats = {}
        for name in ("A", "B", "C"):
            seq = data[name]
            if not isinstance(seq, list) or len(seq) != 4:
                msgs.append(f"spec.{name} must hold four matrices")
                continue
            mats[name] = tuple(_matrix(msgs, f"spec.{name}[{i}]", v) for i, v in enumerate(seq))
        for name in ("Q1", "N1", "G1", "Q2", "N2", "G2"):
            mats[name] = _matrix(msgs, f"spec.{name}", data[name])
        dims = {k: _int(msgs, f"spec.{k}", data[k], 1) for k in ("n", "k1", "k2")}
        x0 = _vector(msgs, "spec.x0", data["x0"])
        noise = data.get("noise")
        if noise is not None:
            if not isinstance(noise, list) or len(noise) != 3:
                msgs.append("spec.noise must hold three vectors")
            else:
                noise = tuple(_vector(msgs, f"spec.noise[{i}]", v) for i, v in enumerate(noise))
        if msgs:
            raise ValidationError(msgs)
        try:
            spec = GameSpec(x0=x0, noise=noise, **dims, **mats)
        except (TypeError, ValueError) as exc:
            raise ValidationError([f"spec: {exc}"]) from exc
    report = validate_spec(spec)
    if not report.ok:
        raise ValidationError([f"spec: {m}" for m in report])
    return spec


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded configuration object."""
    if not isinstance(data, dict):
        raise ValidationError(["configuration must be a JSON object"])
    msgs: list = []
    mode = data.get("mode")
    if mode not in MODES:
        raise ValidationError([f"mode must be one of {', '.join(MODES)}"])
    g = data.get("grid")
    if not isinstance(g, dict):
        raise ValidationError(["grid must be an object with horizon and n_steps"])
    n_steps = _int(msgs, "grid.n_steps", g.get("n_steps"), 2)
    T = g.get("horizon", g.get("T"))
    if mode == "principal_agent" and T is None and isinstance(data.get("spec"), dict):
        T = data["spec"].get("T")
    try:
        T = float(T)
        if not np.isfinite(T) or T <= 0:
            raise ValueError
    except (TypeError, ValueError):
        msgs.append("grid.horizon must be a positive number")
    sim_d = data.get("sim", {})
    if not isinstance(sim_d, dict):
        msgs.append("sim must be an object")
        sim_d = {}
    sim = SimSettings(
        n_paths=_int(msgs, "sim.n_paths", sim_d.get("n_paths", SimSettings.n_paths), 1),
        seed=_int(msgs, "sim.seed", sim_d.get("seed", SimSettings.seed), 0),
        n_output_paths=_int(msgs, "sim.n_output_paths",
                            sim_d.get("n_output_paths", SimSettings.n_output_paths), 0))
    pert = None
    if data.get("perturbation") is not None:
        p = data["perturbation"]
        if not isinstance(p, dict):
            msgs.append("perturbation must be an object")
        else:
            eps = p.get("epsilons", list(DEFAULT_EPSILONS))
            try:
                eps = tuple(float(e) for e in eps)
            except (TypeError, ValueError):
                msgs.append("perturbation.epsilons must be numbers")
                eps = ()
            if eps and len(set(eps)) < 3:
                msgs.append("perturbation.epsilons needs at least three distinct values")
            seed = p.get("seed")
            if seed is not None:
                seed = _int(msgs, "perturbation.seed", seed, 0)
            pert = PerturbSettings(
                n_paths=_int(msgs, "perturbation.n_paths",
                             p.get("n_paths", PerturbSettings.n_paths), 2),
                epsilons=eps, seed=seed)
    model = data.get("model", "reduced")
    if model not in MODELS:
        msgs.append(f"model must be one of {', '.join(MODELS)}")
    if mode != "cid" and model != "reduced":
        msgs.append("model is only configurable in mode cid")
    if sim.n_paths is not None and sim.n_paths < 100:
        msgs.append("sim.n_paths must be >= 100 (tower check)")
    if msgs:
        raise ValidationError(msgs)
    grid = TimeGrid(T, n_steps)
    if mode == "principal_agent":
        from .principal_agent import PaParams
        sd = dict(data.get("spec") or {})
        sd.setdefault("T", T)
        spec = PaParams.from_dict(sd)
        if abs(spec.T - T) > 1e-12 * max(1.0, T):
            raise ValidationError(["grid.horizon and spec.T differ"])
    else:
        spec = parse_game_spec(data.get("spec"))
        if mode == "cid" and not spec.control_independent:
            raise ValidationError(["mode cid requires B_i = C_i = 0 for i = 1, 2, 3"])
        if mode == "cid" and spec.has_additive_noise and \
                any(np.any(spec.A[i]) for i in (1, 2, 3)):
            raise ValidationError(["additive noise together with state-dependent "
                                   "diffusion is not supported"])
    out = data.get("output_dir", "stacklq_output")
    out = Path(out)
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return RunConfig(mode=mode, grid=grid, spec=spec, sim=sim, perturbation=pert,
                     output_dir=out, model=model, raw=data)


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read and validate a configuration file.

    A relative ``output_dir`` is resolved against the current directory.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ValidationError([f"cannot read {path}: {exc.strerror}"]) from exc
    except json.JSONDecodeError as exc:
        raise ValidationError([f"invalid JSON: {exc.msg} (line {exc.lineno})"]) from exc
    return parse_config(data)
