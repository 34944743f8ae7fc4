"""Numerical engine: projected gradient ascent over box constraints for
control programs, projected subgradient updates for the duals, and a
brute-force grid oracle used as independent ground truth in tests.

Gradients always come from symbolic differentiation of the objective, so
solver behavior is deterministic and reproducible.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from . import expr as ex
from .decompose import ControlProgram, DualProblem, split_by_layer, split_by_entity
from .expr import Env, Expr
from .instantiate import InstantiatedProblem


class SolveError(Exception):
    pass


class NumericalError(SolveError):
    pass


class InfeasibleEverywhere(SolveError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    step: float = 0.05
    dual_step: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    boxes: dict[str, tuple[float, float]] = field(default_factory=dict)
    diminishing: bool = False   # dual step decays as step/sqrt(t)
    max_move: float = 0.0       # per-iteration trust cap on |step*grad|; 0 = off

    def __post_init__(self):
        if self.step <= 0 or self.dual_step <= 0 or self.tol <= 0:
            raise SolveError("steps and tolerance must be positive")
        for name, (lo, hi) in self.boxes.items():
            if lo > hi:
                raise SolveError(f"{name}: box lower {lo} exceeds upper {hi}")

    def box(self, name: str) -> tuple[float, float]:
        for key in (name, name.rsplit("_", 1)[0]):
            if key in self.boxes:
                return self.boxes[key]
        raise SolveError(f"no box bounds for {name}")


def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def solve_program(prog: ControlProgram, params: Env, cfg: SolverConfig) -> dict[str, float]:
    """Projected gradient ascent on the program's (concrete) objective over
    its decision variables.  All foreign variables and dual values must be
    bound in params; anchors default to `<var>_anchor` entries, else the
    box midpoint.  Returns the converged decision."""
    if ex.contains_bigsum(prog.objective):
        raise SolveError("objective still contains unexpanded collection sums")
    owned = sorted(v for v in ex.free_vars(prog.objective)
                   if v.rsplit("_", 1)[0] == prog.decision or v == prog.decision)
    if not owned:
        raise SolveError(f"objective has no {prog.decision} variable")

    obj = ex.compile_expr(prog.objective)
    grads = {v: ex.compile_expr(ex.differentiate(prog.objective, v)) for v in owned}

    env = dict(params)
    x: dict[str, float] = {}
    for v in owned:
        lo, hi = cfg.box(v)
        x[v] = _clip(params.get(f"{v}_anchor", (lo + hi) / 2.0), lo, hi)
    env.update(x)

    # Case-2 gradient mode is a single raw projected first-order step
    if prog.mode == "gradient":
        for v in owned:
            g = grads[v](env)
            lo, hi = cfg.box(v)
            x[v] = _clip(x[v] + cfg.step * g, lo, hi)
        return x

    current = obj(env)
    if not math.isfinite(current):
        raise NumericalError("non-finite objective at start")
    for _ in range(cfg.max_iters):
        g = {}
        for v in owned:
            g[v] = grads[v](env)
            if not math.isfinite(g[v]):
                raise NumericalError(f"non-finite gradient for {v}")
        # projected step, halved until the objective does not decrease
        scale = 1.0
        moved = 0.0
        for _ in range(30):
            cand = {}
            moved = 0.0
            for v in owned:
                lo, hi = cfg.box(v)
                delta = scale * cfg.step * g[v]
                if cfg.max_move > 0:
                    delta = _clip(delta, -cfg.max_move, cfg.max_move)
                cand[v] = _clip(x[v] + delta, lo, hi)
                moved += (cand[v] - x[v]) ** 2
            trial = obj({**env, **cand})
            if trial >= current or moved == 0.0:
                break
            scale *= 0.5
        else:
            break
        if moved == 0.0:
            break
        x.update(cand)
        env.update(cand)
        current = trial
        if math.sqrt(moved) < cfg.tol:
            break
    if not math.isfinite(current):
        raise NumericalError("non-finite objective at solution")
    return x


@dataclass
class DualState:
    values: dict[str, float] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, v in self.values.items():
            if v < 0:
                raise SolveError(f"dual {k} initialized negative")


def dual_update(state: DualState, slacks: dict[str, float],
                cfg: SolverConfig) -> DualState:
    """Projected subgradient step on the duals: lbd_j <- max(0, lbd_j -
    step * slack_j), slack_j = rhs_j - lhs_j at the current decisions."""
    t = state.step + 1
    step = cfg.dual_step / math.sqrt(t) if cfg.diminishing else cfg.dual_step
    values = dict(state.values)
    for name, slack in slacks.items():
        values[name] = max(0.0, values.get(name, 0.0) - step * slack)
    return DualState(values, t)


def centralized_oracle(inst: InstantiatedProblem, resolution: float,
                       params: Env | None = None,
                       boxes: dict[str, tuple[float, float]] | None = None,
                       ) -> tuple[dict[str, float], float]:
    """Exhaustive grid search over the feasible box: the independent ground
    truth the distributed pipeline is checked against.  Limited to small
    decision counts by design."""
    sub = {k: ex.const(v) for k, v in (params or {}).items()}
    utility = ex.substitute(inst.utility, sub)
    cstrs = [(ex.substitute(c.lhs, sub), ex.substitute(c.rhs, sub))
             for c in inst.constraints]
    names = list(inst.decision_vars)
    if len(names) > 6:
        raise SolveError(f"oracle limited to 6 decision variables, got {len(names)}")
    all_boxes = dict(inst.boxes)
    all_boxes.update(boxes or {})
    grids: dict[str, list[float]] = {}
    for v in names:
        lo, hi = all_boxes.get(v, (None, None))
        if lo is None or hi is None:
            raise SolveError(f"{v}: oracle needs finite box bounds")
        n = int(round((hi - lo) / resolution))
        grids[v] = [lo + k * resolution for k in range(n + 1)]

    free = set(ex.free_vars(utility))
    for lhs, rhs in cstrs:
        free |= ex.free_vars(lhs) | ex.free_vars(rhs)
    unknown = free - set(names)
    if unknown:
        raise SolveError(f"oracle: unbound parameters {sorted(unknown)}")

    # constraints become checkable once all their variables are assigned
    depth_of = {v: i for i, v in enumerate(names)}
    checks: list[list] = [[] for _ in names]
    for lhs, rhs in cstrs:
        vs = ex.free_vars(lhs) | ex.free_vars(rhs)
        d = max((depth_of[v] for v in vs), default=0)
        checks[d].append((ex.compile_expr(lhs), ex.compile_expr(rhs)))
    util_fn = ex.compile_expr(utility)
    want_max = inst.sense == "max"

    best: dict[str, float] | None = None
    best_val = -math.inf if want_max else math.inf
    env: Env = {}

    def descend(depth: int) -> None:
        nonlocal best, best_val
        if depth == len(names):
            val = util_fn(env)
            if (want_max and val > best_val) or (not want_max and val < best_val):
                best_val = val
                best = dict(env)
            return
        v = names[depth]
        for g in grids[v]:
            env[v] = g
            if all(l(env) <= r(env) + 1e-12 for l, r in checks[depth]):
                descend(depth + 1)
        del env[v]

    descend(0)
    if best is None:
        raise InfeasibleEverywhere("no feasible grid point")
    return best, best_val


@dataclass
class LoopResult:
    decisions: dict[str, float]       # running-average (ergodic) decision
    last: dict[str, float]            # final iterate
    duals: DualState
    utility: float                    # problem utility at the averaged decision
    trace: list[float]                # averaged-utility trajectory


def dual_loop(dp: DualProblem, cfg: SolverConfig, epochs: int,
              seed: int = 0, params: Env | None = None) -> LoopResult:
    """The full distributed loop at design scale: solve every entity
    subproblem against the current duals, update the duals from the
    constraint slacks, repeat.  The reported decision is the running
    average of iterates (standard primal recovery for constant-step dual
    subgradient)."""
    inst = dp.inst
    graph = inst.problem.graph
    layers, _ = split_by_layer(dp, graph)
    subs = [s for layer in layers.values() for s in split_by_entity(layer, graph)]
    programs = []
    for s in subs:
        owned_ctrl = [v for v in s.owned
                      if v.rsplit("_", 1)[0] in graph.elements
                      and graph.element(v.rsplit("_", 1)[0]).ctrl]
        if not owned_ctrl:
            continue
        base = owned_ctrl[0].rsplit("_", 1)[0]
        prog = ControlProgram(s.layer, s.entity_kind or "", s.objective, "max",
                              base, ())
        programs.append((prog, owned_ctrl))

    fixed: Env = dict(params or {})
    rng = random.Random(seed)
    x: dict[str, float] = {}
    for v in inst.decision_vars:
        lo, hi = cfg.box(v)
        x[v] = rng.uniform(lo, hi)
    duals = DualState({dv.name: 0.0 for dv in dp.registry})
    avg = dict(x)
    util_fn = ex.compile_expr(inst.utility)
    slack_fns = [(dv.name, ex.compile_expr(dv.lhs), ex.compile_expr(dv.rhs))
                 for dv in dp.registry]
    trace: list[float] = []

    for t in range(1, epochs + 1):
        shared: Env = dict(fixed)
        shared.update(duals.values)
        shared.update(x)  # foreign decisions seen at their current values
        for prog, owned in programs:
            anchors = {f"{v}_anchor": x[v] for v in owned}
            decision = solve_program(prog, {**shared, **anchors}, cfg)
            x.update(decision)
        env = dict(fixed)
        env.update(x)
        slacks = {name: r(env) - l(env) for name, l, r in slack_fns}
        duals = dual_update(duals, slacks, cfg)
        for v in avg:
            avg[v] += (x[v] - avg[v]) / t
        trace.append(util_fn({**fixed, **avg}))

    return LoopResult(avg, x, duals, util_fn({**fixed, **avg}), trace)
