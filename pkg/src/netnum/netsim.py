"""Deterministic simulation of a multi-hop wireless network with
SINR-coupled links, per-node parameter registers, dual-coefficient
message passing along session paths, and multi-timescale execution of
generated control programs.

Model notes:
  - Fluid flow: sessions are rate processes in packets/s; no per-packet
    queues.  A session's achieved throughput is its rate scaled by the
    worst proportional capacity share along its path.
  - The control plane works in packets/s; the capacity model produces
    bits/s and is divided by the packet size.
  - Power decisions are transmit gain in dB on [0, max]; the capacity
    model consumes linear power through lnkpwr = 10^(gain/10).
  - Channel gains follow log-distance path loss from node positions; two
    links interfere iff they share a frequency band.  A transmission
    whose source is the interfered link's receiver is excluded
    (half-duplex conflict the fluid model abstracts away).
  - Dual values travel as zero-loss messages with one epoch of delay.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

from . import expr as ex
from .abstraction import BoxRule, ControlProblem, resolve_model
from .decompose import ControlProgram
from .expr import Env, Expr
from .solve import DualState, SolverConfig, dual_update, solve_program

SCHEMES = ("joint", "rate-only", "power-only", "no-control", "best-response")

DB_TO_LINEAR = ex.exp10(ex.mul(ex.const(0.1), ex.var("pwrgain")))


class NetsimError(Exception):
    pass


class ConfigError(NetsimError):
    pass


class UnknownEntity(NetsimError):
    pass


class UnresolvableCollectionRule(NetsimError):
    pass


class DomainError(NetsimError):
    pass


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1               # 1..5; 0 = fully custom
    seed: int = 0
    bandwidth: float = 200e3        # Hz per band
    packet_bits: int = 2048
    noise: float = 1e-4
    pathloss_exp: float = 3.0
    max_gain_db: float = 30.0
    phys_epoch: float = 1.0         # seconds per physical control epoch
    timescale: int = 30             # transport epoch = timescale * physical
    rate_min: float = 0.05          # packets/s
    rate_max: float = 100.0
    rate_step: float = 25.0
    rate_iters: int = 10
    rate_move_max: float = 3.0      # pps per solver iteration (tracking mode)
    power_step: float = 60.0        # dB per unit gradient; backtracking damps
    power_iters: int = 4
    power_move_max: float = 0.5     # per-iteration trust cap in dB
    dual_step: float = 2e-3
    congestion_exp: float = 2.0     # goodput collapse under overload (>= 1)
    slack_clip: float = 25.0        # bounded dual subgradients (pps)
    chain_spacing: float = 55.0     # meters between session chains
    hop_short: float = 40.0         # first chain's hop length (meters)
    hop_long: float = 60.0          # second chain's hop length
    band_pattern: tuple[int, ...] = ()
    budgets: tuple[float, ...] = () # packets per session; 0 = unlimited

    @property
    def transport_epoch(self) -> float:
        return self.timescale * self.phys_epoch


class Registers:
    """Per-node, per-layer parameter registers: measured state is posted by
    the simulator, decisions are written only by installed programs."""

    def __init__(self):
        self._state: dict[str, dict[str, float]] = {}
        self._decisions: dict[str, dict[str, float]] = {}
        self._programs: dict[str, ControlProgram] = {}

    def post_state(self, layer: str, name: str, value: float) -> None:
        self._state.setdefault(layer, {})[name] = value

    def read(self, layer: str, name: str, default: float = 0.0) -> float:
        return self._state.get(layer, {}).get(name, default)

    def write_decision(self, layer: str, name: str, value: float) -> None:
        self._decisions.setdefault(layer, {})[name] = value

    def decision(self, layer: str, name: str, default: float) -> float:
        return self._decisions.get(layer, {}).get(name, default)

    def install(self, layer: str, program: ControlProgram) -> None:
        self._programs[layer] = program

    def program(self, layer: str) -> ControlProgram | None:
        return self._programs.get(layer)


@dataclass
class Node:
    index: int
    pos: tuple[float, float]
    max_gain_db: float = 30.0
    registers: Registers = field(default_factory=Registers)


@dataclass
class Link:
    index: int
    tx: int
    rx: int
    band: int
    bandwidth: float
    gain: float
    noise: float
    cross_gain: dict[int, float] = field(default_factory=dict)
    pwr_gain_db: float = 0.0
    power_box: tuple[float, float] = (0.0, 30.0)
    lam: float = 0.0
    lam_prev: float = 0.0
    capacity_pps: float = 0.0
    active: bool = True

    @property
    def power_linear(self) -> float:
        return db_to_linear(self.pwr_gain_db) if self.active else 0.0


@dataclass
class Session:
    index: int
    src: int
    dst: int
    path: tuple[int, ...]
    rate: float = 1.0
    rate_box: tuple[float, float] = (0.05, 400.0)
    budget: float = 0.0   # packets; 0 = unlimited
    sent: float = 0.0
    done: bool = False
    throughput: float = 0.0


@dataclass
class ConstraintFamily:
    """Runtime face of one abstract constraint: per-member dual variables
    plus the slack expression evaluated against live network state."""
    ordinal: int
    holder: str            # netlnk | netses
    entity: str            # link | session
    lhs: Expr
    rhs: Expr
    duals: DualState = field(default_factory=DualState)
    prev: dict[int, float] = field(default_factory=dict)


@dataclass
class NetState:
    cfg: ScenarioConfig
    nodes: list[Node]
    links: list[Link]
    sessions: list[Session]
    clock: float = 0.0
    epoch: int = 0
    families: list[ConstraintFamily] = field(default_factory=list)
    utility_expr: Expr | None = None
    utility_sense: str = "max"
    pending: list[tuple[tuple[str, int], ControlProgram]] = field(default_factory=list)
    _solvers: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# topology construction

def _chain_positions(chains: int, hops: int, hop_len: list[float],
                     spacing: float = 55.0) -> list[tuple[float, float]]:
    # chains run close enough that cross gains rival own-link gains; the
    # power/rate trade between sessions is then a real one
    pos = []
    for c in range(chains):
        x = 0.0
        for h in range(hops + 1):
            pos.append((x, c * spacing))
            x += hop_len[c % len(hop_len)]
    return pos


def _scenario_shape(cfg: ScenarioConfig) -> tuple[int, int, int, tuple[int, ...]]:
    """(chains, hops, bands, band pattern per link in chain-major order)."""
    s = cfg.scenario
    if s in (1, 2, 3):
        # same two-chain topology; only the band-sharing pattern differs:
        # no sharing, then parallel-paired hops, then diagonally paired
        # hops whose short cross distances give the strongest coupling
        pattern = {1: (0, 1, 2, 3), 2: (0, 1, 0, 1), 3: (0, 1, 1, 0)}[s]
        return 2, 2, max(pattern) + 1, pattern
    if s == 4:
        return 3, 2, 2, (0, 1, 1, 0, 0, 1)
    if s == 5:
        per_chain = tuple(range(6))
        return 3, 6, 6, per_chain * 3
    raise ConfigError(f"unknown scenario {s} (custom builds need band_pattern)")


def build_scenario(cfg: ScenarioConfig) -> NetState:
    """Deterministic topology for scenarios 1-5: parallel session chains
    with per-link band assignments controlling the interference level."""
    chains, hops, _, pattern = _scenario_shape(cfg)
    if cfg.band_pattern:
        pattern = cfg.band_pattern
    # first chain has shorter hops, so its session finds capacity cheaper
    hop_len = [cfg.hop_short, cfg.hop_long,
               (cfg.hop_short + cfg.hop_long) / 2.0]
    positions = _chain_positions(chains, hops, hop_len, cfg.chain_spacing)
    nodes = [Node(i, p, cfg.max_gain_db) for i, p in enumerate(positions)]

    links: list[Link] = []
    sessions: list[Session] = []
    per_chain = hops + 1
    for c in range(chains):
        base = c * per_chain
        path = []
        for h in range(hops):
            li = len(links)
            tx, rx = base + h, base + h + 1
            d = _dist(positions[tx], positions[rx])
            links.append(Link(
                index=li, tx=tx, rx=rx, band=pattern[li] if li < len(pattern) else 0,
                bandwidth=cfg.bandwidth, gain=d ** -cfg.pathloss_exp,
                noise=cfg.noise, power_box=(0.0, cfg.max_gain_db)))
            path.append(li)
        budget = cfg.budgets[c] if c < len(cfg.budgets) else 0.0
        sessions.append(Session(
            index=c, src=base, dst=base + hops, path=tuple(path),
            rate_box=(cfg.rate_min, cfg.rate_max), budget=budget))

    for li in links:
        for lj in links:
            if lj.index == li.index or lj.band != li.band:
                continue
            if lj.tx == li.rx:
                continue  # half-duplex: a node cannot jam its own reception
            d = _dist(positions[lj.tx], positions[li.rx])
            li.cross_gain[lj.index] = d ** -cfg.pathloss_exp
    return NetState(cfg, nodes, links, sessions)


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


# ---------------------------------------------------------------------------
# capacity through the shared symbolic model

_CAP_FNS: dict[int, object] = {}


def _capacity_fn(graph):
    key = id(graph)
    if key not in _CAP_FNS:
        _CAP_FNS[key] = ex.compile_expr(resolve_model(graph, "lnkcap"))
    return _CAP_FNS[key]


def link_capacity(link: Link, net: NetState, graph) -> float:
    """Capacity in bits/s from the symbolic SINR model; the aggregate
    interference binds through (lnkgain_itf=1, itfpwr=sum of weighted
    interferer powers)."""
    if not link.active:
        return 0.0
    itf = _aggregate_interference(link, net)
    env = {"freq": link.bandwidth, "lnkpwr": link.power_linear,
           "lnkgain": link.gain, "lnknoise": link.noise,
           "lnkgain_itf": 1.0, "itfpwr": itf}
    if link.noise + itf <= 0.0:
        raise DomainError(f"link {link.index}: non-positive noise+interference")
    return _capacity_fn(graph)(env)


def _aggregate_interference(link: Link, net: NetState) -> float:
    return sum(g * net.links[j].power_linear for j, g in link.cross_gain.items()
               if net.links[j].active)


# ---------------------------------------------------------------------------
# program installation

def install_problem(net: NetState, problem: ControlProblem) -> NetState:
    """Wire the problem's constraint families, utility, and box rules into
    the runtime."""
    net.families = []
    for i, c in enumerate(problem.constraints):
        if c.holder not in ("netlnk", "netses"):
            raise UnresolvableCollectionRule(
                f"constraint family over {c.holder} has no runtime entities")
        entity = {"netlnk": "link", "netses": "session"}[c.holder]
        net.families.append(ConstraintFamily(i, c.holder, entity, c.lhs, c.rhs))
    net.utility_expr = problem.utility
    net.utility_sense = problem.sense
    for rule in problem.box_rules:
        _apply_box_rule(net, rule)
    net._solvers["graph"] = problem.graph
    return net


def _apply_box_rule(net: NetState, rule: BoxRule) -> None:
    if rule.base == "lnkpwr":
        targets = list(range(len(net.links)))
        if rule.owner is not None:
            holder, idx, via = rule.owner
            if holder != "netses" or via != "seslnk":
                raise UnresolvableCollectionRule(f"box rule owner {rule.owner}")
            if idx >= len(net.sessions):
                raise UnknownEntity(f"session {idx}")
            targets = list(net.sessions[idx].path)
        for li in targets:
            lo, hi = net.links[li].power_box
            lo = rule.lower if rule.lower is not None else lo
            hi = rule.upper if rule.upper is not None else hi
            net.links[li].power_box = (lo, hi)
    elif rule.base == "sesrate":
        targets = list(range(len(net.sessions)))
        if rule.owner is not None:
            raise UnresolvableCollectionRule(f"box rule owner {rule.owner}")
        for si in targets:
            lo, hi = net.sessions[si].rate_box
            lo = rule.lower if rule.lower is not None else lo
            hi = rule.upper if rule.upper is not None else hi
            net.sessions[si].rate_box = (lo, hi)
    else:
        raise UnresolvableCollectionRule(f"box rule on {rule.base}")


def install_program(net: NetState, owner: tuple[str, int],
                    prog: ControlProgram) -> NetState:
    """Queue a program for an entity's decision-plane register; applied
    atomically at the next epoch boundary."""
    kind, idx = owner
    if kind == "session":
        if idx >= len(net.sessions):
            raise UnknownEntity(f"session {idx}")
        for rule in prog.collect:
            if rule.symbol == "self":
                continue
            if rule.symbol != "seslnk":
                raise UnresolvableCollectionRule(
                    f"{rule.symbol} cannot be collected by a session")
    elif kind == "link":
        if idx >= len(net.links):
            raise UnknownEntity(f"link {idx}")
        for rule in prog.collect:
            if rule.symbol != "self":
                raise UnresolvableCollectionRule(
                    f"{rule.symbol} cannot be collected by a link")
    else:
        raise UnknownEntity(f"unknown entity kind {kind}")
    net.pending.append((owner, prog))
    return net


def _apply_pending(net: NetState) -> None:
    for (kind, idx), prog in net.pending:
        if kind == "session":
            node = net.nodes[net.sessions[idx].src]
            node.registers.install("transport", prog)
            net._solvers.pop(("session", idx), None)
        else:
            node = net.nodes[net.links[idx].tx]
            node.registers.install(f"physical:{idx}", prog)
            net._solvers.pop(("link", idx), None)
    net.pending.clear()


# ---------------------------------------------------------------------------
# per-entity compiled solvers

@dataclass
class _EntitySolver:
    prog: ControlProgram
    objective: Expr
    cfg: SolverConfig
    lam_sources: list[tuple[int, int]]   # (family ordinal, member) per lbd_NN
    self_family: int | None = None


def _session_solver(net: NetState, s: Session, prog: ControlProgram) -> _EntitySolver:
    objective = prog.objective
    lam_sources: list[tuple[int, int]] = []
    self_family = None
    for rule in prog.collect:
        if rule.symbol == "self":
            self_family = rule.family
        else:
            objective = ex.expand_sums(objective, {rule.symbol: list(s.path)})
            lam_sources.extend((rule.family, li) for li in s.path)
    cfg = SolverConfig(step=net.cfg.rate_step, dual_step=net.cfg.dual_step,
                       max_iters=net.cfg.rate_iters, tol=1e-9,
                       boxes={"sesrate": s.rate_box},
                       max_move=net.cfg.rate_move_max)
    return _EntitySolver(prog, objective, cfg, lam_sources, self_family)


def _link_solver(net: NetState, link: Link, prog: ControlProgram) -> _EntitySolver:
    graph = net._solvers["graph"]
    # capacity in packets/s so the objective shares the dual's units
    model = ex.div(resolve_model(graph, "lnkcap"), ex.const(net.cfg.packet_bits))
    objective = ex.substitute(prog.objective, {"lnkcap": model})
    objective = ex.substitute(objective, {"lnkpwr": DB_TO_LINEAR})
    if prog.penalty is not None:
        terms = [objective]
        for j in sorted(link.cross_gain):
            # links we interfere with collect our linearized damage,
            # normalized to packets/s like the own term
            pj = ex.div(prog.penalty, ex.const(net.cfg.packet_bits))
            pj = ex.substitute(pj, {
                v: ex.var(f"{v}@{j}") for v in ex.free_vars(prog.penalty)
                if v.startswith("itf_") or v == "lbd_itf"})
            pj = ex.substitute(pj, {"lnkpwr": DB_TO_LINEAR})
            terms.append(pj)
        objective = ex.add(*terms)
    cfg = SolverConfig(step=net.cfg.power_step, dual_step=net.cfg.dual_step,
                       max_iters=net.cfg.power_iters, tol=1e-9,
                       boxes={"pwrgain": link.power_box},
                       max_move=net.cfg.power_move_max)
    prog = replace(prog, decision="pwrgain")
    self_family = next((r.family for r in prog.collect if r.symbol == "self"), None)
    return _EntitySolver(prog, objective, cfg, [], self_family)


def _get_solver(net: NetState, kind: str, idx: int) -> _EntitySolver | None:
    key = (kind, idx)
    if key in net._solvers:
        return net._solvers[key]
    if kind == "session":
        s = net.sessions[idx]
        prog = net.nodes[s.src].registers.program("transport")
        solver = None if prog is None else _session_solver(net, s, prog)
    else:
        link = net.links[idx]
        prog = net.nodes[link.tx].registers.program(f"physical:{idx}")
        solver = None if prog is None else _link_solver(net, link, prog)
    net._solvers[key] = solver
    return solver


# ---------------------------------------------------------------------------
# the event loop

@dataclass
class Trace:
    rows: list[tuple[float, str, int, str, float]] = field(default_factory=list)

    def record(self, t: float, kind: str, eid: int, metric: str, value: float):
        self.rows.append((t, kind, eid, metric, value))

    def series(self, kind: str, eid: int, metric: str) -> list[tuple[float, float]]:
        return [(t, v) for (t, k, e, m, v) in self.rows
                if k == kind and e == eid and m == metric]

    def mean(self, kind: str, metric: str, eid: int | None = None,
             tail: float = 1.0) -> float:
        vals = [v for (t, k, e, m, v) in self.rows
                if k == kind and m == metric and (eid is None or e == eid)]
        if not vals:
            raise NetsimError(f"no {kind}/{metric} records")
        n = max(1, int(len(vals) * tail))
        vals = vals[-n:]
        return sum(vals) / len(vals)

    def to_csv(self) -> str:
        lines = ["time,entity_kind,entity_id,metric,value"]
        for (t, k, e, m, v) in self.rows:
            lines.append(f"{t!r},{k},{e},{m},{v!r}")
        return "\n".join(lines) + "\n"


def _measure(net: NetState, graph) -> None:
    for link in net.links:
        cap_bits = link_capacity(link, net, graph)
        link.capacity_pps = cap_bits / net.cfg.packet_bits
        rx = net.nodes[link.rx].registers
        rx.post_state("physical", f"itf_{link.index}",
                      _aggregate_interference(link, net))
        rx.post_state("physical", f"cap_pps_{link.index}", link.capacity_pps)


def _runtime_bindings(net: NetState) -> Env:
    env: Env = {}
    for s in net.sessions:
        env[ex.var_name("sesrate", s.index)] = 0.0 if s.done else s.rate
    for l in net.links:
        env[ex.var_name("lnkcap", l.index)] = l.capacity_pps
        env[ex.var_name("lnkpwr", l.index)] = l.power_linear
    return env


def _family_slacks(net: NetState, fam: ConstraintFamily) -> dict[str, float]:
    slacks: dict[str, float] = {}
    members = (range(len(net.links)) if fam.entity == "link"
               else range(len(net.sessions)))
    for m in members:
        if fam.entity == "link":
            sharing = [s.index for s in net.sessions
                       if not s.done and m in s.path]
            bindings = {"lnkses": sharing}
        else:
            bindings = {"seslnk": list(net.sessions[m].path)}
        lhs = ex.expand_sums(ex.bind_index(fam.lhs, fam.holder, m), bindings)
        rhs = ex.expand_sums(ex.bind_index(fam.rhs, fam.holder, m), bindings)
        env = _runtime_bindings(net)
        slack = ex.eval_expr(rhs, env) - ex.eval_expr(lhs, env)
        clip = net.cfg.slack_clip
        slacks[f"m{m:02d}"] = _clamp(slack, -clip, clip) if clip > 0 else slack
    return slacks


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def _update_duals(net: NetState) -> None:
    cfg = SolverConfig(dual_step=net.cfg.dual_step)
    for fam in net.families:
        fam.prev = {m: fam.duals.values.get(f"m{m:02d}", 0.0)
                    for m in (range(len(net.links)) if fam.entity == "link"
                              else range(len(net.sessions)))}
        fam.duals = dual_update(fam.duals, _family_slacks(net, fam), cfg)
    for link in net.links:
        link.lam_prev = link.lam
        cap_fams = [f for f in net.families if f.entity == "link"]
        if cap_fams:
            link.lam = cap_fams[0].duals.values.get(f"m{link.index:02d}", 0.0)


def _solve_power(net: NetState, link: Link) -> None:
    solver = _get_solver(net, "link", link.index)
    if solver is None or not link.active:
        return
    env: Env = {
        "freq": link.bandwidth, "lnkgain": link.gain, "lnknoise": link.noise,
        "lnkgain_itf": 1.0, "itfpwr": _aggregate_interference(link, net),
        "pwrgain_anchor": link.pwr_gain_db,
        "lnkpwr_anchor": db_to_linear(link.pwr_gain_db),
        "lbd": _self_lambda(net, solver, link.index),
    }
    if solver.prog.penalty is not None:
        for j in sorted(link.cross_gain):
            lj = net.links[j]
            ours = link.cross_gain.get(j, 0.0)
            active = lj.active and not _session_done_for_link(net, j)
            env[f"lbd_itf@{j}"] = lj.lam_prev if active else 0.0
            env[f"itf_freq@{j}"] = lj.bandwidth
            env[f"itf_lnkpwr@{j}"] = lj.power_linear
            env[f"itf_lnkgain@{j}"] = lj.gain
            env[f"itf_lnkgain_itf@{j}"] = lj.cross_gain.get(link.index, 0.0)
            other = _aggregate_interference(lj, net) \
                - lj.cross_gain.get(link.index, 0.0) * link.power_linear
            env[f"itf_lnknoise@{j}"] = lj.noise + max(0.0, other)
    prog = replace(solver.prog, objective=solver.objective)
    decision = solve_program(prog, env, solver.cfg)
    tx = net.nodes[link.tx].registers
    tx.write_decision("physical", f"pwrgain_{link.index}", decision["pwrgain"])
    link.pwr_gain_db = decision["pwrgain"]


def _self_lambda(net: NetState, solver: _EntitySolver, member: int) -> float:
    if solver.self_family is None:
        return 0.0
    return net.families[solver.self_family].prev.get(member, 0.0)


def _session_done_for_link(net: NetState, link_index: int) -> bool:
    users = [s for s in net.sessions if link_index in s.path]
    return bool(users) and all(s.done for s in users)


def _solve_rate(net: NetState, s: Session) -> None:
    solver = _get_solver(net, "session", s.index)
    if solver is None or s.done:
        return
    env: Env = {"sesrate_anchor": s.rate,
                "lbd": _self_lambda(net, solver, s.index)}
    for fam_ord, li in solver.lam_sources:
        env[ex.var_name("lbd", li)] = net.families[fam_ord].prev.get(li, 0.0)
    prog = replace(solver.prog, objective=solver.objective)
    decision = solve_program(prog, env, solver.cfg)
    net.nodes[s.src].registers.write_decision("transport", "sesrate",
                                              decision["sesrate"])
    s.rate = decision["sesrate"]


def _deliver(net: NetState) -> None:
    demand: dict[int, float] = {}
    for s in net.sessions:
        if s.done:
            s.throughput = 0.0
            continue
        for li in s.path:
            demand[li] = demand.get(li, 0.0) + s.rate
    for s in net.sessions:
        if s.done:
            continue
        share = 1.0
        for li in s.path:
            cap = net.links[li].capacity_pps
            if demand[li] > 0:
                share = min(share, cap / demand[li])
        # overloading a link wastes goodput on retransmissions: the share
        # factor collapses with the overload ratio (reliable transport)
        s.throughput = s.rate * min(1.0, share) ** net.cfg.congestion_exp
        # conservation: never beyond the bottleneck's proportional share
        for li in s.path:
            cap = net.links[li].capacity_pps
            if demand[li] > 0:
                assert s.throughput <= cap * s.rate / demand[li] + 1e-9
        if s.budget > 0:
            s.sent += s.throughput * net.cfg.phys_epoch
            if s.sent >= s.budget:
                s.done = True
                for li in s.path:
                    if _session_done_for_link(net, li):
                        net.links[li].active = False


def sum_utility(net: NetState) -> float:
    """The problem utility evaluated on achieved throughput (packets/s)
    and live powers, in maximize sense."""
    if net.utility_expr is None:
        return 0.0
    live_s = [s.index for s in net.sessions if not s.done]
    live_l = [l.index for l in net.links if l.active]
    bindings = {"netses": live_s, "netlnk": live_l}
    e = ex.expand_sums(net.utility_expr, bindings)
    env: Env = {}
    for s in net.sessions:
        env[ex.var_name("sesrate", s.index)] = max(s.throughput, 1e-6)
    for l in net.links:
        env[ex.var_name("lnkpwr", l.index)] = l.power_linear
    val = ex.eval_expr(e, env)
    return val if net.utility_sense == "max" else -val


def _record(net: NetState, trace: Trace) -> None:
    t = net.clock
    for s in net.sessions:
        trace.record(t, "session", s.index, "throughput_pps", s.throughput)
    for link in net.links:
        if link.active:
            trace.record(t, "node", link.tx, "power_gain_db", link.pwr_gain_db)
        trace.record(t, "link", link.index, "lambda", link.lam)
    trace.record(t, "net", 0, "sum_utility", sum_utility(net))


def step(net: NetState, scheme: str = "joint") -> NetState:
    """Advance one physical epoch: measure capacities, update duals, run
    the physical-layer programs, run the transport programs every
    timescale-th epoch, then account delivered traffic."""
    graph = net._solvers.get("graph")
    if graph is None:
        raise NetsimError("install_problem must run before step")
    _apply_pending(net)
    _measure(net, graph)
    _update_duals(net)
    if scheme in ("joint", "power-only"):
        for link in net.links:
            _solve_power(net, link)
    if scheme in ("joint", "rate-only") and net.epoch % net.cfg.timescale == 0:
        for s in net.sessions:
            _solve_rate(net, s)
    _deliver(net)
    net.epoch += 1
    net.clock = net.epoch * net.cfg.phys_epoch
    # feasibility invariants hold at every epoch
    for fam in net.families:
        for v in fam.duals.values.values():
            if v < 0:
                raise NetsimError("negative dual")
    for link in net.links:
        lo, hi = link.power_box
        if link.active and not (lo - 1e-9 <= link.pwr_gain_db <= hi + 1e-9):
            raise NetsimError(f"power outside box on link {link.index}")
    return net


def run(net: NetState, duration: float, scheme: str = "joint") -> Trace:
    """Run for `duration` seconds; the scheme gates which layers' programs
    execute.  Initial operating points are drawn from the scenario seed."""
    if duration <= 0:
        raise ConfigError("duration must be positive")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; pick one of {SCHEMES}")
    rng = random.Random(net.cfg.seed)
    for s in net.sessions:
        lo, hi = s.rate_box
        s.rate = hi if scheme == "best-response" else rng.uniform(lo, hi)
    for link in net.links:
        lo, hi = link.power_box
        link.pwr_gain_db = hi if scheme == "best-response" else rng.uniform(lo, hi)
    trace = Trace()
    epochs = int(round(duration / net.cfg.phys_epoch))
    for _ in range(epochs):
        step(net, scheme)
        _record(net, trace)
    return trace


# ---------------------------------------------------------------------------
# scenario files

_CFG_TYPES = {f.name: f.type for f in ScenarioConfig.__dataclass_fields__.values()}


def load_scenario(text: str) -> ScenarioConfig:
    """Parse a plain key=value scenario file (# comments allowed).
    Tuple-valued keys take comma-separated lists."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CFG_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in ("scenario", "packet_bits", "timescale", "seed",
                   "rate_iters", "power_iters"):
            values[key] = int(val)
        elif key == "band_pattern":
            values[key] = tuple(int(x) for x in val.split(",") if x != "")
        elif key == "budgets":
            values[key] = tuple(float(x) for x in val.split(",") if x != "")
        else:
            values[key] = float(val)
    return ScenarioConfig(**values)
