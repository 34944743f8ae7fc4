"""Lagrangian dual construction and its split into per-layer, per-entity
control programs.

The dual of an instantiated problem absorbs each constraint j with a
multiplier lbd_NN, distributing it over the constraint's additive terms
so every level-1 term of the dual is either a utility term or a
(primal term x lambda) product.  Splitting walks those terms: first by
the protocol layer of the primal variable, then by its entity index.
Each per-entity subproblem is then lifted back to an abstract template
by erasing the entity index and recognizing its lambda index set as the
instance of one local set element -- the element the entity must collect
dual values from at run time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import expr as ex
from .abstraction import ControlProblem, ElementGraph, resolve_model
from .expr import Expr
from .instantiate import InstanceMap, InstantiatedProblem

LBD = "lbd"

# foreign-agent alias -> the local decision variable it mirrors
FOREIGN_ALIASES = {"itfpwr": "lnkpwr"}

PENALIZATION_MODES = ("best_response", "gradient", "dpl")


class DecomposeError(Exception):
    pass


class AmbiguousLayer(DecomposeError):
    pass


class AmbiguousEntity(DecomposeError):
    pass


class NoMatchingElement(DecomposeError):
    pass


class NotDifferentiable(DecomposeError):
    pass


@dataclass(frozen=True)
class DualVar:
    name: str          # lbd_NN
    index: int
    family: int        # ordinal of the originating abstract constraint
    label: str         # instantiated constraint label, e.g. netlnk_03
    holder: str | None
    member: int | None # holder member the constraint belongs to
    lhs: Expr
    rhs: Expr


@dataclass
class DualProblem:
    dual: Expr
    registry: list[DualVar]
    sense: str                      # sense of the original problem
    inst: InstantiatedProblem


def _family_of(label: str) -> tuple[str | None, int | None]:
    if label == "global":
        return None, None
    holder, _, member = label.rpartition("_")
    return holder, int(member)


def dualize(inst: InstantiatedProblem) -> DualProblem:
    """Absorb constraints into the utility: dual = utility + sum_j
    lbd_j*(rhs_j - lhs_j), with each product distributed over the
    constraint's additive terms.  Minimize-sense utilities are negated so
    the dual is always maximized."""
    utility = inst.utility if inst.sense == "max" else ex.neg(inst.utility)
    terms = list(ex.level1_terms(utility))
    registry: list[DualVar] = []

    for j, c in enumerate(inst.constraints):
        lam = ex.var(LBD, j)
        holder, member = _family_of(c.label)
        registry.append(DualVar(ex.var_name(LBD, j), j, _abstract_ordinal(inst, j),
                                c.label, holder, member, c.lhs, c.rhs))
        for t in ex.level1_terms(c.rhs):
            terms.append(_term_times(t, lam))
        for t in ex.level1_terms(c.lhs):
            terms.append(ex.neg(_term_times(t, lam)))
    return DualProblem(ex.add(*terms), registry, inst.sense, inst)


def _abstract_ordinal(inst: InstantiatedProblem, j: int) -> int:
    """Ordinal of the abstract constraint that expanded to instance j."""
    count = 0
    for ordinal, c in enumerate(inst.problem.constraints):
        n = len(inst.imap.glb[c.holder]) if c.holder is not None else 1
        if j < count + n:
            return ordinal
        count += n
    raise DecomposeError(f"constraint index {j} out of range")


def _term_times(t: Expr, lam: Expr) -> Expr:
    if t.kind == "neg":
        return ex.neg(ex.mul(t.children[0], lam))
    return ex.mul(t, lam)


@dataclass
class Subproblem:
    layer: str
    objective: Expr
    sense: str
    owned: tuple[str, ...]
    foreign: tuple[str, ...]
    entity_kind: str | None = None
    entity_index: int | None = None
    dual: DualProblem | None = None


def _primal_bases(term: Expr, graph: ElementGraph) -> list[tuple[str, int | None]]:
    out = []
    for name in sorted(ex.free_vars(term)):
        base, idx = _split_name(name)
        if base == LBD:
            continue
        out.append((base, idx))
    return out


def _split_name(name: str) -> tuple[str, int | None]:
    base, _, tail = name.rpartition("_")
    if base and tail.isdigit():
        return base, int(tail)
    return name, None


def _lbd_indices(term: Expr) -> list[int]:
    out = []
    for name in ex.free_vars(term):
        base, idx = _split_name(name)
        if base == LBD and idx is not None:
            out.append(idx)
    return sorted(out)


def split_by_layer(dp: DualProblem, graph: ElementGraph,
                   ) -> tuple[dict[str, Subproblem], list[Expr]]:
    """Assign every level-1 term of the dual to the protocol layer of its
    primal variable.  Lambda-only terms take the layer of the constraint's
    rhs element; with a constant rhs they go to the residual bucket, which
    belongs to the dual-update step rather than any primal subproblem."""
    buckets: dict[str, list[Expr]] = {}
    residual: list[Expr] = []
    for term in ex.level1_terms(dp.dual):
        primal = _primal_bases(term, graph)
        layers = {graph.element(b).layer for b, _ in primal}
        if len(layers) > 1:
            raise AmbiguousLayer(f"term {ex.render(term)} mixes layers {layers}")
        if layers:
            buckets.setdefault(next(iter(layers)), []).append(term)
            continue
        lbds = _lbd_indices(term)
        if not lbds:
            residual.append(term)
            continue
        rhs_layers = set()
        for j in lbds:
            for b, _ in _primal_bases(dp.registry[j].rhs, graph):
                rhs_layers.add(graph.element(b).layer)
        if len(rhs_layers) > 1:
            raise AmbiguousLayer(f"term {ex.render(term)}: rhs spans {rhs_layers}")
        if rhs_layers:
            buckets.setdefault(next(iter(rhs_layers)), []).append(term)
        else:
            residual.append(term)  # constant-rhs lambda term
    subs = {}
    for layer, terms in buckets.items():
        owned = tuple(sorted({ex.var_name(b, i) for t in terms
                              for b, i in _primal_bases(t, graph)}))
        foreign = tuple(sorted({ex.var_name(LBD, j) for t in terms
                                for j in _lbd_indices(t)}))
        subs[layer] = Subproblem(layer, ex.add(*terms), "max", owned, foreign,
                                 dual=dp)
    return subs, residual


def _entity_kind(graph: ElementGraph, base: str) -> str:
    holders = [s for (s, lbl, d) in graph.edges
               if lbl == "has-attribute" and d == base]
    if len(holders) == 1:
        return graph.element(holders[0]).entity
    raise AmbiguousEntity(f"{base} has {len(holders)} holders")


def split_by_entity(sub: Subproblem, graph: ElementGraph) -> list[Subproblem]:
    """Group a layer subproblem's terms by the entity index of their primal
    variable."""
    groups: dict[tuple[str, int], list[Expr]] = {}
    order: list[tuple[str, int]] = []
    for term in ex.level1_terms(sub.objective):
        entities = {(b, i) for b, i in _primal_bases(term, graph) if i is not None}
        keys = {(_entity_kind(graph, b), i) for b, i in entities}
        if len(keys) != 1:
            raise AmbiguousEntity(
                f"term {ex.render(term)} references entities {sorted(keys)}")
        key = next(iter(keys))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(term)
    out = []
    for kind, idx in order:
        terms = groups[(kind, idx)]
        owned = tuple(sorted({ex.var_name(b, i) for t in terms
                              for b, i in _primal_bases(t, graph)}))
        foreign = tuple(sorted({ex.var_name(LBD, j) for t in terms
                                for j in _lbd_indices(t)}))
        out.append(Subproblem(sub.layer, ex.add(*terms), sub.sense, owned,
                              foreign, kind, idx, sub.dual))
    return out


@dataclass(frozen=True)
class CollectionRule:
    symbol: str   # local element name, or "self" for the entity's own dual
    family: int   # ordinal of the abstract constraint supplying the values


@dataclass(frozen=True)
class ControlProgram:
    """A lifted per-entity subproblem template plus the identity of the
    dual coefficients it must collect at run time."""
    layer: str
    entity_kind: str
    objective: Expr            # over unindexed symbols and lambda sums
    sense: str
    decision: str              # decision variable base name
    collect: tuple[CollectionRule, ...]
    mode: str = "best_response"
    penalty: Expr | None = None  # per-foreign-entity template (gradient/dpl)
    bounds: tuple[float | None, float | None] = (None, None)


def _strip_entity(e: Expr, kind: str, idx: int, graph: ElementGraph) -> Expr:
    if e.kind == "var":
        if e.name != LBD and e.index == idx and _entity_kind(graph, e.name) == kind:
            return ex.var(e.name, None)
        return e
    if not e.children:
        return e
    return Expr(e.kind, tuple(_strip_entity(c, kind, idx, graph) for c in e.children),
                e.value, e.name, e.index)


def _sub_lbd(e: Expr, j: int, repl: Expr) -> Expr:
    return ex.substitute(e, {ex.var_name(LBD, j): repl})


def lift_to_abstract(sub: Subproblem, m: InstanceMap) -> ControlProgram:
    """Replace indexed variables by unindexed symbols and the lambda index
    set by a sum over the local element it instantiates."""
    if sub.entity_index is None or sub.dual is None:
        raise NoMatchingElement("only entity subproblems lift")
    graph = sub.dual.inst.problem.graph
    kind, idx = sub.entity_kind, sub.entity_index

    # group lambda occurrences by structural shape after index erasure
    groups: dict[str, list[tuple[int, Expr]]] = {}
    order: list[str] = []
    plain: list[Expr] = []
    for term in ex.level1_terms(sub.objective):
        stripped = _strip_entity(term, kind, idx, graph)
        lbds = _lbd_indices(stripped)
        if not lbds:
            plain.append(stripped)
            continue
        if len(lbds) != 1:
            raise NoMatchingElement(f"term {ex.render(term)} has {len(lbds)} duals")
        j = lbds[0]
        shape = ex.render(_sub_lbd(stripped, j, ex.var(LBD, "sigma")))
        if shape not in groups:
            groups[shape] = []
            order.append(shape)
        groups[shape].append((j, stripped))

    template_terms = list(plain)
    rules: list[CollectionRule] = []
    for shape in order:
        entries = groups[shape]
        indices = sorted(j for j, _ in entries)
        families = {sub.dual.registry[j].family for j in indices}
        if len(families) != 1:
            raise NoMatchingElement(
                f"dual group {indices} spans constraint families {families}")
        family = next(iter(families))
        members = sorted({sub.dual.registry[j].member for j in indices})
        rule, lam = _identify_collection(sub, m, graph, indices, members, family)
        _, sample = entries[0]
        template_terms.append(_sub_lbd(sample, entries[0][0], lam))
        rules.append(rule)

    objective = ex.add(*template_terms)
    decision = _decision_base(objective, graph)
    return ControlProgram(sub.layer, kind, objective, "max", decision,
                          tuple(rules))


def _identify_collection(sub: Subproblem, m: InstanceMap, graph: ElementGraph,
                         indices: list[int], members: list[int], family: int,
                         ) -> tuple[CollectionRule, Expr]:
    """The lambda index set must be the instance of one local element for
    this entity (bijectivity makes the match unique), or the entity's own
    dual."""
    reg = sub.dual.registry
    holder = reg[indices[0]].holder
    member_set = tuple(members)
    for fam in m.lcl.values():
        if fam.mother != holder:
            continue
        inst = fam.instances.get(sub.entity_index)
        if inst is not None and tuple(inst) == member_set \
                and graph.member_of(fam.holder) == _primitive_of(graph, sub.entity_kind):
            lam = ex.bigsum(fam.name, ex.var(LBD, fam.name))
            return CollectionRule(fam.name, family), lam
    if member_set == (sub.entity_index,) and holder is not None \
            and graph.element(graph.member_of(holder)).entity == sub.entity_kind:
        return CollectionRule("self", family), ex.var(LBD, "self")
    raise NoMatchingElement(
        f"dual index set {member_set} matches no local-element instance "
        f"for {sub.entity_kind} {sub.entity_index}")


def _primitive_of(graph: ElementGraph, entity_kind: str) -> str:
    for el in graph.elements.values():
        if el.kind == "primitive" and el.entity == entity_kind:
            return el.name
    raise NoMatchingElement(f"no primitive of kind {entity_kind}")


def _decision_base(objective: Expr, graph: ElementGraph) -> str:
    """The controllable variable of a template: a ctrl element appearing
    directly, else the ctrl variable inside a modeled element's model."""
    bases = {b for b in _var_bases(objective) if b != LBD}
    direct = sorted(b for b in bases
                    if b in graph.elements and graph.element(b).ctrl)
    if direct:
        return direct[0]
    for b in sorted(bases):
        if b in graph.elements and graph.element(b).model is not None:
            inner = {n for n in ex.free_vars(resolve_model(graph, b))
                     if n in graph.elements and graph.element(n).ctrl}
            if inner:
                return sorted(inner)[0]
    raise NoMatchingElement(f"no decision variable in template over {sorted(bases)}")


def _var_bases(e: Expr) -> set[str]:
    if e.kind == "var":
        return {e.name}
    out: set[str] = set()
    for c in e.children:
        out |= _var_bases(c)
    return out


def _distribute(e: Expr) -> Expr:
    """Distribute products and negations over embedded sums (the inverse of
    the lift's lambda factoring)."""
    if e.kind == "neg":
        inner = _distribute(e.children[0])
        if inner.kind == "add":
            return ex.add(*(ex.neg(t) for t in inner.children))
        return ex.neg(inner)
    if e.kind == "add":
        return ex.add(*(_distribute(c) for c in e.children))
    if e.kind == "mul":
        cs = [_distribute(c) for c in e.children]
        for i, c in enumerate(cs):
            if c.kind == "add":
                return ex.add(*(_distribute(ex.mul(*cs[:i], t, *cs[i + 1:]))
                                for t in c.children))
        return ex.mul(*cs)
    return e


def reinstantiate(prog: ControlProgram, m: InstanceMap, entity_index: int,
                  dp: DualProblem) -> Expr:
    """Expand a lifted template back to the concrete entity subproblem;
    exact inverse of lift_to_abstract for every shipped family."""
    graph = dp.inst.problem.graph
    bindings = {}
    subs: dict[str, Expr] = {}
    for rule in prog.collect:
        lbd_of = {dv.member: dv.index for dv in dp.registry if dv.family == rule.family}
        if rule.symbol == "self":
            subs[LBD] = ex.var(LBD, lbd_of[entity_index])
        else:
            fam = m.family(rule.symbol)
            bindings[rule.symbol] = [lbd_of[j] for j in fam.instances[entity_index]]
    e = ex.expand_sums(prog.objective, bindings)
    e = ex.substitute(e, subs)
    e = _distribute(e)
    # restore the entity index on unindexed primal variables
    def _reindex(x: Expr) -> Expr:
        if x.kind == "var" and x.name != LBD and x.index is None \
                and x.name in graph.elements \
                and _entity_kind(graph, x.name) == prog.entity_kind:
            return ex.var(x.name, entity_index)
        if not x.children:
            return x
        return Expr(x.kind, tuple(_reindex(c) for c in x.children),
                    x.value, x.name, x.index)
    return _reindex(e)


def penalize(prog: ControlProgram, mode: str, graph: ElementGraph) -> ControlProgram:
    """Attach the distributed-decomposition mode.

    best_response leaves the objective untouched (zero signaling).  For
    gradient and dpl the per-foreign-entity penalty linearizes the
    foreign utilities around the current point: lbd_itf * d(model)/d(alias)
    * (own - own_anchor), with the derivative taken symbolically from the
    coupling model.  gradient additionally replaces the own term by its
    first-order model at solve time (dual update handled identically).
    """
    if mode not in PENALIZATION_MODES:
        raise DecomposeError(f"unknown penalization mode {mode!r}")
    if mode == "best_response":
        return replace(prog, mode=mode, penalty=None)
    alias = next((a for a, own in FOREIGN_ALIASES.items() if own == prog.decision),
                 None)
    if alias is None:
        return replace(prog, mode=mode, penalty=None)
    coupled = [el.name for el in graph.elements.values()
               if el.model is not None
               and alias in ex.free_vars(resolve_model(graph, el.name))]
    if not coupled:
        return replace(prog, mode=mode, penalty=None)
    model = resolve_model(graph, sorted(coupled)[0])
    try:
        deriv = ex.differentiate(model, alias)
    except ex.UnsupportedNode as err:
        raise NotDifferentiable(str(err)) from None
    own = ex.var(prog.decision)
    anchor = ex.var(f"{prog.decision}_anchor")
    # the derivative is evaluated at the anchor: our decision enters the
    # foreign model as the alias variable, and the foreign model's own
    # parameters get an itf_ prefix so they cannot clash with ours
    deriv_at_anchor = ex.substitute(deriv, {alias: anchor})
    foreign = {v: ex.var(f"itf_{v}") for v in ex.free_vars(deriv_at_anchor)
               if v != f"{prog.decision}_anchor"}
    deriv_at_anchor = ex.substitute(deriv_at_anchor, foreign)
    penalty = ex.mul(ex.var("lbd_itf"), deriv_at_anchor, ex.sub(own, anchor))
    return replace(prog, mode=mode, penalty=penalty)


def dump_dual(dp: DualProblem) -> str:
    """Text layout of the dual: the utility terms, then one line per
    constraint with its absorbed terms."""
    utility_terms = []
    per_cstr: dict[int, list[Expr]] = {dv.index: [] for dv in dp.registry}
    for term in ex.level1_terms(dp.dual):
        lbds = _lbd_indices(term)
        if lbds:
            per_cstr[lbds[0]].append(term)
        else:
            utility_terms.append(term)
    lines = [f"utility: {ex.render(ex.add(*utility_terms))}"]
    for dv in dp.registry:
        lines.append(f"{dv.name} [{dv.label}]: "
                     f"{ex.render(ex.add(*per_cstr[dv.index]))}")
    return "\n".join(lines) + "\n"


def dump_program(prog: ControlProgram) -> str:
    lines = [
        f"layer: {prog.layer}",
        f"entity: {prog.entity_kind}",
        f"objective: {prog.sense} {ex.render(prog.objective)}",
        f"decision: {prog.decision}",
        f"collect: {', '.join(f'{r.symbol}#{r.family}' for r in prog.collect) or 'none'}",
        f"mode: {prog.mode}",
    ]
    if prog.penalty is not None:
        lines.append(f"penalty: {ex.render(prog.penalty)}")
    if prog.bounds != (None, None):
        lines.append(f"bounds: {prog.bounds[0]} .. {prog.bounds[1]}")
    return "\n".join(lines) + "\n"
