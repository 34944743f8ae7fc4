import copy
import random

import pytest

from netnum import abstraction as ab
from netnum import decompose as dc
from netnum import expr as ex
from netnum import instantiate as it

from conftest import JOCP_LOG, JOCP_RATE

TOY_DUAL = ("sesrate_00 + sesrate_01 + sesrate_02"
            " + lnkcap_00*lbd_00 - sesrate_00*lbd_00 - sesrate_01*lbd_00"
            " + lnkcap_01*lbd_01 - sesrate_00*lbd_01 - sesrate_02*lbd_01"
            " + lnkcap_02*lbd_02 - sesrate_01*lbd_02 - sesrate_02*lbd_02")


def test_dualize_toy_matches_worked_dual(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    assert ex.render(dp.dual) == TOY_DUAL
    assert [dv.name for dv in dp.registry] == ["lbd_00", "lbd_01", "lbd_02"]


def test_dualize_without_constraints_returns_utility():
    src = ("var wos_x path=netses.sesrate quant=all,none\n"
           "utility max sum(wos_x)\n"
           "constraint 0 <= wos_x\n"
           "decompose cross=dual dist=best_response\n")
    p = ab.parse_problem(src)
    inst, _ = it.instantiate_problem(p, it.InstanceConfig(3, 2, 0))
    dp = dc.dualize(inst)
    assert dp.dual == inst.utility
    assert dp.registry == []


def test_weak_duality_direction(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    rng = random.Random(2)
    for _ in range(50):
        env = {f"sesrate_{i:02d}": rng.uniform(0.0, 0.5) for i in range(3)}
        env.update({f"lnkcap_{i:02d}": rng.uniform(1.0, 2.0) for i in range(3)})
        env.update({f"lbd_{i:02d}": rng.uniform(0.0, 2.0) for i in range(3)})
        for c in inst.constraints:
            assert ex.eval_expr(c.lhs, env) <= ex.eval_expr(c.rhs, env)
        assert ex.eval_expr(dp.dual, env) >= ex.eval_expr(inst.utility, env) - 1e-12


def test_split_by_layer_toy(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    layers, residual = dc.split_by_layer(dp, inst.problem.graph)
    assert residual == []
    assert set(layers) == {"transport", "physical"}
    assert ex.render(layers["physical"].objective) == \
        "lnkcap_00*lbd_00 + lnkcap_01*lbd_01 + lnkcap_02*lbd_02"
    assert "sesrate_00" in layers["transport"].owned
    assert all(v.startswith("lbd") for v in layers["transport"].foreign)


def test_term_assignment_examples(toy_inst):
    inst, _ = toy_inst
    graph = inst.problem.graph
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, graph)
    transport_terms = {ex.render(t) for t in ex.level1_terms(layers["transport"].objective)}
    physical_terms = {ex.render(t) for t in ex.level1_terms(layers["physical"].objective)}
    assert "sesrate_00" in transport_terms
    assert "lnkcap_00*lbd_00" in physical_terms


def test_constant_rhs_terms_go_to_residual():
    src = ("var wos_x path=netses.sesrate quant=all,none\n"
           "var wos_y path=netlnk.lnkses.sesrate quant=every,all,none\n"
           "utility max sum(wos_x)\n"
           "constraint sum(wos_y) <= 1\n"
           "decompose cross=dual dist=best_response\n")
    p = ab.parse_problem(src)
    from netnum.reference import TOY_SESSIONS_OF_LINK
    inst, _ = it.instantiate_problem(p, it.InstanceConfig(3, 2, 0),
                                     preset={"lnkses": TOY_SESSIONS_OF_LINK})
    dp = dc.dualize(inst)
    layers, residual = dc.split_by_layer(dp, p.graph)
    assert [ex.render(t) for t in residual] == ["lbd_00", "lbd_01", "lbd_02"]
    assert set(layers) == {"transport"}


def test_term_conservation(toy_inst, jocp_inst):
    rng = random.Random(9)
    for inst, _ in (toy_inst, jocp_inst):
        dp = dc.dualize(inst)
        layers, residual = dc.split_by_layer(dp, inst.problem.graph)
        pieces = [s.objective for s in layers.values()] + residual
        entity_objs = []
        for sub in layers.values():
            entity_objs.extend(e.objective for e in
                               dc.split_by_entity(sub, inst.problem.graph))
        names = ex.free_vars(dp.dual)
        for _ in range(20):
            env = {n: rng.uniform(0.1, 2.0) for n in names}
            total = ex.eval_expr(dp.dual, env)
            assert abs(sum(ex.eval_expr(p_, env) for p_ in pieces) - total) < 1e-9
            assert abs(sum(ex.eval_expr(o, env) for o in entity_objs)
                       + sum(ex.eval_expr(r, env) for r in residual) - total) < 1e-9


def test_ambiguous_layer():
    p = ab.parse_problem(JOCP_RATE)
    inst, _ = it.instantiate_problem(p, it.InstanceConfig(3, 2, 7))
    dp = dc.dualize(inst)
    dp.dual = ex.add(dp.dual, ex.mul(ex.var("sesrate", 0), ex.var("lnkpwr", 0)))
    with pytest.raises(dc.AmbiguousLayer):
        dc.split_by_layer(dp, p.graph)


def test_split_by_entity_toy_flows(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    flows = dc.split_by_entity(layers["transport"], inst.problem.graph)
    assert [ex.render(f.objective) for f in flows] == [
        "sesrate_00 - sesrate_00*lbd_00 - sesrate_00*lbd_01",
        "sesrate_01 - sesrate_01*lbd_00 - sesrate_01*lbd_02",
        "sesrate_02 - sesrate_02*lbd_01 - sesrate_02*lbd_02",
    ]
    assert all(f.entity_kind == "session" for f in flows)


def test_split_by_entity_single_entity_identity(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    flows = dc.split_by_entity(layers["transport"], inst.problem.graph)
    again = dc.split_by_entity(flows[0], inst.problem.graph)
    assert len(again) == 1 and again[0].objective == flows[0].objective


def test_session4_subproblem_renders_exactly(jocp_inst):
    inst, _ = jocp_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    s4 = next(s for s in dc.split_by_entity(layers["transport"], inst.problem.graph)
              if s.entity_index == 4)
    expected = "sesrate_04 " + " ".join(
        f"- sesrate_04*lbd_{j:02d}"
        for j in (0, 3, 4, 7, 9, 10, 11, 12, 13, 14, 18, 19))
    assert ex.render(s4.objective) == expected


def test_lift_session4_to_template(jocp_inst):
    inst, imap = jocp_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    s4 = next(s for s in dc.split_by_entity(layers["transport"], inst.problem.graph)
              if s.entity_index == 4)
    prog = dc.lift_to_abstract(s4, imap)
    assert ex.render(prog.objective) == "sesrate - sesrate*sum(seslnk: lbd)"
    assert prog.collect == (dc.CollectionRule("seslnk", 0),)
    assert prog.decision == "sesrate"


def test_lift_log_variant(jocp_inst):
    p = ab.parse_problem(JOCP_LOG)
    from netnum.reference import REFERENCE_SESSIONS_OF_LINK
    inst, imap = it.instantiate_problem(
        p, it.InstanceConfig(), preset={"lnkses": REFERENCE_SESSIONS_OF_LINK})
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, p.graph)
    s0 = dc.split_by_entity(layers["transport"], p.graph)[0]
    prog = dc.lift_to_abstract(s0, imap)
    assert ex.render(prog.objective) == "ln(sesrate) - sesrate*sum(seslnk: lbd)"


def test_lift_physical_self_rule(toy_inst):
    inst, imap = toy_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    links = dc.split_by_entity(layers["physical"], inst.problem.graph)
    prog = dc.lift_to_abstract(links[0], imap)
    assert ex.render(prog.objective) == "lnkcap*lbd"
    assert prog.collect == (dc.CollectionRule("self", 0),)
    assert prog.decision == "lnkpwr"


def test_lift_reinstantiate_round_trip(toy_inst, jocp_inst):
    for inst, imap in (toy_inst, jocp_inst):
        dp = dc.dualize(inst)
        layers, _ = dc.split_by_layer(dp, inst.problem.graph)
        for sub in layers.values():
            for entity in dc.split_by_entity(sub, inst.problem.graph):
                prog = dc.lift_to_abstract(entity, imap)
                back = dc.reinstantiate(prog, imap, entity.entity_index, dp)
                assert back == entity.objective


def test_all_entities_lift_to_one_template(jocp_inst):
    inst, imap = jocp_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    for sub in layers.values():
        lifted = [dc.lift_to_abstract(e, imap)
                  for e in dc.split_by_entity(sub, inst.problem.graph)]
        assert len({(ex.render(p.objective), p.collect) for p in lifted}) == 1


def test_lift_no_matching_element(jocp_inst):
    inst, imap = jocp_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    s4 = next(s for s in dc.split_by_entity(layers["transport"], inst.problem.graph)
              if s.entity_index == 4)
    broken = copy.deepcopy(imap)
    fam = broken.lcl["seslnk"]
    fam.instances[4] = tuple(sorted(set(fam.instances[4]) ^ {0, 1}))
    with pytest.raises(dc.NoMatchingElement):
        dc.lift_to_abstract(s4, broken)


def test_penalize_best_response_unchanged(toy_inst):
    inst, imap = toy_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    prog = dc.lift_to_abstract(
        dc.split_by_entity(layers["physical"], inst.problem.graph)[0], imap)
    pen = dc.penalize(prog, "best_response", inst.problem.graph)
    assert pen.objective == prog.objective and pen.penalty is None


def test_penalize_dpl_uses_symbolic_capacity_derivative(toy_inst):
    inst, imap = toy_inst
    graph = inst.problem.graph
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, graph)
    prog = dc.lift_to_abstract(
        dc.split_by_entity(layers["physical"], graph)[0], imap)
    pen = dc.penalize(prog, "dpl", graph)
    assert pen.penalty is not None
    free = ex.free_vars(pen.penalty)
    assert "lbd_itf" in free and "lnkpwr" in free and "lnkpwr_anchor" in free
    # numerically equals lbd * d(capacity)/d(interferer power) * (p - p0)
    model = ab.resolve_model(graph, "lnkcap")
    deriv = ex.differentiate(model, "itfpwr")
    rng = random.Random(4)
    for _ in range(20):
        theirs = {"freq": 2e5, "lnkpwr": rng.uniform(1, 500),
                  "lnkgain": rng.uniform(1e-6, 1e-4),
                  "lnknoise": rng.uniform(1e-5, 1e-3),
                  "lnkgain_itf": rng.uniform(1e-7, 1e-5)}
        p0, p1, lam = rng.uniform(1, 500), rng.uniform(1, 500), rng.uniform(0, 2)
        env = {f"itf_{k}": v for k, v in theirs.items()}
        env.update({"lbd_itf": lam, "lnkpwr": p1, "lnkpwr_anchor": p0})
        want = lam * ex.eval_expr(deriv, {**theirs, "itfpwr": p0}) * (p1 - p0)
        assert abs(ex.eval_expr(pen.penalty, env) - want) < 1e-9 * max(1, abs(want))


def test_penalization_vanishes_at_anchor(toy_inst):
    inst, imap = toy_inst
    graph = inst.problem.graph
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, graph)
    prog = dc.lift_to_abstract(
        dc.split_by_entity(layers["physical"], graph)[0], imap)
    for mode in ("gradient", "dpl"):
        pen = dc.penalize(prog, mode, graph)
        env = {v: 1.7 for v in ex.free_vars(pen.penalty)}
        env["lnkpwr"] = env["lnkpwr_anchor"] = 42.0
        assert ex.eval_expr(pen.penalty, env) == 0.0


def test_penalize_transport_has_no_coupling(jocp_inst):
    inst, imap = jocp_inst
    dp = dc.dualize(inst)
    layers, _ = dc.split_by_layer(dp, inst.problem.graph)
    s0 = dc.split_by_entity(layers["transport"], inst.problem.graph)[0]
    prog = dc.lift_to_abstract(s0, imap)
    pen = dc.penalize(prog, "dpl", inst.problem.graph)
    assert pen.penalty is None and pen.mode == "dpl"


def test_penalize_not_differentiable(toy_inst):
    inst, imap = toy_inst
    dp = dc.dualize(inst)
    graph = ab.builtin_graph()
    layers, _ = dc.split_by_layer(dp, graph)
    prog = dc.lift_to_abstract(
        dc.split_by_entity(layers["physical"], graph)[0], imap)
    # a coupling model the differentiator cannot handle
    weird = ab.ElementGraph()
    for el in graph.elements.values():
        weird.add_element(el)
    weird.edges = set(graph.edges)
    weird.elements["lnkcap"] = ab.Element(
        "lnkcap", "primitive", "attribute", layer="physical",
        model=ex.bigsum("netlnk", ex.var("itfpwr", "netlnk")))
    weird.edges = {e for e in weird.edges if not (e[0] == "lnkcap" and e[1] == ab.FUNC_OF)}
    weird.add_edge("lnkcap", ab.FUNC_OF, "itfpwr")
    with pytest.raises(dc.NotDifferentiable):
        dc.penalize(prog, "dpl", weird)


def test_duals_never_owned(toy_inst, jocp_inst):
    for inst, _ in (toy_inst, jocp_inst):
        dp = dc.dualize(inst)
        layers, _ = dc.split_by_layer(dp, inst.problem.graph)
        for sub in layers.values():
            for e in dc.split_by_entity(sub, inst.problem.graph):
                assert not any(v.startswith("lbd") for v in e.owned)
                assert all(v.startswith("lbd") for v in e.foreign)


def test_dump_dual_layout(toy_inst):
    inst, _ = toy_inst
    dp = dc.dualize(inst)
    lines = dc.dump_dual(dp).splitlines()
    assert lines[0] == "utility: sesrate_00 + sesrate_01 + sesrate_02"
    assert lines[1].startswith("lbd_00 [netlnk_00]:")
    assert len(lines) == 4
