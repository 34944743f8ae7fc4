"""Batch front door: run the full pipeline from a problem file and a
scenario config, emit traces and dumps, or compare two trace files.

    netnum run --problem jocp.ncp --scenario s2.cfg --out results/
    netnum compare results_a/trace.csv results_b/trace.csv
"""

from __future__ import annotations

import argparse
import statistics
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import abstraction, decompose, instantiate, netsim


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class SchemaMismatch(CliError):
    def __init__(self, message: str):
        super().__init__("compare", message)


@dataclass
class ExperimentSpec:
    problem_path: Path
    scenario_path: Path
    scheme: str = "joint"
    duration: float = 1500.0
    seed: int | None = None
    out_dir: Path = Path("out")
    dump_dual: bool = False
    dump_programs: bool = False
    dump_instances: bool = False
    seeds: int = 1


def build_programs(problem: abstraction.ControlProblem,
                   cfg: instantiate.InstanceConfig | None = None,
                   ) -> tuple[dict[str, decompose.ControlProgram],
                              decompose.DualProblem, instantiate.InstanceMap]:
    """Design-time half of the pipeline: instantiate, dualize, split, lift
    one template per layer (all entities must lift identically), penalize."""
    cfg = cfg or instantiate.InstanceConfig(seed=0)
    inst, imap = instantiate.instantiate_problem(problem, cfg)
    dp = decompose.dualize(inst)
    layers, _ = decompose.split_by_layer(dp, problem.graph)
    programs: dict[str, decompose.ControlProgram] = {}
    for layer, sub in layers.items():
        entities = decompose.split_by_entity(sub, problem.graph)
        lifted = [decompose.lift_to_abstract(e, imap) for e in entities]
        first = lifted[0]
        for other in lifted[1:]:
            if other.objective != first.objective or other.collect != first.collect:
                raise CliError("lift", f"{layer}: entity templates differ")
        programs[layer] = decompose.penalize(first, problem.directive[1],
                                             problem.graph)
    return programs, dp, imap


def deploy(problem: abstraction.ControlProblem,
           programs: dict[str, decompose.ControlProgram],
           cfg: netsim.ScenarioConfig) -> netsim.NetState:
    net = netsim.build_scenario(cfg)
    netsim.install_problem(net, problem)
    if "transport" in programs:
        for s in net.sessions:
            netsim.install_program(net, ("session", s.index), programs["transport"])
    if "physical" in programs:
        for link in net.links:
            netsim.install_program(net, ("link", link.index), programs["physical"])
    return net


def _summary(net: netsim.NetState, trace: netsim.Trace) -> str:
    lines = ["summary"]
    lines.append(f"final_sum_utility\t{trace.mean('net', 'sum_utility', tail=0.3)!r}")
    for s in net.sessions:
        m = trace.mean("session", "throughput_pps", s.index)
        lines.append(f"session_{s.index}_mean_throughput_pps\t{m!r}")
    lines.append(f"mean_power_gain_db\t{trace.mean('node', 'power_gain_db')!r}")
    return "\n".join(lines) + "\n"


def run_experiment(spec: ExperimentSpec) -> int:
    try:
        source = spec.problem_path.read_text()
    except OSError as err:
        print(f"[load] cannot read problem file: {err}", file=sys.stderr)
        return 2
    try:
        scenario_text = spec.scenario_path.read_text()
    except OSError as err:
        print(f"[load] cannot read scenario file: {err}", file=sys.stderr)
        return 2
    try:
        problem = abstraction.parse_problem(source)
    except abstraction.AbstractionError as err:
        print(f"[parse] {spec.problem_path}: {err}", file=sys.stderr)
        return 2
    try:
        scn = netsim.load_scenario(scenario_text)
        if spec.seed is not None:
            scn = replace(scn, seed=spec.seed)
    except netsim.ConfigError as err:
        print(f"[scenario] {spec.scenario_path}: {err}", file=sys.stderr)
        return 2
    try:
        programs, dp, imap = build_programs(problem)
    except (instantiate.InstantiateError, decompose.DecomposeError, CliError) as err:
        print(f"[decompose] {err}", file=sys.stderr)
        return 2

    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if spec.dump_dual:
        (out / "dual.txt").write_text(decompose.dump_dual(dp))
    if spec.dump_programs:
        text = "".join(f"# {layer}\n{decompose.dump_program(prog)}\n"
                       for layer, prog in sorted(programs.items()))
        (out / "programs.txt").write_text(text)
    if spec.dump_instances:
        text = "".join(instantiate.dump_table(imap, name) + "\n"
                       for name in sorted(imap.lcl))
        (out / "instances.txt").write_text(text)

    utilities = []
    try:
        for k in range(spec.seeds):
            run_cfg = replace(scn, seed=scn.seed + k)
            net = deploy(problem, programs, run_cfg)
            trace = netsim.run(net, spec.duration, spec.scheme)
            suffix = f"_s{run_cfg.seed}" if spec.seeds > 1 else ""
            (out / f"trace{suffix}.csv").write_text(trace.to_csv())
            (out / f"summary{suffix}.txt").write_text(_summary(net, trace))
            utilities.append(trace.mean("net", "sum_utility", tail=0.3))
    except netsim.NetsimError as err:
        print(f"[simulate] {err}", file=sys.stderr)
        return 2
    if spec.seeds > 1:
        (out / "summary.txt").write_text(
            "sweep_mean_sum_utility\t{!r}\nruns\t{}\n".format(
                statistics.mean(utilities), spec.seeds))
    print(f"wrote {out}/trace*.csv (sum utility {utilities[0]!r})")
    return 0


# ---------------------------------------------------------------------------
# trace comparison

def _load_trace(path: Path) -> list[tuple[float, str, int, str, float]]:
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "time,entity_kind,entity_id,metric,value":
        raise SchemaMismatch(f"{path}: unexpected header")
    rows = []
    for line in lines[1:]:
        t, kind, eid, metric, value = line.split(",")
        rows.append((float(t), kind, int(eid), metric, float(value)))
    return rows


def compare_runs(path_a: Path, path_b: Path) -> str:
    """Per-metric deltas and orderings between two runs of the same schema."""
    a, b = _load_trace(path_a), _load_trace(path_b)
    metrics_a = {(k, m) for (_, k, _, m, _) in a}
    metrics_b = {(k, m) for (_, k, _, m, _) in b}
    if metrics_a != metrics_b:
        raise SchemaMismatch(
            f"traces record different metrics: {sorted(metrics_a ^ metrics_b)}")

    def mean(rows, kind, metric):
        vals = [v for (_, k, _, m, v) in rows if k == kind and m == metric]
        return sum(vals) / len(vals)

    lines = [f"compare {path_a} vs {path_b}"]
    for kind, metric in sorted(metrics_a):
        ma, mb = mean(a, kind, metric), mean(b, kind, metric)
        order = "A>B" if ma > mb else ("A<B" if ma < mb else "A=B")
        lines.append(f"{kind}/{metric}\tA={ma!r}\tB={mb!r}\tdelta={ma - mb!r}\t{order}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point

def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="netnum",
        description="compile a network control problem into distributed "
                    "programs and run them in the simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run one experiment")
    runp.add_argument("--problem", required=True, type=Path)
    runp.add_argument("--scenario", required=True, type=Path)
    runp.add_argument("--scheme", default="joint", choices=netsim.SCHEMES)
    runp.add_argument("--duration", type=float, default=1500.0)
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--out", type=Path, default=Path("out"))
    runp.add_argument("--dump-dual", action="store_true")
    runp.add_argument("--dump-programs", action="store_true")
    runp.add_argument("--dump-instances", action="store_true")
    runp.add_argument("--seeds", type=int, default=1,
                      help="fan out N runs with consecutive seeds")

    cmp_p = sub.add_parser("compare", help="compare two trace files")
    cmp_p.add_argument("trace_a", type=Path)
    cmp_p.add_argument("trace_b", type=Path)

    args = parser.parse_args(argv)
    if args.command == "run":
        spec = ExperimentSpec(
            problem_path=args.problem, scenario_path=args.scenario,
            scheme=args.scheme, duration=args.duration, seed=args.seed,
            out_dir=args.out, dump_dual=args.dump_dual,
            dump_programs=args.dump_programs,
            dump_instances=args.dump_instances, seeds=args.seeds)
        return run_experiment(spec)
    if args.command == "compare":
        try:
            report = compare_runs(args.trace_a, args.trace_b)
        except (SchemaMismatch, OSError, ValueError) as err:
            print(f"[compare] {err}", file=sys.stderr)
            return 2
        print(report, end="")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
