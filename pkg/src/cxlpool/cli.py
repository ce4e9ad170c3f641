"""Command-line front end: ``cxlpool <subcommand> [options]``.

Exit status is 0 on success, 2 when the input does not validate and 3 when a
run fails.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .channel import ping_pong, ping_pong_threads
from .controlplane import ControlPlane
from .errors import CxlPoolError, ParseError, ValidationError
from .scenario import (ChannelBenchSpec, Fault, Scenario, UdpBenchSpec, load_scenario,
                       shipped_scenario_path)
from .simcore import Engine
from .stranding import compare_pooling
from .topology import LatencyParams, feasibility
from .udpbench import PLACEMENTS, UdpBenchConfig, config_from_topology, run_udp_bench

CSV_COLUMNS = {
    "feasibility": ("kind", "id", "required_lanes", "lanes", "cxl_bw_gbs", "pool_single",
                    "harvest_lanes", "harvest"),
    "channel_bench": ("iter", "oneway_ns"),
    "udp_bench": ("offered_gbps", "achieved_gbps", "p50_us", "p99_us", "placement"),
    "failover_timeline": ("time", "event", "workload", "device"),
    "stranding": ("N", "resource", "mean_stranded", "stddev", "analytic_sqrt_prediction"),
}


@dataclass
class Output:
    """What one experiment produced."""
    name: str
    rows: list = field(default_factory=list)
    summary: list[str] = field(default_factory=list)
    engines: list[Engine] = field(default_factory=list)
    ok: bool = True
    tag: str = ""    # distinguishes several files of the same kind

    @property
    def stem(self) -> str:
        return f"{self.name}_{self.tag}" if self.tag else self.name

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS[self.name])
        w.writerows(self.rows)
        return buf.getvalue()


def _fmt(x, digits=6):
    if x is None or x == "":
        return ""
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.{digits}f}"
    return str(x)


def format_table(headers, rows) -> list[str]:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    return ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]


# -- experiments -------------------------------------------------------------------

def exp_feasibility(sc: Scenario, params: LatencyParams) -> Output:
    rep = feasibility(sc.topology, params)
    out = Output("feasibility")
    for r in rep.rows():
        out.rows.append([r["kind"], r["id"], _fmt(r.get("required_lanes")), _fmt(r.get("lanes")),
                         _fmt(r.get("cxl_bw_gbs"), 2), _fmt(r.get("pool_single")),
                         _fmt(r.get("harvest_lanes")), _fmt(r.get("harvest"))])
    out.summary = [f"feasibility: {len(rep.device_lanes)} devices, "
                   f"{rep.harvest_bw_gbs:.2f} GB/s to harvest"]
    if sc.topology.devices or sc.topology.hosts:
        out.summary += format_table(CSV_COLUMNS["feasibility"], out.rows)
    return out


def exp_channel(spec: ChannelBenchSpec, params: LatencyParams, seed: int, pod_kind: str) -> Output:
    out = Output("channel_bench")
    if spec.mode == "threads":
        dist = ping_pong_threads(spec.iters, spec.capacity)
    else:
        eng = Engine(seed)
        dist = ping_pong(spec.iters, params, seed, spec.capacity, pod_kind=pod_kind, engine=eng)
        out.engines.append(eng)
    out.rows = [[i, _fmt(float(v), 1)] for i, v in enumerate(dist.samples)]
    pct = dist.percentiles() if len(dist) else {}
    out.summary = [f"channel-bench ({spec.mode}, capacity {spec.capacity}, {len(dist)} iterations): "
                   + ", ".join(f"p{k} {v:.1f} ns" for k, v in pct.items())]
    return out


def exp_udp(spec: UdpBenchSpec, sc: Scenario | None, params: LatencyParams,
            seed: int) -> list[Output]:
    """One output per packet size; each holds every placement's load sweep."""
    cfg = spec.config
    if spec.nic_device is not None and sc is not None:
        nic = sc.topology.device(spec.nic_device)
        app = spec.app_host if spec.app_host is not None else nic.attached_host_id
        overrides = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
                     if f.name not in ("nic_gbps", "nic_port_gbs", "app_port_gbs")}
        cfg = config_from_topology(sc.topology, spec.nic_device, app, params, **overrides)
    outs = []
    for size in spec.pkt_sizes:
        c = replace(cfg, pkt_size=size)
        out = Output("udp_bench", tag=str(size))
        points = []
        for placement in spec.placements:
            for pt in run_udp_bench(c, placement, params, seed):
                points.append(pt)
                out.rows.append([_fmt(pt.offered_gbps, 3), _fmt(pt.achieved_gbps, 3),
                                 _fmt(pt.p50_us, 3), _fmt(pt.p99_us, 3), pt.placement])
        out.summary = [f"udp-bench: {size} B packets, NIC {cfg.nic_gbps:g} Gbps"]
        out.summary += format_table(("placement", "offered", "achieved", "p50_us", "p99_us"),
                                    [[p.placement, p.offered_gbps, p.achieved_gbps, p.p50_us,
                                      p.p99_us] for p in points])
        outs.append(out)
    return outs


def exp_failover(sc: Scenario, params: LatencyParams, seed: int, faults: list[Fault]) -> Output:
    spec = sc.failover
    cp = ControlPlane(sc.topology, list(spec.workloads), params, seed, spec.config)
    for f in faults:
        t = f.at_ms * 1e6
        if f.event == "fail_device":
            cp.fail_device_at(f.target, t)
        elif f.event == "hot_remove":
            cp.hot_remove_at(f.target, t)
        elif f.event == "crash_host":
            cp.crash_host_at(f.target, t)
    rep = cp.run(spec.duration_ms * 1e6)
    out = Output("failover_timeline", engines=[cp.engine])
    out.rows = [[_fmt(e.time, 1), e.event, e.workload, e.device] for e in rep.timeline]
    out.ok = rep.conserved and not rep.violations
    out.summary = [
        f"failover-demo: {len(spec.workloads)} workloads, {spec.duration_ms:g} ms, "
        f"{len(faults)} injected events",
        f"  I/O submitted {rep.submitted}, completed {rep.completed}, cancelled {rep.cancelled}, "
        f"conserved: {'yes' if rep.conserved else 'NO'}",
        f"  state transitions checked {rep.transitions}, invariant violations {len(rep.violations)}",
    ]
    for v in rep.violations[:5]:
        out.summary.append(f"  violation at {v[0]:.1f} ns: {v[1]}")
    return out


def exp_stranding(sc: Scenario) -> Output:
    spec = sc.stranding
    cmp_ = compare_pooling(spec.scenario, spec.group_sizes, spec.seeds)
    out = Output("stranding")
    for r in cmp_.rows():
        out.rows.append([r.n, r.resource, _fmt(r.mean_stranded), _fmt(r.stddev),
                         _fmt(r.analytic_sqrt_prediction)])
    out.summary = [f"stranding: {spec.scenario.host_count} hosts, {spec.seeds} seeds, "
                   f"pooled {list(spec.scenario.pooled_resources)}"]
    out.summary += format_table(CSV_COLUMNS["stranding"], out.rows)
    return out


# -- plumbing ---------------------------------------------------------------------

def trace_digest(outputs) -> str:
    h = hashlib.sha256()
    for o in outputs:
        for e in o.engines:
            h.update(e.trace.digest().encode())
    return h.hexdigest()


def write_trace(path, outputs):
    with open(path, "w") as f:
        for o in outputs:
            for e in o.engines:
                for rec in e.trace:
                    f.write(rec.to_json() + "\n")


def run_scenario(sc: Scenario, params: LatencyParams | None = None, seed: int | None = None):
    """Run every experiment the scenario asks for. Returns the outputs in a fixed order."""
    params = params or sc.latency
    seed = sc.seed if seed is None else seed
    outs = [exp_feasibility(sc, params)]
    if sc.channel_bench:
        outs.append(exp_channel(sc.channel_bench, params, seed, sc.topology.pod_kind))
    if sc.udp_bench:
        outs += exp_udp(sc.udp_bench, sc, params, seed)
    if sc.failover:
        outs.append(exp_failover(sc, params, seed, sc.faults))
    if sc.stranding:
        outs.append(exp_stranding(sc))
    return outs


_LATENCY_FLAGS = [f.name for f in dataclasses.fields(LatencyParams)]


def _add_globals(p: argparse.ArgumentParser, suppress: bool):
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, **(d or {"default": None}), help="RNG seed")
    p.add_argument("--csv-dir", **(d or {"default": None}), help="directory for CSV outputs")
    p.add_argument("--trace", **(d or {"default": None}), help="write the event trace as JSON lines")
    p.add_argument("--quiet", action="store_true", **(d or {"default": False}))
    for name in _LATENCY_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float,
                       **(d or {"default": None}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxlpool",
                                     description="PCIe device pooling over a CXL memory pool")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    p = command("feasibility", "lane requirements and per-host verdicts")
    p.add_argument("--scenario", help="scenario JSON (default: shipped pod8)")
    p.add_argument("--csv")

    p = command("channel-bench", "ping-pong over the shared-memory channel")
    p.add_argument("--capacity", type=int, default=8)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--mode", choices=("sim", "threads"), default="sim")
    p.add_argument("--csv")

    p = command("udp-bench", "UDP echo with local or pooled I/O buffers")
    p.add_argument("--pkt-size", type=int, action="append",
                   help="packet size in bytes; repeat for several (default 1500)")
    p.add_argument("--placement", choices=PLACEMENTS + ("both",), default="both")
    p.add_argument("--nic-gbps", type=float, default=100.0)
    p.add_argument("--load-step", type=float, default=0.05)
    p.add_argument("--requests", type=int, default=2000)
    p.add_argument("--csv")

    p = command("failover-demo", "device failure handled by the orchestrator")
    p.add_argument("--scenario", help="scenario JSON (default: shipped pod8)")
    p.add_argument("--fail-device", type=int)
    p.add_argument("--at-ms", type=float, default=20.5)
    p.add_argument("--duration-ms", type=float)
    p.add_argument("--csv")

    p = command("stranding", "pooled versus unpooled resource stranding")
    p.add_argument("--scenario", help="scenario JSON (default: shipped pod8)")
    p.add_argument("--group-sizes", default="1,2,4,8")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--csv")

    p = command("run", "run every experiment in a scenario")
    p.add_argument("scenario", nargs="?", help="scenario JSON (default: shipped pod8)")
    return parser


def _params(args, base: LatencyParams) -> LatencyParams:
    over = {k: getattr(args, k) for k in _LATENCY_FLAGS if getattr(args, k, None) is not None}
    return replace(base, **over)


def _scenario(path) -> Scenario:
    return load_scenario(path or shipped_scenario_path())


def _emit(args, outputs, explicit_csv=None):
    if explicit_csv:
        target = Path(explicit_csv)
        target.parent.mkdir(parents=True, exist_ok=True)
        if len(outputs) == 1:
            target.write_text(outputs[0].csv_text())
        else:
            for o in outputs:
                target.with_name(f"{target.stem}_{o.tag}{target.suffix}").write_text(o.csv_text())
    if args.csv_dir:
        d = Path(args.csv_dir)
        d.mkdir(parents=True, exist_ok=True)
        for o in outputs:
            (d / f"{o.stem}.csv").write_text(o.csv_text())
    if args.trace:
        write_trace(args.trace, outputs)
    if not args.quiet:
        for o in outputs:
            print("\n".join(o.summary))
        if any(o.engines for o in outputs):
            print(f"trace sha256 {trace_digest(outputs)}")


def _group_sizes(text):
    try:
        sizes = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ValidationError([f"--group-sizes: not a comma-separated list of integers: {text!r}"])
    if not sizes:
        raise ValidationError(["--group-sizes: empty"])
    return sizes


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "channel-bench":
        params = _params(args, LatencyParams())
        spec = ChannelBenchSpec(args.capacity, args.iters, args.mode)
        if spec.capacity < 1 or spec.iters < 0:
            raise ValidationError(["--capacity must be >= 1 and --iters >= 0"])
        outs = [exp_channel(spec, params, args.seed or 0, "mhd_direct")]
    elif cmd == "udp-bench":
        params = _params(args, LatencyParams())
        cfg = UdpBenchConfig(nic_gbps=args.nic_gbps, load_step=args.load_step,
                             requests=args.requests)
        if args.nic_gbps <= 0 or not 0 < args.load_step <= 1 or args.requests < 2:
            raise ValidationError(["--nic-gbps, --load-step and --requests must be positive"])
        placements = PLACEMENTS if args.placement == "both" else (args.placement,)
        spec = UdpBenchSpec(tuple(args.pkt_size or (1500,)), placements, config=cfg)
        outs = exp_udp(spec, None, params, args.seed or 0)
    else:
        sc = _scenario(getattr(args, "scenario", None))
        params = _params(args, sc.latency)
        seed = sc.seed if args.seed is None else args.seed
        if cmd == "feasibility":
            outs = [exp_feasibility(sc, params)]
        elif cmd == "failover-demo":
            if sc.failover is None:
                raise ValidationError(["scenario has no workload.failover section"])
            faults = sc.faults
            if args.fail_device is not None:
                if args.fail_device not in {d.id for d in sc.topology.devices}:
                    raise ValidationError([f"--fail-device: unknown device {args.fail_device}"])
                faults = [Fault(args.at_ms, "fail_device", args.fail_device)]
            if args.duration_ms is not None:
                sc.failover = replace(sc.failover, duration_ms=args.duration_ms)
            outs = [exp_failover(sc, params, seed, faults)]
        elif cmd == "stranding":
            if sc.stranding is None:
                raise ValidationError(["scenario has no stranding section"])
            sizes = _group_sizes(args.group_sizes)
            bad = [n for n in sizes if n < 1 or sc.stranding.scenario.host_count % n]
            if bad or args.seeds < 1:
                raise ValidationError([f"group sizes {bad} do not divide host_count "
                                       f"{sc.stranding.scenario.host_count}"] if bad
                                      else ["--seeds must be >= 1"])
            strand = replace(sc.stranding.scenario, seed=seed)
            sc.stranding = replace(sc.stranding, scenario=strand, group_sizes=sizes,
                                   seeds=args.seeds)
            outs = [exp_stranding(sc)]
        else:  # run
            outs = run_scenario(sc, params, seed)
    _emit(args, outs, getattr(args, "csv", None))
    return 0 if all(o.ok for o in outs) else 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except (ParseError, ValidationError) as exc:
        if isinstance(exc, ValidationError):
            print(f"cxlpool: invalid input ({len(exc.violations)} problems):", file=sys.stderr)
            for v in exc.violations:
                print(f"  - {v}", file=sys.stderr)
        else:
            print(f"cxlpool: invalid input: {exc}", file=sys.stderr)
        return 2
    except (CxlPoolError, ValueError, OSError) as exc:
        print(f"cxlpool: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
