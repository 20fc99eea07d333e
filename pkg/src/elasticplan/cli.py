"""Command-line entry point.

Exit codes: 0 ok, 2 usage or parse error, 3 infeasible job or plan,
4 simulation failure (job failed or simulator error). Every flag can also
be given through an environment variable ``ELASTICPLAN_<FLAG>``, for
example ``ELASTICPLAN_SEED=3``; explicit flags win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence, Tuple

from .model import ClusterConfig, FormatError, RuntimeStats, from_json, parse_json_text, to_json
from .planner import PlannerError, optimize_plan
from .sim import (PolicyKind, SimReport, SimulationError, bundled_names, load_scenario,
                  run_scenario)
from .sim.report import SERIES_COLUMNS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_SIM_FAILURE = 4
ENV_PREFIX = "ELASTICPLAN_"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env(name: str, default: Optional[str] = None) -> Optional[str]:
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def _env_int(name: str, default: Optional[int] = None) -> Optional[int]:
    raw = _env(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"error: {ENV_PREFIX}{name.upper()} must be an integer, got {raw!r}")


def _is_infeasible(exc: Exception) -> bool:
    return "infeasible" in str(exc)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- run ---------------------------------------------------------------------------


def _run_one(args: Tuple[str, Optional[int], Optional[str], Optional[int]]) -> Tuple[int, str, str]:
    """Run one scenario; returns (exit code, report json, message)."""
    name, seed, policy, quota = args
    try:
        sc = load_scenario(name)
        if policy is not None:
            sc = sc.with_policy(PolicyKind(policy))
        if quota is not None:
            sc = sc.with_quota(quota)
    except FileNotFoundError as exc:
        return EXIT_USAGE, "", str(exc)
    except (FormatError, ValueError) as exc:
        code = EXIT_INFEASIBLE if _is_infeasible(exc) else EXIT_USAGE
        return code, "", f"{name}: {exc}"
    try:
        report = run_scenario(sc, seed)
    except SimulationError as exc:
        return EXIT_SIM_FAILURE, "", f"{name}: simulator error: {exc}"
    msg = f"{sc.name} [{sc.policy.value}] {report.status}"
    if report.completed:
        msg += f" jct={report.jct:.1f}s"
        return EXIT_OK, report.to_json(), msg
    return EXIT_SIM_FAILURE, report.to_json(), msg + f": {report.failure_reason}"


def _out_path(out: str, name: str, many: bool) -> str:
    if not many:
        return out
    os.makedirs(out, exist_ok=True)
    base = os.path.splitext(os.path.basename(name))[0]
    return os.path.join(out, f"{base}.json")


def cmd_run(ns: argparse.Namespace) -> int:
    scenarios: List[str] = ns.scenario or ([_env("scenario")] if _env("scenario") else [])
    if not scenarios:
        return _fail(EXIT_USAGE, "no scenario given (use --scenario or ELASTICPLAN_SCENARIO)")
    jobs = [(s, ns.seed, ns.policy, ns.quota) for s in scenarios]
    if ns.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.parallel) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    worst = EXIT_OK
    many = len(jobs) > 1
    for (name, *_), (code, text, msg) in zip(jobs, results):
        print(msg, file=sys.stderr if code else sys.stdout)
        if text:
            if ns.out:
                with open(_out_path(ns.out, name, many), "w", encoding="utf-8") as fh:
                    fh.write(text)
            elif not many:
                sys.stdout.write(text)
        worst = max(worst, code)
    return worst


# -- plan --------------------------------------------------------------------------


def _stats_from_file(path: str, cfg: ClusterConfig) -> RuntimeStats:
    """Accept a full RuntimeStats document or a short ``{"w_hat", "s_hat"}`` form."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    data = parse_json_text(text)
    if isinstance(data, dict) and "w_hat" in data:
        try:
            w_hat, s_hat = float(data["w_hat"]), float(data["s_hat"])
            n = int(data.get("n_workers", 1))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"stats needs numeric w_hat and s_hat: {exc}") from exc
        w_alloc = max(float(cfg.c_max), w_hat)
        ps_alloc = max(float(cfg.ps_cpu_unit), s_hat * n)
        return RuntimeStats(job_id=str(data.get("job_id", "job")), worker_used_cpu=[w_hat] * n,
                            worker_alloc_cpu=[w_alloc] * n, ps_used_cpu=[s_hat * n],
                            ps_alloc_cpu=[ps_alloc], worker_used_mem=[0.0] * n,
                            ps_used_mem=[0.0])
    return from_json(RuntimeStats, text)


def cmd_plan(ns: argparse.Namespace) -> int:
    try:
        cfg = ClusterConfig()
        if ns.config:
            with open(ns.config, "r", encoding="utf-8") as fh:
                cfg = from_json(ClusterConfig, fh.read())
        stats = _stats_from_file(ns.stats, cfg)
    except OSError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (FormatError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"{ns.stats}: {exc}")
    quota = ns.quota if ns.quota is not None else cfg.c_total_default
    try:
        decision = optimize_plan(stats.job_id, stats, quota, cfg)
    except PlannerError as exc:
        return _fail(EXIT_INFEASIBLE, str(exc))
    text = to_json(decision.plan) + "\n"
    if ns.out:
        with open(ns.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(decision.detail, file=sys.stderr)
    sys.stdout.write(text)
    return EXIT_OK


# -- report, validate, scenarios, serve -----------------------------------------------


def cmd_report(ns: argparse.Namespace) -> int:
    if ns.series not in SERIES_COLUMNS:
        return _fail(EXIT_USAGE, f"unknown series {ns.series!r}; valid: {', '.join(SERIES_COLUMNS)}")
    try:
        with open(ns.report, "r", encoding="utf-8") as fh:
            report = SimReport.from_json(fh.read())
    except (OSError, ValueError) as exc:
        return _fail(EXIT_USAGE, f"{ns.report}: {exc}")
    sys.stdout.write(report.series_csv(ns.series))
    return EXIT_OK


def cmd_validate(ns: argparse.Namespace) -> int:
    worst = EXIT_OK
    for name in ns.scenario:
        try:
            sc = load_scenario(name)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            worst = max(worst, EXIT_USAGE)
            continue
        except (FormatError, ValueError) as exc:
            print(f"error: {name}: {exc}", file=sys.stderr)
            worst = max(worst, EXIT_INFEASIBLE if _is_infeasible(exc) else EXIT_USAGE)
            continue
        print(f"{name}: ok ({sc.name}, policy {sc.policy.value}, {len(sc.faults)} faults)")
    return worst


def cmd_scenarios(ns: argparse.Namespace) -> int:
    for name in bundled_names():
        sc = load_scenario(name)
        print(f"{name}\t{sc.description}")
    return EXIT_OK


def cmd_serve(ns: argparse.Namespace) -> int:
    import signal
    import threading

    from .sharding import DatasetShardManager
    from .shardnet import ShardServer, ShardService

    manager = DatasetShardManager(ns.dataset_size, ns.shard_size, ns.epochs)
    service = ShardService(manager, job_id=ns.job_id, heartbeat_interval=ns.heartbeat,
                           max_missed=ns.max_missed)
    server = ShardServer(service, ns.host, ns.port).start()
    host, port = server.address
    print(f"serving on {host}:{port}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        while not done.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elasticplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one or more scenarios and write reports")
    r.add_argument("--scenario", action="append", help="bundled name or path; repeatable")
    r.add_argument("--seed", type=int, default=_env_int("seed"))
    r.add_argument("--out", default=_env("out"), help="report file, or directory for several")
    r.add_argument("--policy", choices=[k.value for k in PolicyKind], default=_env("policy"))
    r.add_argument("--quota", type=int, default=_env_int("quota"))
    r.add_argument("--parallel", type=int, default=_env_int("parallel", 1))
    r.set_defaults(func=cmd_run)

    pl = sub.add_parser("plan", help="closed-form plan from sampled stats")
    pl.add_argument("--stats", required=_env("stats") is None, default=_env("stats"))
    pl.add_argument("--quota", type=int, default=_env_int("quota"))
    pl.add_argument("--config", default=_env("config"), help="cluster config JSON")
    pl.add_argument("--out", default=_env("out"))
    pl.set_defaults(func=cmd_plan)

    rp = sub.add_parser("report", help="print one report series as CSV")
    rp.add_argument("--report", required=_env("report") is None, default=_env("report"))
    rp.add_argument("--series", default=_env("series", "throughput"))
    rp.set_defaults(func=cmd_report)

    v = sub.add_parser("validate", help="check scenario files")
    v.add_argument("scenario", nargs="+")
    v.set_defaults(func=cmd_validate)

    sc = sub.add_parser("scenarios", help="list bundled scenarios")
    sc.set_defaults(func=cmd_scenarios)

    sv = sub.add_parser("serve", help="serve a shard manager over TCP")
    sv.add_argument("--host", default=_env("host", "127.0.0.1"))
    sv.add_argument("--port", type=int, default=_env_int("port", 7070))
    sv.add_argument("--dataset-size", type=int, default=_env_int("dataset_size", 10000))
    sv.add_argument("--shard-size", type=int, default=_env_int("shard_size", 100))
    sv.add_argument("--epochs", type=int, default=_env_int("epochs", 1))
    sv.add_argument("--job-id", default=_env("job_id"))
    sv.add_argument("--heartbeat", type=float, default=float(_env("heartbeat", "2.0")))
    sv.add_argument("--max-missed", type=int, default=_env_int("max_missed", 3))
    sv.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
