"""Command-line front end.

Exit status: 0 guest exit 0, 1 guest nonzero exit, 2 guest fault, 3 enclave
abort, 4 usage or configuration error. ``diff`` exits 0 when the reports
agree and 1 otherwise.
"""
import argparse
import logging
import os
import re
import sys
from pathlib import Path

from .asm import assemble_file, disassemble
from .errors import RatelError
from .gateway import dump_table
from .host import ADVERSARY_MODES, IAGO_VARIANTS, AdversaryPolicy, EventScript, Host, VirtualFs
from .oracle import interpret
from .programs import load_binary, load_corpus
from .trace import diff_lines, parse_report
from .translator import Engine, RunConfig

EXIT_CONFIG = 4
LOG_LEVELS = {0: logging.WARNING, 1: logging.WARNING, 2: logging.INFO, 3: logging.DEBUG,
              4: logging.DEBUG}
_SIZE = re.compile(r"(\d+)([kKmMgG]?)$")


def parse_size(text):
    m = _SIZE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    mult = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}[m.group(2).lower()]
    return int(m.group(1)) * mult


def parse_adversary(text):
    mode, _, variant = text.partition(":")
    if mode not in ADVERSARY_MODES:
        raise argparse.ArgumentTypeError(f"adversary must be one of {', '.join(ADVERSARY_MODES)}")
    if variant and variant not in IAGO_VARIANTS:
        raise argparse.ArgumentTypeError(f"iago variant must be one of {', '.join(IAGO_VARIANTS)}")
    return mode, variant or None


def _world_flags(p):
    p.add_argument("binary", help="guest program (.s source or serialized binary)")
    p.add_argument("--quantum", type=int, default=64, help="max instructions per slice")
    p.add_argument("--seed", type=int, default=None,
                   help="randomize slice lengths (falls back to RATEL_SIM_SEED)")
    p.add_argument("--script", help="event script with signals and adversary switches")
    p.add_argument("--stdin", help="file whose bytes become guest stdin")
    p.add_argument("--vfs", help="directory or path=hex manifest preloading guest files")
    p.add_argument("--heap-max", type=parse_size, default=1 << 20)
    p.add_argument("--max-retired", type=int, default=20_000_000)
    p.add_argument("--report", help="write the text report here (and REPORT.json)")
    p.add_argument("--quiet", action="store_true", help="do not echo the report to stderr")
    p.add_argument("--loglevel", type=int, choices=range(5), default=0)
    p.add_argument("--logdir", help="directory for the run log and report copies")


def _engine_flags(p):
    p.add_argument("--bb-max", type=parse_size, default=1 << 20, help="code cache cap in bytes")
    p.add_argument("--disable-traces", action="store_true")
    p.add_argument("--max-bb-insts", type=int, default=64)
    p.add_argument("--max-trace-bbs", type=int, default=8)
    p.add_argument("--hot-threshold", type=int, default=16)
    p.add_argument("--epc", type=parse_size, default=64 << 20)
    p.add_argument("--public", type=parse_size, default=64 << 20)
    p.add_argument("--tcs", type=int, default=4)
    p.add_argument("--nssa", type=int, default=3)
    p.add_argument("--stash", type=int, default=8, help="number of stash chunks")
    p.add_argument("--stash-size", type=parse_size, default=256 << 10)
    p.add_argument("--pool", type=parse_size, default=16 << 20)
    p.add_argument("--adversary", type=parse_adversary, default=("off", None),
                   help="MODE[:iago-variant]")


def build_parser():
    ap = argparse.ArgumentParser(prog="ratel", description="Enclave DBT simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("assemble", help="assemble source into a binary")
    p.add_argument("source")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("disasm", help="print a binary as source")
    p.add_argument("binary")

    p = sub.add_parser("run", help="run under the engine inside the modeled enclave")
    _world_flags(p)
    _engine_flags(p)

    p = sub.add_parser("run-oracle", help="run under the direct interpreter")
    _world_flags(p)

    p = sub.add_parser("diff", help="compare two reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--scope", choices=("trace", "output"), default="trace")

    p = sub.add_parser("bench", help="stats table over a directory of programs")
    p.add_argument("corpus", nargs="?", help="directory (default: bundled corpus)")
    _engine_flags(p)
    p.add_argument("--quantum", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    sub.add_parser("dump-syscalls", help="print the syscall classification table")

    p = sub.add_parser("dump-procmap", help="show the engine's view of a loaded binary")
    p.add_argument("binary")
    _engine_flags(p)
    return ap


# -- helpers ---------------------------------------------------------------

def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RATEL_SIM_SEED")
    return int(env) if env not in (None, "") else None


def _host(args, adversary=None):
    stdin = Path(args.stdin).read_bytes() if args.stdin else b""
    if args.vfs:
        vfs = VirtualFs.from_dir(args.vfs, stdin) if os.path.isdir(args.vfs) \
            else VirtualFs.from_manifest(args.vfs, stdin)
    else:
        vfs = VirtualFs(stdin=stdin)
    return Host(vfs, adversary)


def _adversary(args):
    mode, variant = args.adversary
    return AdversaryPolicy(mode, variant)


def _config(args, seed=None, quantum=64):
    return RunConfig(
        epc_size=args.epc, public_size=args.public, tcs=args.tcs, nssa=args.nssa,
        bb_max=args.bb_max, traces_enabled=not args.disable_traces,
        max_bb_insts=args.max_bb_insts, max_trace_bbs=args.max_trace_bbs,
        hot_threshold=args.hot_threshold, stash_count=args.stash, stash_size=args.stash_size,
        pool_size=args.pool, heap_max=getattr(args, "heap_max", 1 << 20), quantum=quantum,
        seed=seed, max_retired=getattr(args, "max_retired", 20_000_000),
        loglevel=getattr(args, "loglevel", 0))


def _setup_logging(args):
    logger = logging.getLogger("ratelsim")
    logger.setLevel(LOG_LEVELS[args.loglevel])
    logger.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    if args.logdir:
        os.makedirs(args.logdir, exist_ok=True)
        handler = logging.FileHandler(os.path.join(args.logdir, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)


def _emit(args, result):
    sys.stdout.buffer.write(result.stdout)
    sys.stdout.flush()
    text = result.report_text()
    targets = []
    if args.report:
        targets.append(Path(args.report))
    if args.logdir:
        targets.append(Path(args.logdir) / f"report-{result.world}.txt")
    for path in targets:
        path.write_text(text)
        path.with_name(path.name + ".json").write_text(result.to_json())
    if not args.quiet:
        sys.stderr.write(text)
    if result.reason and result.status != "exit":
        sys.stderr.write(f"ratel: {result.reason}\n")
    return result.cli_status()


# -- commands ----------------------------------------------------------------

def cmd_assemble(args):
    assemble_file(args.source).save(args.output)
    return 0


def cmd_disasm(args):
    print(disassemble(load_binary(args.binary)))
    return 0


def cmd_run(args):
    _setup_logging(args)
    binary = load_binary(args.binary)
    script = EventScript.load(args.script) if args.script else None
    cfg = _config(args, _seed(args), args.quantum)
    engine = Engine(binary, _host(args, _adversary(args)), cfg, script)
    return _emit(args, engine.run())


def cmd_run_oracle(args):
    _setup_logging(args)
    binary = load_binary(args.binary)
    script = EventScript.load(args.script) if args.script else None
    result = interpret(binary, _host(args), script, quantum=args.quantum, seed=_seed(args),
                       heap_max=args.heap_max, max_retired=args.max_retired)
    return _emit(args, result)


def cmd_diff(args):
    a, _ = parse_report(Path(args.a).read_text())
    b, _ = parse_report(Path(args.b).read_text())
    d = diff_lines(a, b, args.scope)
    if d is None:
        print("equal")
        return 0
    i, la, lb = d
    print(f"first divergence at line {i}:\n  a: {la}\n  b: {lb}")
    return 1


BENCH_COLUMNS = ("program", "retired", "syscalls", "ocalls", "ecalls", "signals", "cache_peak",
                 "trace_peak", "t_oracle", "t_dbt", "ratio", "equal")


def bench_rows(programs, cfg_factory):
    """One row per program; failing programs get a marked row."""
    rows = []
    for prog in programs:
        try:
            opts = dict(prog.options)
            cfg = cfg_factory(opts)
            binary = prog.binary()
            oracle = interpret(binary, prog.host(), prog.script(), quantum=cfg.quantum,
                               seed=cfg.seed, heap_max=cfg.heap_max)
            dbt = Engine(binary, prog.host(), cfg, prog.script()).run()
        except (RatelError, OSError) as e:
            rows.append({"program": prog.name, "error": str(e)})
            continue
        s = dbt.stats
        t_o, t_d = oracle.stats["vclock"], s["vclock"]
        rows.append({
            "program": prog.name, "retired": s["retired"],
            "syscalls": sum(s["syscalls"].values()), "ocalls": s["ocalls"], "ecalls": s["ecalls"],
            "signals": s["signals_delivered"], "cache_peak": s["cache_peak"],
            "trace_peak": s["trace_peak"], "t_oracle": t_o, "t_dbt": t_d,
            "ratio": t_d / t_o if t_o else float("inf"),
            "equal": oracle.trace.lines("output") == dbt.trace.lines("output")})
    return rows


def format_rows(rows):
    widths = {c: max(len(c), 8) for c in BENCH_COLUMNS}
    widths["program"] = max([len("program")] + [len(r["program"]) for r in rows])
    out = ["  ".join(c.ljust(widths[c]) for c in BENCH_COLUMNS)]
    for r in rows:
        if "error" in r:
            out.append(f"{r['program'].ljust(widths['program'])}  FAILED: {r['error']}")
            continue
        cells = []
        for c in BENCH_COLUMNS:
            v = r[c]
            v = f"{v:.2f}" if isinstance(v, float) else str(v)
            cells.append(v.ljust(widths[c]))
        out.append("  ".join(cells))
    return "\n".join(out)


def cmd_bench(args):
    programs = load_corpus(args.corpus)
    seed = _seed(args)

    def cfg_factory(opts):
        args_q = args.quantum if args.quantum is not None else opts.get("quantum", 64)
        cfg = _config(args, seed, args_q)
        for k, v in opts.items():
            if k != "quantum":
                setattr(cfg, k, v)
        return cfg

    rows = bench_rows(programs, cfg_factory)
    print(format_rows(rows))
    return 0 if all("error" not in r for r in rows) else 1


def cmd_dump_syscalls(_args):
    print(dump_table())
    return 0


def cmd_dump_procmap(args):
    engine = Engine(load_binary(args.binary), Host(), _config(args))
    lay = engine.layout
    print(f"region_a {lay.region_a[0]:#x}-{lay.region_a[1]:#x}")
    print(f"cache    {lay.cache[0]:#x}-{lay.cache[1]:#x}")
    print(f"stash    {lay.stash[0]:#x}-{lay.stash[1]:#x}")
    print(f"pool     {lay.pool[0]:#x}-{lay.pool[1]:#x}")
    for orig, actual, size in engine.relocations:
        print(f"relocated {orig:#x} -> {actual:#x} ({size} bytes)")
    print(engine.mv.dump())
    return 0


COMMANDS = {
    "assemble": cmd_assemble, "disasm": cmd_disasm, "run": cmd_run,
    "run-oracle": cmd_run_oracle, "diff": cmd_diff, "bench": cmd_bench,
    "dump-syscalls": cmd_dump_syscalls, "dump-procmap": cmd_dump_procmap,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    try:
        return COMMANDS[args.cmd](args)
    except (RatelError, OSError, ValueError) as e:
        sys.stderr.write(f"ratel: {type(e).__name__}: {e}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
