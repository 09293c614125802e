"""puddlectl: operator CLI, benchmark harness, and crash-test driver."""

import argparse
import os
import random
import struct
import sys
import tempfile
import threading
from pathlib import Path

from . import wire
from .client import ClientRuntime
from .core import PuddleId, read_header
from .daemon import SocketTransport, serve
from .errors import PuddleError
from .harness import EmbeddedRig, RecoveredBox
from .logs import Log, LogView
from .pmem import PersistentDomain
from .report import (
    BENCH_HEADER,
    bench_row,
    linear_fit,
    render_bench_figure,
    render_scaling_figure,
    write_csv,
)
from .workloads import (
    BenchSpec,
    run_aggregate,
    run_btree,
    run_kvstore,
    run_linkedlist,
    run_parallel_array,
)


def _socket_from(args):
    return args.socket or os.environ.get("PUDDLED_SOCKET")


def _data_dir_from(args):
    return args.data_dir or os.environ.get("PUDDLED_DIR")


def _runtime(args):
    """Connect to a live daemon or embed one over --data-dir."""
    sock = _socket_from(args)
    if sock:
        return ClientRuntime(SocketTransport(sock)), None
    data_dir = _data_dir_from(args)
    if not data_dir:
        raise SystemExit("need --socket (or PUDDLED_SOCKET) "
                         "or --data-dir (or PUDDLED_DIR)")
    box = RecoveredBox(Path(data_dir))
    return box.runtime, box


def cmd_daemon(args):
    sock = _socket_from(args) or "puddled.sock"
    data_dir = _data_dir_from(args) or "puddled-data"
    stop = threading.Event()
    print(f"puddled: serving {data_dir} on {sock}", flush=True)
    try:
        serve(sock, data_dir, trust_ids=args.trust_ids,
              cap_backend=args.cap_backend, stop_event=None)
    except KeyboardInterrupt:
        stop.set()
    return 0


def cmd_status(args):
    rt, box = _runtime(args)
    st = rt.status()
    print(f"puddles:    {st['puddles']}")
    print(f"pools:      {len(st['pools'])}")
    for h, p in st["pools"].items():
        print(f"  {p['name']}  id={h[:8]}  members={p['members']}")
    print(f"log spaces: {len(st['logspaces'])}")
    print(f"frontier:   {len(st['frontier'])}")
    print(f"quarantine: {len(st['quarantine'])}")
    for q in st["quarantine"]:
        print(f"  log {q['log'][:8] if q['log'] else '?'}: {q['reason']} "
              f"(pools {', '.join(p[:8] for p in q['pools']) or 'none'})")
    if st["last_recovery"]:
        r = st["last_recovery"]
        print(f"last recovery: {len(r['replayed'])} logs replayed, "
              f"{r['applied_entries']} entries, "
              f"{len(r['quarantined'])} quarantined")
    if box:
        box.close()
    return 0


def _bench_specs(args):
    if args.workload == "kvstore-ycsb":
        letters = list("abcdef") if args.ycsb == "all" else [args.ycsb]
        return [BenchSpec("kvstore-ycsb", ops=args.ops, keys=args.keys,
                          threads=args.threads, seed=args.seed,
                          crash_every=args.crash_every, ycsb=x)
                for x in letters]
    return [BenchSpec(args.workload, ops=args.ops, keys=args.keys,
                      threads=args.threads, seed=args.seed,
                      crash_every=args.crash_every)]


_RUNNERS = {
    "linkedlist": run_linkedlist,
    "btree": run_btree,
    "kvstore-ycsb": run_kvstore,
    "parallel-array": run_parallel_array,
}


def cmd_bench(args):
    out = Path(args.out)
    results = []
    rows = []
    with tempfile.TemporaryDirectory(prefix="puddlectl-bench-") as tmp:
        for i, spec in enumerate(_bench_specs(args)):
            runner = _RUNNERS[spec.workload]
            res = runner(spec, Path(tmp) / f"run{i}")
            results.append(res)
            rows.append(bench_row(res, spec))
            status = "ok" if res.validated else "VALIDATION MISMATCH"
            print(f"{res.workload}: {res.ops} ops in {res.elapsed:.2f}s "
                  f"({res.throughput:.0f} ops/s), p99 "
                  f"{res.percentile(99) * 1e6:.0f}us, "
                  f"{res.recovery_events} recoveries [{status}]")
    write_csv(out, BENCH_HEADER, rows)
    print(f"report: {out}")
    if not args.no_plot:
        fig = render_bench_figure(out, results)
        print(f"figure: {fig}")
    return 0 if all(r.validated for r in results) else 1


def cmd_crash_sweep(args):
    out = Path(args.out)
    rows = []
    violations = 0
    with tempfile.TemporaryDirectory(prefix="puddlectl-sweep-") as tmp:
        tmp = Path(tmp)
        if args.scenario == "tx-hybrid":
            rows, violations = _sweep_tx_hybrid(tmp, args.seed)
        elif args.scenario == "alloc":
            rows, violations = _sweep_alloc(tmp, args.seed)
        else:  # kvstore
            spec = BenchSpec("kvstore-ycsb", ops=args.ops, keys=args.keys,
                             seed=args.seed,
                             crash_every=args.crash_every or 1000,
                             ycsb=args.ycsb if args.ycsb != "all" else "a")
            res = run_kvstore(spec, tmp / "kv")
            rows = [["kvstore", res.ops, res.recovery_events,
                     int(res.validated)]]
            violations = 0 if res.validated else 1
            write_csv(out, ["scenario", "ops", "recoveries", "validated"], rows)
            print(f"kvstore sweep: {res.recovery_events} recoveries, "
                  f"validated={res.validated}")
            return 0 if res.validated else 1
    write_csv(out, ["scenario", "crash_event", "outcome"], rows)
    print(f"{args.scenario}: {len(rows)} crash points, "
          f"{violations} violations -> {out}")
    return 0 if violations == 0 else 1


def _sweep_tx_hybrid(tmp, seed):
    rig = EmbeddedRig(tmp / "rig")
    rt = rig.runtime
    pool = rt.create_pool("sweep")
    with rt.transaction():
        base = pool.malloc(32, "cells")
        pool.set_root(base)
    with rt.transaction():
        rt.tx_add(base, 8)
        rt.store_u64(base, 1)
        rt.tx_add(base + 8, 8)
        rt.store_u64(base + 8, 2)
    k0 = rig.now
    with rt.transaction():
        rt.tx_add(base, 8)
        rt.store_u64(base, 11)
        rt.tx_add(base + 8, 8)
        rt.store_u64(base + 8, 22)
        rt.tx_redo_set(base + 16, struct.pack("<Q", 33))
        rt.tx_redo_set(base + 24, struct.pack("<Q", 44))
    k1 = rig.now
    pre, post = (1, 2, 0, 0), (11, 22, 33, 44)
    rows = []
    violations = 0
    for k in range(k0, k1 + 1):
        box = RecoveredBox(rig.crash_dir(k))
        p = box.runtime.open_pool("sweep")
        root = p.get_root()
        vals = tuple(box.runtime.load_u64(root + 8 * i) for i in range(4))
        outcome = "pre" if vals == pre else "post" if vals == post else "MIXED"
        if outcome == "MIXED":
            violations += 1
        rows.append(["tx-hybrid", k, outcome])
        box.close(delete=True)
    rig.close()
    return rows, violations


def _sweep_alloc(tmp, seed):
    rig = EmbeddedRig(tmp / "rig")
    rt = rig.runtime
    pool = rt.create_pool("sweep")
    with rt.transaction():
        keep = pool.malloc(64, "obj")
        pool.set_root(keep)
    k0 = rig.now
    with rt.transaction():
        a = pool.malloc(512, "obj")
        rt.store_u64(keep, a)
        rt.tx_add(keep + 8, 8)
        rt.store_u64(keep + 8, 1)
        pool.free(a)
    k1 = rig.now
    rows = []
    violations = 0
    for k in range(k0, k1 + 1):
        box = RecoveredBox(rig.crash_dir(k))
        p = box.runtime.open_pool("sweep")
        m = box.runtime.map_puddle(p.root_hex)
        heap = box.runtime.heap_of(m)
        try:
            heap.check_conservation()
            descs = {d.addr for d in heap.iterate_objects()}
            flag = box.runtime.load_u64(p.get_root() + 8)
            ok = (flag in (0, 1)) and (p.get_root() in descs)
            outcome = "pre" if flag == 0 else "post"
        except PuddleError as e:
            ok = False
            outcome = f"BROKEN:{e}"
        if not ok:
            violations += 1
        rows.append(["alloc", k, outcome])
        box.close(delete=True)
    rig.close()
    return rows, violations


def cmd_aggregate(args):
    out = Path(args.out)
    with tempfile.TemporaryDirectory(prefix="puddlectl-agg-") as tmp:
        rows = run_aggregate(args.nodes, args.vars, Path(tmp), seed=args.seed)
    ok = all(r.validated for r in rows)
    csv_rows = [[r.node, r.n_vars, f"{r.import_s:.6f}", f"{r.map_walk_s:.6f}",
                 f"{r.rewrite_s:.6f}", r.rewritten_slots, int(r.validated)]
                for r in rows]
    write_csv(out, ["node", "n_vars", "import_s", "walk_s", "rewrite_s",
                    "rewritten_slots", "validated"], csv_rows)
    total_import = sum(r.import_s for r in rows)
    total_rewrite = sum(r.rewrite_s for r in rows)
    print(f"aggregated {args.nodes} nodes x {args.vars} vars: "
          f"import {total_import:.3f}s (constant per bundle), "
          f"rewrite {total_rewrite:.3f}s (scales with vars), "
          f"validated={ok}")
    print(f"report: {out}")
    if not args.no_plot:
        xs = list(range(len(rows)))
        ys = [r.import_s + r.rewrite_s for r in rows]
        fig = render_scaling_figure(out, xs, ys, "node", "seconds",
                                    "per-node aggregation cost")
        print(f"figure: {fig}")
    return 0 if ok else 1


def cmd_log_dump(args):
    data_dir = Path(_data_dir_from(args))
    path = data_dir / f"{args.uuid}.pud"
    if not path.exists():
        raise SystemExit(f"no such puddle file: {path}")
    capacity = path.stat().st_size
    dom = PersistentDomain(path, capacity, readonly=True)
    hdr = read_header(dom)
    view = LogView(dom, hdr.header_size, hdr.heap_size)

    def resolver(pid: PuddleId):
        p = data_dir / f"{pid.hex}.pud"
        d = PersistentDomain(p, p.stat().st_size, readonly=True)
        h = read_header(d)
        return LogView(d, h.header_size, h.heap_size)

    log = Log(view, resolver)
    lo, hi = view.seq_range
    print(f"log {args.uuid[:8]}: seq_range=({lo}, {hi}) "
          f"next_free={view.next_free} last_entry={view.last_entry}")
    print(f"{'member':>6} {'offset':>8} {'seq':>4} {'order':>8} "
          f"{'vol':>3} {'size':>6} {'target':>18} {'crc':>4} {'valid':>5}")
    for e in log.entries():
        from .logs import entry_valid
        print(f"{e.member:>6} {e.offset:>8} {e.seq:>4} "
              f"{'backward' if e.backward else 'forward':>8} "
              f"{'y' if e.volatile_target else 'n':>3} {e.data_size:>6} "
              f"0x{e.target_addr:016x} {'ok' if e.checksum_ok else 'BAD':>4} "
              f"{'y' if entry_valid(e, (lo, hi)) else 'n':>5}")
    dom.close()
    return 0


def cmd_heap_walk(args):
    rt, box = _runtime(args)
    pool = rt.open_pool(args.pool)
    rows = [[f"0x{d.addr:x}", d.size, f"0x{d.type_id:016x}"]
            for d in pool.iterate_objects()]
    if args.out:
        write_csv(args.out, ["addr", "size", "type_id"], rows)
        print(f"{len(rows)} objects -> {args.out}")
    else:
        print("addr,size,type_id")
        for r in rows:
            print(",".join(map(str, r)))
    if box:
        box.close()
    return 0


def cmd_pool_export(args):
    rt, box = _runtime(args)
    info = rt.export_pool(args.pool, args.out)
    print(f"exported {info['puddles']} puddles ({info['bytes']} bytes) "
          f"-> {info['path']}")
    if box:
        box.close()
    return 0


def cmd_pool_import(args):
    rt, box = _runtime(args)
    pool = rt.import_bundle(args.path)
    print(f"imported pool {pool.name!r} id={pool.pool_id[:8]} "
          f"({len(pool.members)} puddles)")
    if box:
        box.close()
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="puddlectl",
                                description="puddlekit operator tool")
    p.add_argument("--socket", help="daemon socket (or env PUDDLED_SOCKET)")
    p.add_argument("--data-dir", help="daemon data dir (or env PUDDLED_DIR)")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("daemon", help="run the puddle daemon")
    d.add_argument("--trust-ids", action="store_true",
                   help="allow clients to declare uid/gid (testing)")
    d.add_argument("--cap-backend", choices=["fd", "path"], default="fd")
    d.set_defaults(fn=cmd_daemon)

    s = sub.add_parser("status", help="daemon registries and recovery state")
    s.set_defaults(fn=cmd_status)

    b = sub.add_parser("bench", help="run a workload with oracle validation")
    b.add_argument("workload", choices=["linkedlist", "btree", "kvstore-ycsb",
                                        "parallel-array"])
    b.add_argument("--ops", type=int, default=10000)
    b.add_argument("--keys", type=int, default=10000)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=42)
    b.add_argument("--crash-every", type=int, default=None)
    b.add_argument("--ycsb", default="a", choices=list("abcdef") + ["all"])
    b.add_argument("--out", default="report.csv")
    b.add_argument("--no-plot", action="store_true")
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("crash-sweep", help="inject crashes and verify recovery")
    c.add_argument("--scenario", choices=["tx-hybrid", "alloc", "kvstore"],
                   default="tx-hybrid")
    c.add_argument("--ops", type=int, default=5000)
    c.add_argument("--keys", type=int, default=2000)
    c.add_argument("--seed", type=int, default=42)
    c.add_argument("--crash-every", type=int, default=None)
    c.add_argument("--ycsb", default="a")
    c.add_argument("--out", default="sweep.csv")
    c.set_defaults(fn=cmd_crash_sweep)

    a = sub.add_parser("aggregate", help="sensor-node data aggregation demo")
    a.add_argument("--nodes", type=int, default=10)
    a.add_argument("--vars", type=int, default=100)
    a.add_argument("--seed", type=int, default=42)
    a.add_argument("--out", default="aggregate.csv")
    a.add_argument("--no-plot", action="store_true")
    a.set_defaults(fn=cmd_aggregate)

    lg = sub.add_parser("log", help="log debugging")
    lg_sub = lg.add_subparsers(dest="log_cmd", required=True)
    ld = lg_sub.add_parser("dump", help="render a log puddle's entries")
    ld.add_argument("uuid")
    ld.set_defaults(fn=cmd_log_dump)

    hp = sub.add_parser("heap", help="allocator introspection")
    hp_sub = hp.add_subparsers(dest="heap_cmd", required=True)
    hw = hp_sub.add_parser("walk", help="dump object descriptors as CSV")
    hw.add_argument("pool")
    hw.add_argument("--out")
    hw.set_defaults(fn=cmd_heap_walk)

    pl = sub.add_parser("pool", help="pool export/import")
    pl_sub = pl.add_subparsers(dest="pool_cmd", required=True)
    pe = pl_sub.add_parser("export")
    pe.add_argument("pool")
    pe.add_argument("--out", required=True)
    pe.set_defaults(fn=cmd_pool_export)
    pi = pl_sub.add_parser("import")
    pi.add_argument("path")
    pi.set_defaults(fn=cmd_pool_import)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PuddleError as e:
        print(f"error: {e.__class__.__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
