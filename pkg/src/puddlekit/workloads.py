"""Benchmark workloads: persistent structures validated against shadow oracles.

Every workload is a correctness test first and a timer second: each op
stream is mirrored into a volatile Python structure, and the persistent
result must match it exactly, with or without power-cycle injection at op
boundaries.
"""

import cmath
import math
import multiprocessing as mp
import random
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .alloc import type_id
from .client import ClientRuntime
from .harness import EmbeddedRig, power_cycle
from .ycsb import YcsbStream, fnv64

# ---------------------------------------------------------------- linked list

LIST_HEAD = "list_head"   # {first u64, last u64, count u64}
LIST_NODE = "list_node"   # {value u64, prev u64, next u64}


def register_list_types(rt):
    rt.register_type(LIST_HEAD, slots=[(0, LIST_NODE), (8, LIST_NODE)])
    rt.register_type(LIST_NODE, slots=[(8, LIST_NODE), (16, LIST_NODE)])


class PersistentList:
    """Tail-insert / tail-delete / sum list; links kept in both directions
    so tail deletion stays O(1)."""

    def __init__(self, rt, pool):
        self.rt = rt
        self.pool = pool
        self.head = pool.get_root()

    @classmethod
    def create(cls, rt, pool):
        register_list_types(rt)
        with rt.transaction():
            h = pool.malloc(24, LIST_HEAD)
            pool.set_root(h)
        return cls(rt, pool)

    @classmethod
    def attach(cls, rt, pool):
        register_list_types(rt)
        return cls(rt, pool)

    def insert_tail(self, value: int):
        rt = self.rt
        with rt.transaction():
            node = self.pool.malloc(24, LIST_NODE)
            tail = rt.load_u64(self.head + 8)
            rt.store_u64(node, value)
            rt.store_u64(node + 8, tail)
            rt.tx_add(self.head, 24)
            if tail:
                rt.tx_add(tail + 16, 8)
                rt.store_u64(tail + 16, node)
            else:
                rt.store_u64(self.head, node)
            rt.store_u64(self.head + 8, node)
            rt.store_u64(self.head + 16, rt.load_u64(self.head + 16) + 1)

    def delete_tail(self) -> bool:
        rt = self.rt
        tail = rt.load_u64(self.head + 8)
        if not tail:
            return False
        with rt.transaction():
            prev = rt.load_u64(tail + 8)
            rt.tx_add(self.head, 24)
            if prev:
                rt.tx_add(prev + 16, 8)
                rt.store_u64(prev + 16, 0)
            else:
                rt.store_u64(self.head, 0)
            rt.store_u64(self.head + 8, prev)
            rt.store_u64(self.head + 16, rt.load_u64(self.head + 16) - 1)
            self.pool.free(tail)
        return True

    def sum(self) -> int:
        rt = self.rt
        total = 0
        node = rt.load_u64(self.head)
        while node:
            total += rt.load_u64(node)
            node = rt.load_u64(node + 16)
        return total

    def values(self):
        rt = self.rt
        out = []
        node = rt.load_u64(self.head)
        while node:
            out.append(rt.load_u64(node))
            node = rt.load_u64(node + 16)
        return out


# ------------------------------------------------------------------- B-tree

BT_NODE = "btree_node"
BT_HEAD = "btree_head"
MAX_KEYS = 7      # order 8: up to 8 children
NODE_SIZE = 192
_NODE = struct.Struct("<QQ7Q7Q8Q")
KIDS_OFF = 128


def register_btree_types(rt):
    rt.register_type(BT_HEAD, slots=[(0, BT_NODE)])
    rt.register_type(BT_NODE, slots=[(KIDS_OFF + 8 * i, BT_NODE)
                                     for i in range(8)])


class BTree:
    """Order-8 B-tree, 8-byte keys and values, preemptive splits."""

    def __init__(self, rt, pool):
        self.rt = rt
        self.pool = pool
        self.header = pool.get_root()

    @classmethod
    def create(cls, rt, pool):
        register_btree_types(rt)
        with rt.transaction():
            h = pool.malloc(16, BT_HEAD)
            root = pool.malloc(NODE_SIZE, BT_NODE)
            cls._write_node(rt, root, 0, 1, [], [], [])
            rt.tx_add(h, 16)
            rt.store_u64(h, root)
            pool.set_root(h)
        return cls(rt, pool)

    @classmethod
    def attach(cls, rt, pool):
        register_btree_types(rt)
        return cls(rt, pool)

    # node IO: whole-node reads and writes keep the log entry count small

    def _read(self, addr):
        v = _NODE.unpack(self.rt.load(addr, NODE_SIZE))
        n = v[0]
        return n, v[1], list(v[2:2 + n]), list(v[9:9 + n]), list(v[16:17 + n])

    @staticmethod
    def _write_node(rt, addr, n, leaf, keys, vals, kids):
        keys = keys + [0] * (7 - len(keys))
        vals = vals + [0] * (7 - len(vals))
        kids = kids + [0] * (8 - len(kids))
        rt.store(addr, _NODE.pack(n, leaf, *keys, *vals, *kids))

    def _root(self):
        return self.rt.load_u64(self.header)

    def insert(self, key: int, value: int):
        rt = self.rt
        with rt.transaction():
            root = self._root()
            n, leaf, keys, vals, kids = self._read(root)
            if n == MAX_KEYS:
                new_root = self.pool.malloc(NODE_SIZE, BT_NODE)
                self._write_node(rt, new_root, 0, 0, [], [], [root])
                rt.tx_add(self.header, 8)
                rt.store_u64(self.header, new_root)
                self._split_child(new_root, 0)
                root = new_root
            self._insert_nonfull(root, key, value)

    def _split_child(self, parent, idx):
        rt = self.rt
        pn, pleaf, pkeys, pvals, pkids = self._read(parent)
        child = pkids[idx]
        cn, cleaf, ckeys, cvals, ckids = self._read(child)
        mid = 3
        right = self.pool.malloc(NODE_SIZE, BT_NODE)
        self._write_node(rt, right, cn - mid - 1, cleaf,
                         ckeys[mid + 1:], cvals[mid + 1:],
                         ckids[mid + 1:] if not cleaf else [])
        rt.tx_add(child, NODE_SIZE)
        self._write_node(rt, child, mid, cleaf, ckeys[:mid], cvals[:mid],
                         ckids[:mid + 1] if not cleaf else [])
        pkeys.insert(idx, ckeys[mid])
        pvals.insert(idx, cvals[mid])
        pkids.insert(idx + 1, right)
        rt.tx_add(parent, NODE_SIZE)
        self._write_node(rt, parent, pn + 1, pleaf, pkeys, pvals, pkids)

    def _insert_nonfull(self, addr, key, value):
        rt = self.rt
        while True:
            n, leaf, keys, vals, kids = self._read(addr)
            if key in keys:
                i = keys.index(key)
                rt.tx_add(addr, NODE_SIZE)
                vals[i] = value
                self._write_node(rt, addr, n, leaf, keys, vals, kids)
                return
            if leaf:
                i = 0
                while i < n and keys[i] < key:
                    i += 1
                keys.insert(i, key)
                vals.insert(i, value)
                rt.tx_add(addr, NODE_SIZE)
                self._write_node(rt, addr, n + 1, leaf, keys, vals, kids)
                return
            i = 0
            while i < n and keys[i] < key:
                i += 1
            child = kids[i]
            cn, _, _, _, _ = self._read(child)
            if cn == MAX_KEYS:
                self._split_child(addr, i)
                n, leaf, keys, vals, kids = self._read(addr)
                if key in keys:
                    continue
                if keys[i] < key:
                    i += 1
                child = kids[i]
            addr = child

    def search(self, key: int) -> Optional[int]:
        addr = self._root()
        while True:
            n, leaf, keys, vals, kids = self._read(addr)
            i = 0
            while i < n and keys[i] < key:
                i += 1
            if i < n and keys[i] == key:
                return vals[i]
            if leaf:
                return None
            addr = kids[i]

    def items_all(self):
        out = []

        def rec(addr):
            n, leaf, keys, vals, kids = self._read(addr)
            if leaf:
                out.extend(zip(keys, vals))
                return
            for i in range(n):
                rec(kids[i])
                out.append((keys[i], vals[i]))
            rec(kids[n])

        rec(self._root())
        return out

    def scan(self, start_key: int, count: int):
        got = []
        self._scan_rec(self._root(), start_key, count, got)
        return got

    def _scan_rec(self, addr, start_key, count, got):
        n, leaf, keys, vals, kids = self._read(addr)
        if leaf:
            for j in range(n):
                if keys[j] >= start_key and len(got) < count:
                    got.append((keys[j], vals[j]))
            return len(got) < count
        for i in range(n + 1):
            if i < n and keys[i] < start_key:
                continue
            if not self._scan_rec(kids[i], start_key, count, got):
                return False
            if i < n and len(got) < count:
                got.append((keys[i], vals[i]))
            elif i < n:
                return False
        return len(got) < count


# ------------------------------------------------------------- KV store (YCSB)


class KVStore:
    """String-keyed store over the persistent B-tree (scan-friendly)."""

    def __init__(self, rt, pool, tree):
        self.rt = rt
        self.pool = pool
        self.tree = tree

    @classmethod
    def create(cls, rt, pool):
        return cls(rt, pool, BTree.create(rt, pool))

    @classmethod
    def attach(cls, rt, pool):
        return cls(rt, pool, BTree.attach(rt, pool))

    @staticmethod
    def key_of(idx: int) -> int:
        return fnv64(idx)

    def put(self, idx: int, value: int):
        self.tree.insert(self.key_of(idx), value)

    def get(self, idx: int) -> Optional[int]:
        return self.tree.search(self.key_of(idx))

    def scan_from(self, idx: int, count: int):
        return self.tree.scan(self.key_of(idx), count)


# ---------------------------------------------------------------- bench runner


@dataclass
class BenchSpec:
    workload: str
    ops: int = 10_000
    keys: int = 10_000
    threads: int = 1
    seed: int = 42
    crash_every: Optional[int] = None
    ycsb: str = "a"
    data_dir: Optional[str] = None


@dataclass
class BenchResult:
    workload: str
    ops: int
    elapsed: float
    validated: bool
    recovery_events: int = 0
    latencies: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.ops / self.elapsed if self.elapsed else 0.0

    def percentile(self, p: float) -> float:
        if not self.latencies:
            return 0.0
        xs = sorted(self.latencies)
        return xs[min(len(xs) - 1, int(p / 100 * len(xs)))]


def _maybe_power_cycle(rig, spec, i, state):
    if spec.crash_every and (i + 1) % spec.crash_every == 0:
        rig = power_cycle(rig)
        state["recoveries"] += 1
    return rig


def run_linkedlist(spec: BenchSpec, root_dir) -> BenchResult:
    rig = EmbeddedRig(root_dir, record_trace=False)
    rng = random.Random(spec.seed)
    pool = rig.runtime.create_pool("bench-list")
    plist = PersistentList.create(rig.runtime, pool)
    oracle = []
    state = {"recoveries": 0}
    lat = []
    t_start = time.perf_counter()
    for i in range(spec.ops):
        t0 = time.perf_counter()
        r = rng.random()
        if r < 0.45:
            v = rng.getrandbits(40)
            plist.insert_tail(v)
            oracle.append(v)
        elif r < 0.9:
            if plist.delete_tail():
                oracle.pop()
        else:
            if plist.sum() != sum(oracle):
                raise AssertionError(f"sum mismatch at op {i}")
        lat.append(time.perf_counter() - t0)
        before = state["recoveries"]
        rig = _maybe_power_cycle(rig, spec, i, state)
        if state["recoveries"] != before:
            pool = rig.runtime.open_pool("bench-list")
            plist = PersistentList.attach(rig.runtime, pool)
    elapsed = time.perf_counter() - t_start
    ok = plist.values() == oracle and plist.sum() == sum(oracle)
    rig.close()
    return BenchResult("linkedlist", spec.ops, elapsed, ok,
                       state["recoveries"], lat)


def run_btree(spec: BenchSpec, root_dir) -> BenchResult:
    rig = EmbeddedRig(root_dir, record_trace=False)
    rng = random.Random(spec.seed)
    pool = rig.runtime.create_pool("bench-btree")
    tree = BTree.create(rig.runtime, pool)
    oracle = {}
    state = {"recoveries": 0}
    lat = []
    t_start = time.perf_counter()
    for i in range(spec.keys):
        t0 = time.perf_counter()
        k = rng.getrandbits(48)
        v = rng.getrandbits(48)
        tree.insert(k, v)
        oracle[k] = v
        lat.append(time.perf_counter() - t0)
        before = state["recoveries"]
        rig = _maybe_power_cycle(rig, spec, i, state)
        if state["recoveries"] != before:
            pool = rig.runtime.open_pool("bench-btree")
            tree = BTree.attach(rig.runtime, pool)
    elapsed = time.perf_counter() - t_start
    ok = True
    sample = rng.sample(list(oracle), min(len(oracle), 2000))
    for k in sample:
        if tree.search(k) != oracle[k]:
            ok = False
            break
    if ok:
        items = tree.items_all()
        ok = (items == sorted(oracle.items())
              and all(tree.search(k) is not None for k in sample))
    rig.close()
    return BenchResult("btree", spec.keys, elapsed, ok, state["recoveries"], lat)


class _KvOracle:
    """Volatile mirror keyed by hashed key, with a sorted view for scans."""

    def __init__(self):
        self.data = {}
        self.sorted_keys = []

    def put(self, hkey, value):
        if hkey not in self.data:
            from bisect import insort
            insort(self.sorted_keys, hkey)
        self.data[hkey] = value

    def get(self, hkey):
        return self.data.get(hkey)

    def scan(self, start_hkey, count):
        from bisect import bisect_left
        i = bisect_left(self.sorted_keys, start_hkey)
        return [(k, self.data[k]) for k in self.sorted_keys[i:i + count]]


def run_kvstore(spec: BenchSpec, root_dir) -> BenchResult:
    rig = EmbeddedRig(root_dir, record_trace=False)
    rng = random.Random(spec.seed)
    pool = rig.runtime.create_pool("bench-kv")
    kv = KVStore.create(rig.runtime, pool)
    oracle = _KvOracle()
    state = {"recoveries": 0}
    lat = []
    t_start = time.perf_counter()
    for i in range(spec.keys):
        v = rng.getrandbits(48)
        kv.put(i, v)
        oracle.put(KVStore.key_of(i), v)
        before = state["recoveries"]
        rig = _maybe_power_cycle(rig, spec, i, state)
        if state["recoveries"] != before:
            pool = rig.runtime.open_pool("bench-kv")
            kv = KVStore.attach(rig.runtime, pool)
    stream = YcsbStream(spec.ycsb, spec.keys, rng)
    mismatches = 0
    for i in range(spec.ops):
        t0 = time.perf_counter()
        op, idx, extra = stream.next_op()
        hkey = KVStore.key_of(idx)
        if op == "read":
            if kv.get(idx) != oracle.get(hkey):
                mismatches += 1
        elif op in ("update", "rmw"):
            if op == "rmw" and kv.get(idx) != oracle.get(hkey):
                mismatches += 1
            kv.put(idx, extra)
            oracle.put(hkey, extra)
        elif op == "insert":
            kv.put(idx, extra)
            oracle.put(hkey, extra)
        else:  # scan
            if kv.scan_from(idx, extra) != oracle.scan(hkey, extra):
                mismatches += 1
        lat.append(time.perf_counter() - t0)
        before = state["recoveries"]
        rig = _maybe_power_cycle(rig, spec, i, state)
        if state["recoveries"] != before:
            pool = rig.runtime.open_pool("bench-kv")
            kv = KVStore.attach(rig.runtime, pool)
    elapsed = time.perf_counter() - t_start
    ok = mismatches == 0
    if ok:
        final = dict(kv.tree.items_all())
        ok = final == oracle.data
    rig.close()
    return BenchResult(f"kvstore-ycsb-{spec.ycsb}", spec.keys + spec.ops,
                       elapsed, ok, state["recoveries"], lat,
                       extra={"mismatches": mismatches})


# ------------------------------------------------------------ parallel array

EULER_STEP = abs(cmath.exp(1j * math.pi) + 1) + 1.0  # per-element float step
ARRAY_CHUNK = 64


def _array_worker(sock_path, idx, n_elems, seed, ready_q, go_evt, done_q):
    from .daemon import SocketTransport

    rt = ClientRuntime(SocketTransport(sock_path))
    rt.register_type("f64_block", slots=[])
    pool = rt.create_pool(f"parr-{idx}")
    with rt.transaction():
        block = pool.malloc(n_elems * 8, "f64_block")
        pool.set_root(block)
    ready_q.put(idx)
    go_evt.wait()
    t0 = time.perf_counter()
    for c0 in range(0, n_elems, ARRAY_CHUNK):
        n = min(ARRAY_CHUNK, n_elems - c0)
        addr = block + c0 * 8
        with rt.transaction():
            rt.tx_add(addr, n * 8)
            vals = list(struct.unpack(f"<{n}d", rt.load(addr, n * 8)))
            for j in range(n):
                # Euler's identity per element: x += |e^{i*pi} + 1| + 1
                vals[j] += abs(cmath.exp(1j * math.pi) + 1) + 1.0
            rt.store(addr, struct.pack(f"<{n}d", *vals))
    elapsed = time.perf_counter() - t0
    got = struct.unpack(f"<{n_elems}d", rt.load(block, n_elems * 8))
    ok = all(abs(x - EULER_STEP) < 1e-12 for x in got)
    done_q.put((idx, elapsed, ok))
    rt.close()


def run_parallel_array(spec: BenchSpec, root_dir) -> BenchResult:
    """Each worker process owns 1/n of the array and burns through it in
    per-chunk transactions; throughput should not degrade as workers grow."""
    import threading

    from .daemon import serve

    root_dir = Path(root_dir)
    sock = root_dir / "puddled.sock"
    stop, ready = threading.Event(), threading.Event()
    t = threading.Thread(target=serve, args=(sock, root_dir / "data"),
                         kwargs=dict(cap_backend="fd", ready_event=ready,
                                     stop_event=stop), daemon=True)
    t.start()
    ready.wait(10)

    per = spec.ops // spec.threads
    ctx = mp.get_context("fork")
    ready_q, done_q = ctx.Queue(), ctx.Queue()
    go = ctx.Event()
    procs = [ctx.Process(target=_array_worker,
                         args=(str(sock), i, per, spec.seed + i, ready_q, go,
                               done_q))
             for i in range(spec.threads)]
    for p in procs:
        p.start()
    for _ in procs:
        ready_q.get(timeout=120)
    t_start = time.perf_counter()
    go.set()
    results = [done_q.get(timeout=600) for _ in procs]
    elapsed = time.perf_counter() - t_start
    for p in procs:
        p.join(30)
    stop.set()
    t.join(10)
    ok = all(r[2] for r in results)
    return BenchResult("parallel-array", per * spec.threads, elapsed, ok,
                       extra={"threads": spec.threads,
                              "worker_elapsed": [r[1] for r in results]})


# ----------------------------------------------------------- data aggregation

SENSOR_HEAD = "sensor_head"   # {first u64, count u64}
SENSOR_VAR = "sensor_var"     # {var_id u64, reading u64 (f64 bits), next u64}


def register_sensor_types(rt):
    rt.register_type(SENSOR_HEAD, slots=[(0, SENSOR_VAR)])
    rt.register_type(SENSOR_VAR, slots=[(16, SENSOR_VAR)])


def build_sensor_pool(rt, name, node_id, n_vars, rng):
    """A pool holding one sensor node's state variables (linked)."""
    register_sensor_types(rt)
    pool = rt.create_pool(name)
    readings = {}
    with rt.transaction():
        head = pool.malloc(16, SENSOR_HEAD)
        pool.set_root(head)
    batch = 128
    i = 0
    while i < n_vars:
        with rt.transaction():
            for _ in range(min(batch, n_vars - i)):
                v = pool.malloc(24, SENSOR_VAR)
                reading = rng.random() * 100.0
                rt.store_u64(v, i)
                rt.store(v + 8, struct.pack("<d", reading))
                first = rt.load_u64(head)
                rt.store_u64(v + 16, first)
                rt.tx_add(head, 16)
                rt.store_u64(head, v)
                rt.store_u64(head + 8, rt.load_u64(head + 8) + 1)
                readings[i] = reading
                i += 1
    return pool, readings


def read_sensor_pool(rt, pool):
    head = pool.get_root()
    out = {}
    v = rt.load_u64(head)
    while v:
        var_id = rt.load_u64(v)
        (reading,) = struct.unpack("<d", rt.load(v + 8, 8))
        out[var_id] = reading
        v = rt.load_u64(v + 16)
    return out


@dataclass
class AggregateRow:
    node: int
    n_vars: int
    import_s: float
    map_walk_s: float
    rewrite_s: float
    rewritten_slots: int
    validated: bool


def run_aggregate(n_nodes: int, n_vars: int, root_dir, seed: int = 42):
    """Independent sensor nodes export their pools; the home node imports
    every copy and walks the merged state, validating against the union."""
    root_dir = Path(root_dir)
    rng = random.Random(seed)
    oracle = {}
    bundles = []
    for i in range(n_nodes):
        rig = EmbeddedRig(root_dir / f"node{i}", record_trace=False)
        pool, readings = build_sensor_pool(rig.runtime, "sensor", i, n_vars, rng)
        oracle[i] = readings
        out = root_dir / f"node{i}.pexp"
        rig.runtime.export_pool(pool, out)
        bundles.append(out)
        rig.close()

    home = EmbeddedRig(root_dir / "home", record_trace=False)
    rt = home.runtime
    register_sensor_types(rt)
    rows = []
    for i, bundle in enumerate(bundles):
        t0 = time.perf_counter()
        pool = rt.import_bundle(bundle)
        t_import = time.perf_counter() - t0
        rw0, slots0 = rt.rewrite_seconds, rt.rewritten_slots
        t1 = time.perf_counter()
        got = read_sensor_pool(rt, pool)
        t_walk = time.perf_counter() - t1
        rows.append(AggregateRow(i, n_vars, t_import, t_walk,
                                 rt.rewrite_seconds - rw0,
                                 rt.rewritten_slots - slots0,
                                 got == oracle[i]))
    home.close()
    return rows


# ---------------------------------------------------- rewrite scaling harness

GRAPH_NODE = "graph_node"   # value + 3 reference slots


def build_graph_pool(rt, name, n_nodes, seed, heap=8192, out_degree=3):
    """Random pointer graph spanning many small puddles."""
    rt.register_type(GRAPH_NODE,
                     slots=[(8 * (i + 1), GRAPH_NODE) for i in range(out_degree)])
    size = 8 * (1 + out_degree)
    pool = rt.create_pool(name, root_heap=heap)
    saved = rt.default_puddle_heap
    rt.default_puddle_heap = heap
    rng = random.Random(seed)
    addrs = []
    i = 0
    while i < n_nodes:
        with rt.transaction():
            for _ in range(min(128, n_nodes - i)):
                a = pool.malloc(size, GRAPH_NODE)
                rt.store_u64(a, rng.getrandbits(40))
                addrs.append(a)
                i += 1
    with rt.transaction():
        for a in addrs:
            for s in range(out_degree):
                rt.tx_add(a + 8 * (s + 1), 8)
                rt.store_u64(a + 8 * (s + 1),
                             rng.choice(addrs) if rng.random() < 0.9 else 0)
        pool.set_root(addrs[0])
    rt.default_puddle_heap = saved
    return pool, addrs


def graph_signature(rt, root, out_degree=3):
    """Canonical (value, out-indices) BFS signature, address independent."""
    seen = {root: 0}
    order = [root]
    shape = []
    q = [root]
    while q:
        a = q.pop(0)
        val = rt.load_u64(a)
        outs = []
        for s in range(out_degree):
            t = rt.load_u64(a + 8 * (s + 1))
            if t == 0:
                outs.append(-1)
                continue
            if t not in seen:
                seen[t] = len(order)
                order.append(t)
                q.append(t)
            outs.append(seen[t])
        shape.append((val, tuple(outs)))
    return shape, order


def measure_rewrite_scaling(root_dir, sizes, seed=42):
    """(n_refs, rewrite_seconds) per graph size: export, re-import as a
    conflicting copy, traverse fully so every reference slot is visited."""
    rows = []
    for n, n_nodes in enumerate(sizes):
        rig = EmbeddedRig(Path(root_dir) / f"scale{n}", record_trace=False)
        rt = rig.runtime
        pool, addrs = build_graph_pool(rt, "g", n_nodes, seed + n)
        bundle = Path(root_dir) / f"scale{n}.pexp"
        rt.export_pool(pool, bundle)
        copy = rt.import_bundle(bundle)
        rw0 = rt.rewrite_seconds
        graph_signature(rt, copy.get_root())
        rows.append((n_nodes * 3, rt.rewrite_seconds - rw0,
                     rt.rewritten_slots))
        rig.close()
    return rows


RUNNERS = {
    "linkedlist": run_linkedlist,
    "btree": run_btree,
    "kvstore-ycsb": run_kvstore,
    "parallel-array": run_parallel_array,
}
