import csv
import random

import pytest

from puddlekit.cli import main
from puddlekit.harness import EmbeddedRig
from puddlekit.ycsb import WORKLOAD_MIXES, ScrambledZipfian, YcsbStream, ZipfianGenerator


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_bench_linkedlist_writes_csv_and_figure(tmp_path):
    out = tmp_path / "ll.csv"
    rc = main(["bench", "linkedlist", "--ops", "500", "--out", str(out)])
    assert rc == 0
    rows = read_csv(out)
    assert rows[0][0] == "workload"
    assert rows[1][0] == "linkedlist" and rows[1][-1] == "1"
    assert (tmp_path / "ll.png").exists()


def test_bench_no_plot_skips_figure(tmp_path):
    out = tmp_path / "bt.csv"
    rc = main(["bench", "btree", "--keys", "400", "--out", str(out), "--no-plot"])
    assert rc == 0
    assert not (tmp_path / "bt.png").exists()


def test_bench_kvstore_with_crashes(tmp_path):
    out = tmp_path / "kv.csv"
    rc = main(["bench", "kvstore-ycsb", "--keys", "300", "--ops", "300",
               "--ycsb", "b", "--crash-every", "250", "--out", str(out),
               "--no-plot"])
    assert rc == 0
    rows = read_csv(out)
    assert int(rows[1][8]) >= 1  # recovery events happened


def test_crash_sweep_tx_hybrid(tmp_path):
    out = tmp_path / "sweep.csv"
    rc = main(["crash-sweep", "--scenario", "tx-hybrid", "--out", str(out)])
    assert rc == 0
    rows = read_csv(out)
    outcomes = {r[2] for r in rows[1:]}
    assert outcomes == {"pre", "post"}


def test_aggregate_command(tmp_path):
    out = tmp_path / "agg.csv"
    rc = main(["aggregate", "--nodes", "2", "--vars", "30", "--out", str(out)])
    assert rc == 0
    rows = read_csv(out)
    assert len(rows) == 3    # header + one row per node
    assert all(r[-1] == "1" for r in rows[1:])
    assert (tmp_path / "agg.png").exists()


def _seed_pool(tmp_path):
    rig = EmbeddedRig(tmp_path / "box")
    rt = rig.runtime
    rt.register_type("cell", slots=[])
    pool = rt.create_pool("demo")
    with rt.transaction():
        a = pool.malloc(64, "cell")
        rt.store_u64(a, 31337)
        pool.set_root(a)
    log_hex = None
    for h in rig.service.logspaces:
        view = rig.service._logspace_view(h)
        log_hex = view.entries()[0][0].hex
    rig.close()
    return tmp_path / "box" / "data", log_hex


def test_offline_status_heap_export_import_roundtrip(tmp_path, capsys):
    data_dir, _ = _seed_pool(tmp_path)
    assert main(["--data-dir", str(data_dir), "status"]) == 0
    out = capsys.readouterr().out
    assert "demo" in out

    assert main(["--data-dir", str(data_dir), "heap", "walk", "demo"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "addr,size,type_id"
    assert len(out.splitlines()) == 2

    bundle = tmp_path / "demo.pexp"
    assert main(["--data-dir", str(data_dir), "pool", "export", "demo",
                 "--out", str(bundle)]) == 0
    capsys.readouterr()
    assert main(["--data-dir", str(data_dir), "pool", "import",
                 str(bundle)]) == 0
    out = capsys.readouterr().out
    assert "imported pool" in out


def test_log_dump(tmp_path, capsys):
    data_dir, log_hex = _seed_pool(tmp_path)
    assert main(["--data-dir", str(data_dir), "log", "dump", log_hex]) == 0
    out = capsys.readouterr().out
    assert "seq_range=(4, 4)" in out  # committed tx leaves the log dropped


def test_heap_walk_csv_out(tmp_path):
    data_dir, _ = _seed_pool(tmp_path)
    out = tmp_path / "walk.csv"
    assert main(["--data-dir", str(data_dir), "heap", "walk", "demo",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["addr", "size", "type_id"]
    assert int(rows[1][1]) == 64


# -- YCSB generator sanity ------------------------------------------------------


def test_zipfian_is_skewed_and_bounded():
    rng = random.Random(1)
    gen = ZipfianGenerator(1000, rng)
    draws = [gen.next() for _ in range(20000)]
    assert all(0 <= d < 1000 for d in draws)
    top = draws.count(0) / len(draws)
    assert top > 0.10  # rank-0 dominates under theta=0.99


def test_scrambled_zipfian_spreads_hotness():
    rng = random.Random(2)
    gen = ScrambledZipfian(1000, rng)
    draws = [gen.next() for _ in range(20000)]
    assert all(0 <= d < 1000 for d in draws)
    hottest = max(draws.count(x) for x in set(draws))
    assert hottest / len(draws) > 0.08
    # hot key is not simply index 0 anymore
    assert draws.count(0) / len(draws) < 0.1


def test_ycsb_mixes_sum_to_one():
    for letter, mix in WORKLOAD_MIXES.items():
        assert abs(sum(mix) - 1.0) < 1e-9, letter


def test_ycsb_stream_ops_match_mix():
    rng = random.Random(3)
    stream = YcsbStream("a", 100, rng)
    ops = [stream.next_op()[0] for _ in range(5000)]
    frac_read = ops.count("read") / len(ops)
    assert 0.45 < frac_read < 0.55
    assert set(ops) == {"read", "update"}


def test_ycsb_insert_grows_keyspace():
    rng = random.Random(4)
    stream = YcsbStream("d", 50, rng)
    inserts = [op for op in (stream.next_op() for _ in range(2000))
               if op[0] == "insert"]
    assert inserts
    assert stream.n_keys == 50 + len(inserts)
    # latest-skewed reads stay in bounds as the space grows
    assert all(0 <= stream.next_op()[1] < stream.n_keys for _ in range(500))
