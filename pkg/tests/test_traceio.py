"""Trace files and run configs: round-trips, validation, determinism.

The reader is held to reproducing the live-graph statistics exactly from
the wire records alone, for every rank of a pipelined+sharded run.
"""

import json

import pytest

from symtrace.autodiff import build_backward, build_optimizer, find_loss
from symtrace.concrete import Calibration, ConcreteGraph, estimate_time, summarize
from symtrace.errors import (
    CorruptRecordError,
    InvalidSpecError,
    VersionMismatchError,
)
from symtrace.models import ModelSpec, TrainingSpec, build_model, bindings_for
from symtrace.partition import (
    connect_stages,
    expand_microbatches,
    plan_pipeline,
    stage_schedule,
)
from symtrace.shard import ParallelConfig, apply_strategy, insert_collectives
from symtrace.traceio import (
    MAX_SAFE_INT,
    RunConfig,
    TRACE_VERSION,
    inject_profile,
    load_config,
    read_trace,
    record_signature,
    save_config,
    stats_from_trace,
    write_trace,
)


def build_case(pcfg, model_kw=None, batch=8, microbatch=2):
    kw = dict(layers=2, hidden=256, heads=4, seq=128, vocab=512)
    kw.update(model_kw or {})
    model = ModelSpec(**kw)
    train = TrainingSpec(batch=batch, microbatch=microbatch)
    built = build_model(model, train, parallel_names=("dp", "tp", "pp",
                                                      "cp", "ep"))
    g = built.graph
    gi = build_backward(g, find_loss(g))
    build_optimizer(g, gi.grads, train.optimizer)
    plan = apply_strategy(built, pcfg)
    insert_collectives(g, plan)
    n_mb = train.n_microbatches(pcfg.data_width)
    eg, _ = expand_microbatches(g, plan, built.syms["B"], n_mb)
    pplan = plan_pipeline(model.layers, pcfg.pp)
    connect_stages(eg, pplan)
    degrees = {a: d for a, d in pcfg.degrees().items() if d > 1}
    table = bindings_for(built, degrees=degrees, dp=pcfg.data_width)
    cfg = RunConfig(model=model, parallel=pcfg, training=train)
    return eg, plan, pplan, table, cfg


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    eg, plan, pplan, table, cfg = build_case(ParallelConfig(pp=2, tp=2,
                                                            sp=True))
    view = ConcreteGraph(eg, table)
    calib = Calibration()
    for s in range(2):
        estimate_time(eg, table, stage_schedule(eg, pplan, s), calib, view)
    d = tmp_path_factory.mktemp("traces")
    man = write_trace(str(d), eg, plan, pplan, table, cfg, view=view)
    return eg, plan, pplan, table, cfg, view, man


class TestRunConfig:
    def test_dict_roundtrip(self):
        cfg = RunConfig(model=ModelSpec(layers=3, n_experts=4),
                        parallel=ParallelConfig(tp=2, sp=True),
                        training=TrainingSpec(batch=16),
                        bindings={"S": 64},
                        calibration=Calibration(efficiency={"GeMM": 0.6}))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_file_roundtrip(self, tmp_path):
        cfg = RunConfig(model=ModelSpec(layers=3),
                        parallel=ParallelConfig(dp=2))
        p = tmp_path / "run.yaml"
        save_config(cfg, str(p))
        assert load_config(str(p), apply_env=False) == cfg

    def test_sparse_file_gets_defaults(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("model:\n  layers: 5\n")
        cfg = load_config(str(p), apply_env=False)
        assert cfg.model.layers == 5
        assert cfg.parallel == ParallelConfig()
        assert cfg.trace_dir == "traces"

    def test_unknown_keys_rejected(self):
        with pytest.raises(InvalidSpecError):
            RunConfig.from_dict({"paralel": {}})
        with pytest.raises(InvalidSpecError):
            RunConfig.from_dict({"model": {"hiden": 4}})

    def test_env_overrides_output_paths(self, tmp_path, monkeypatch):
        p = tmp_path / "run.yaml"
        save_config(RunConfig(), str(p))
        monkeypatch.setenv("SYMTRACE_TRACE_DIR", "/elsewhere/t")
        monkeypatch.setenv("SYMTRACE_REPORT", "/elsewhere/r.json")
        cfg = load_config(str(p))
        assert cfg.trace_dir == "/elsewhere/t"
        assert cfg.report == "/elsewhere/r.json"

    def test_hash_ignores_outputs_but_not_workload(self):
        a = RunConfig()
        b = a.replace_outputs(trace_dir="/somewhere/else")
        c = RunConfig(model=ModelSpec(layers=99))
        assert a.workload_hash() == b.workload_hash()
        assert a.workload_hash() != c.workload_hash()


class TestWireFormat:
    def test_header_first_line(self, written):
        *_, man = written
        with open(man.paths[0]) as f:
            head = json.loads(f.readline())
        assert head["version"] == TRACE_VERSION
        assert head["rank"] == 0
        assert head["config_hash"] == man.config_hash

    def test_deps_point_backward_only(self, written):
        *_, man = written
        for path in man.paths.values():
            tr = read_trace(path)
            seen = set()
            for n in tr.nodes:
                assert set(n.data_deps) <= seen
                seen.add(n.id)

    def test_comm_records_carry_rank_level_addressing(self, written):
        eg, plan, pplan, table, cfg, view, man = written
        for r, path in man.paths.items():
            tr = read_trace(path)
            colls = [n for n in tr.nodes if n.node_type == "COMM_COLL"]
            p2ps = [n for n in tr.nodes
                    if n.node_type in ("COMM_SEND", "COMM_RECV")]
            assert colls and p2ps
            for n in colls:
                assert r in n.attrs["group"]
                assert len(n.attrs["group"]) == 2  # tp degree
            for n in p2ps:
                peer = n.attrs["peer"]
                assert 0 <= peer < cfg.parallel.ranks and peer != r
                assert n.attrs["tag"] >= 0

    def test_send_recv_tags_pair_across_files(self, written):
        *_, man = written
        sent, got = {}, {}
        for r, path in man.paths.items():
            for n in read_trace(path).nodes:
                if n.node_type == "COMM_SEND":
                    sent[(r, n.attrs["peer"], n.attrs["tag"])] = \
                        n.attrs["comm_bytes"]
                elif n.node_type == "COMM_RECV":
                    got[(n.attrs["peer"], r, n.attrs["tag"])] = \
                        n.attrs["comm_bytes"]
        assert sent and sent == got

    def test_shapes_are_concrete_ints(self, written):
        *_, man = written
        tr = read_trace(man.paths[0])
        for n in tr.nodes[:50]:
            for shape in n.shapes["ins"] + [n.shapes["out"]]:
                assert all(isinstance(e, int) and e >= 1 for e in shape)

    def test_huge_counts_survive_as_decimal_strings(self, tmp_path):
        # a single giant layer pushes per-node flops past 2**53; the
        # JSON must carry them as strings yet read back exact
        eg, plan, pplan, table, cfg = build_case(
            ParallelConfig(), model_kw=dict(hidden=2 ** 20, heads=1,
                                            seq=2 ** 16, layers=1),
            batch=8, microbatch=8)
        man = write_trace(str(tmp_path), eg, plan, pplan, table, cfg)
        raw = open(man.paths[0]).read()
        tr = read_trace(man.paths[0])
        big = [n for n in tr.nodes if n.flops > MAX_SAFE_INT]
        assert big
        assert f'"{big[0].flops}"' in raw
        live = summarize(eg, table, stage_schedule(eg, pplan, 0))
        assert stats_from_trace(tr) == live


class TestReadValidation:
    def test_version_mismatch(self, written, tmp_path):
        *_, man = written
        lines = open(man.paths[0]).readlines()
        head = json.loads(lines[0])
        head["version"] = TRACE_VERSION + 1
        p = tmp_path / "future.jsonl"
        p.write_text(json.dumps(head) + "\n" + "".join(lines[1:]))
        with pytest.raises(VersionMismatchError):
            read_trace(str(p))

    def test_corrupt_line_reported_with_number(self, written, tmp_path):
        *_, man = written
        lines = open(man.paths[0]).readlines()
        lines[41] = lines[41][:-10] + "\n"
        p = tmp_path / "bad.jsonl"
        p.write_text("".join(lines))
        with pytest.raises(CorruptRecordError, match="line 42"):
            read_trace(str(p))

    def test_missing_field_rejected(self, written, tmp_path):
        *_, man = written
        lines = open(man.paths[0]).readlines()
        idx = next(i for i, ln in enumerate(lines) if '"node_type"' in ln)
        rec = json.loads(lines[idx])
        del rec["flops"]
        lines[idx] = json.dumps(rec) + "\n"
        p = tmp_path / "short.jsonl"
        p.write_text("".join(lines))
        with pytest.raises(CorruptRecordError, match=f"line {idx + 1}"):
            read_trace(str(p))

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with pytest.raises(CorruptRecordError):
            read_trace(str(p))


class TestRoundTrip:
    def test_stats_reproduced_exactly_per_rank(self, written):
        eg, plan, pplan, table, cfg, view, man = written
        for r, path in man.paths.items():
            tr = read_trace(path)
            live = summarize(eg, table,
                             stage_schedule(eg, pplan, tr.header["stage"]),
                             view)
            assert stats_from_trace(tr) == live

    def test_rerun_is_byte_identical(self, written, tmp_path):
        eg, plan, pplan, table, cfg, view, man = written
        man2 = write_trace(str(tmp_path), eg, plan, pplan, table, cfg,
                           view=view)
        for r in man.paths:
            assert open(man.paths[r], "rb").read() == \
                open(man2.paths[r], "rb").read()

    def test_rank_subset_partitions_work(self, written, tmp_path):
        eg, plan, pplan, table, cfg, view, man = written
        part = write_trace(str(tmp_path), eg, plan, pplan, table, cfg,
                           ranks=[2], view=view)
        assert list(part.paths) == [2]
        assert open(part.paths[2], "rb").read() == \
            open(man.paths[2], "rb").read()


class TestInjectProfile:
    def test_measured_times_land_on_matches(self, written):
        *_, man = written
        tr = read_trace(man.paths[0])
        gemm = next(n for n in tr.nodes
                    if n.node_type == "COMP" and n.category == "GeMM")
        profile = {"GeMM": {record_signature(gemm): 3.25e-6}}
        rate = inject_profile(tr, profile)
        assert 0 < rate < 1
        assert gemm.est_time == 3.25e-6
        hit = sum(1 for n in tr.nodes if n.node_type == "COMP"
                  and n.category == "GeMM"
                  and record_signature(n) == record_signature(gemm))
        total = sum(1 for n in tr.nodes if n.node_type == "COMP")
        assert rate == hit / total

    def test_empty_profile_is_identity(self, written):
        *_, man = written
        tr = read_trace(man.paths[0])
        before = [n.est_time for n in tr.nodes]
        assert inject_profile(tr, {}) == 0.0
        assert [n.est_time for n in tr.nodes] == before
