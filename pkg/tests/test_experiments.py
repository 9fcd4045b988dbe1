import numpy as np
import pytest

from mmqlab.experiments import (
    CSV_HEADER,
    GridSpec,
    ResultsTable,
    RunRecord,
    compute_bpw,
    load_results,
    make_run_id,
    pareto_frontier,
    run_sota_grid,
    run_uniform_grid,
    save_results,
)
from mmqlab.pipeline import (
    BlockGroup,
    ComponentId,
    ConnectorKind,
    LayerType,
    PipelineSpec,
    QuantizationLedger,
    Selector,
    TaskKind,
    apply_quantization,
    build_model,
)
from mmqlab.quantizers import Method


def _record(run_id="x", bpw=4.0, score=0.5, task=TaskKind.RETRIEVAL, **kw):
    defaults = dict(
        run_id=run_id, method=Method.UNIFORM, task=task,
        vision_bits=4, connector_bits=4, language_bits=4,
        groups=frozenset(BlockGroup), layer_types=frozenset(LayerType),
        group_size=0, bpw=bpw, score=score, seed=7, wall_ms=0,
    )
    defaults.update(kw)
    return RunRecord(**defaults)


class TestRunId:
    def test_stable_and_unique(self):
        a = make_run_id(Method.GPTQ, TaskKind.VQA, 4, 16, 2, BlockGroup, LayerType, 128, 7)
        b = make_run_id(Method.GPTQ, TaskKind.VQA, 4, 16, 2, BlockGroup, LayerType, 128, 7)
        c = make_run_id(Method.GPTQ, TaskKind.VQA, 4, 16, 2, BlockGroup, LayerType, 128, 8)
        assert a == b != c
        assert len(a) == 12


class TestComputeBpw:
    def test_baseline_exactly_sixteen(self, default_model):
        assert compute_bpw(QuantizationLedger(), default_model) == 16.0

    def test_group128_four_bit_exact(self, default_model):
        _, ledger = apply_quantization(default_model, Selector.everything(), Method.RTN, 4, group_size=128)
        assert compute_bpw(ledger, default_model) == pytest.approx(4.25, abs=1e-9)

    def test_per_tensor_overhead(self, default_model):
        _, ledger = apply_quantization(default_model, Selector.everything(), Method.UNIFORM, 4)
        layer_sizes = [default_model.layers[a.name].size for a in default_model.addresses]
        expected = sum(4 * n + 64 for n in layer_sizes) / sum(layer_sizes)
        assert compute_bpw(ledger, default_model) == pytest.approx(expected, abs=1e-12)
        # large layers approach k + 64/n
        assert all(4 + 64 / n == pytest.approx(4.0, abs=0.01) for n in layer_sizes if n >= 6400)

    def test_unknown_layer_rejected(self, default_model):
        _, ledger = apply_quantization(default_model, Selector.everything(), Method.RTN, 4)
        ledger.entries[0] = ledger.entries[0].__class__(
            layer="nonexistent.layer", method=Method.RTN, bits=4, group_size=128,
            scheme=ledger.entries[0].scheme, proxy_error=0.0, code_bits=0,
        )
        with pytest.raises(ValueError, match="unknown layer"):
            compute_bpw(ledger, default_model)


class TestUniformGrid:
    def test_full_subset_count_is_589_per_task(self, tiny_spec, tiny_probes, tmp_path):
        grid = GridSpec(bits=(2, 4, 6, 8), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4)
        table = run_uniform_grid(tiny_spec, tiny_probes, grid)
        # 4 bits x 7 component subsets x 7 group subsets x 3 layer-type subsets + baseline
        assert len(table.rows) == 4 * 7 * 7 * 3 + 1
        assert len({r.run_id for r in table.rows}) == len(table.rows)
        # the full table survives a save/load/save round trip byte for byte
        first, second = tmp_path / "t1.csv", tmp_path / "t2.csv"
        save_results(table, first)
        save_results(load_results(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_baseline_row(self, tiny_spec, tiny_probes):
        grid = GridSpec(
            bits=(4,), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4,
            component_subsets=((ComponentId.VISION,),),
            group_subsets=((BlockGroup.FRONT,),),
            layer_type_subsets=((LayerType.ATTN,),),
        )
        table = run_uniform_grid(tiny_spec, tiny_probes, grid)
        base = [r for r in table.rows if r.vision_bits == 16]
        assert len(base) == 1
        assert base[0].bpw == 16.0 and base[0].score == 1.0

    def test_full_pipeline_star_flagged(self, tiny_spec, tiny_probes):
        grid = GridSpec(bits=(8,), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4)
        table = run_uniform_grid(tiny_spec, tiny_probes, grid)
        stars = [r for r in table.rows if r.is_full_pipeline_star]
        star_bits = sorted(r.vision_bits for r in stars)
        assert star_bits == [8, 16]

    def test_empty_effect_cells_collapse(self, tiny_probes):
        spec = PipelineSpec(
            d_model=32, vision_blocks=3, connector_blocks=0, language_blocks=3, heads=2,
            patch_count=8, vocab=64, connector_kind=ConnectorKind.LINEAR_PROJECTOR, seed=2,
        )
        grid = GridSpec(
            bits=(4,), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4,
            component_subsets=((ComponentId.CONNECTOR,),),
        )
        table = run_uniform_grid(spec, tiny_probes, grid)
        assert len(table.rows) == 1  # only the baseline survives

    def test_rerun_identical(self, tiny_spec, tiny_probes, tmp_path):
        grid = GridSpec(
            bits=(2,), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4,
            component_subsets=((ComponentId.LANGUAGE,),),
        )
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        save_results(run_uniform_grid(tiny_spec, tiny_probes, grid), a)
        save_results(run_uniform_grid(tiny_spec, tiny_probes, grid), b)
        assert a.read_bytes() == b.read_bytes()

    def test_worker_pool_matches_serial(self, tiny_spec, tiny_probes):
        grid = GridSpec(bits=(2, 8), tasks=(TaskKind.RETRIEVAL,), seeds=(3,), eval_pairs=4,
                        group_subsets=((BlockGroup.FRONT, BlockGroup.MIDDLE, BlockGroup.END),))
        serial = run_uniform_grid(tiny_spec, tiny_probes, grid, workers=1)
        pooled = run_uniform_grid(tiny_spec, tiny_probes, grid, workers=4)
        assert [r.run_id for r in serial.rows] == [r.run_id for r in pooled.rows]
        assert [r.score for r in serial.rows] == [r.score for r in pooled.rows]


class TestSotaGrid:
    def test_grid_completeness_every_combo_once(self, tiny_spec, tiny_probes):
        table = run_sota_grid(
            tiny_spec, tiny_probes, methods=(Method.GPTQ,), bits=(2, 4),
            tasks=(TaskKind.RETRIEVAL,), seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        combos = [(r.vision_bits, r.connector_bits, r.language_bits) for r in table.rows]
        assert len(combos) == 27 and len(set(combos)) == 27  # (2,4,16)^3

    def test_projector_spec_has_two_feature_axes(self, tiny_probes):
        spec = PipelineSpec(
            d_model=32, vision_blocks=3, connector_blocks=0, language_blocks=3, heads=2,
            patch_count=8, vocab=64, connector_kind=ConnectorKind.LINEAR_PROJECTOR, seed=2,
        )
        table = run_sota_grid(
            spec, tiny_probes, methods=(Method.AWQ,), bits=(2, 4),
            tasks=(TaskKind.RETRIEVAL,), seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        assert len(table.rows) == 9  # 3^2, connector axis absent
        assert all(r.connector_bits == 16 for r in table.rows)

    def test_baseline_cell(self, tiny_spec, tiny_probes):
        table = run_sota_grid(
            tiny_spec, tiny_probes, methods=(Method.GPTQ,), bits=(4,),
            tasks=(TaskKind.VQA,), seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        base = [r for r in table.rows if (r.vision_bits, r.connector_bits, r.language_bits) == (16, 16, 16)]
        assert len(base) == 1 and base[0].score == 1.0 and base[0].bpw == 16.0

    def test_single_and_pairwise_slices(self, tiny_spec, tiny_probes):
        table = run_sota_grid(
            tiny_spec, tiny_probes, methods=(Method.GPTQ,), bits=(2, 4),
            tasks=(TaskKind.RETRIEVAL,), seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        assert len(table.single_component_slice().rows) == 3 * 2
        assert len(table.pairwise_slice().rows) == 3 * 2 * 2

    def test_failed_cells_recorded_not_fatal(self, tiny_spec, tiny_probes, monkeypatch):
        import mmqlab.pipeline as pl

        original = pl.gptq_quantize

        def flaky(w, x, k, **kw):
            if k == 2:
                raise RuntimeError("synthetic failure")
            return original(w, x, k, **kw)

        monkeypatch.setattr(pl, "gptq_quantize", flaky)
        table = run_sota_grid(
            tiny_spec, tiny_probes, methods=(Method.GPTQ,), bits=(2, 4),
            tasks=(TaskKind.RETRIEVAL,), seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        assert len(table.rows) == 27
        failed = [r for r in table.rows if not np.isfinite(r.score)]
        assert len(failed) == 27 - 8  # every combo touching bits=2 fails
        assert table.failures and "synthetic failure" in table.failures[0][1]

    def test_rejects_uncalibrated_methods(self, tiny_spec, tiny_probes):
        with pytest.raises(ValueError, match="GPTQ/AWQ"):
            run_sota_grid(tiny_spec, tiny_probes, methods=(Method.UNIFORM,))

    def test_skip_run_ids_resumes_without_recompute(self, tiny_spec, tiny_probes):
        kwargs = dict(
            methods=(Method.GPTQ,), bits=(2, 4), tasks=(TaskKind.RETRIEVAL,),
            seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        full = run_sota_grid(tiny_spec, tiny_probes, **kwargs)
        skip = frozenset(r.run_id for r in full.rows[:10])
        rest = run_sota_grid(tiny_spec, tiny_probes, skip_run_ids=skip, **kwargs)
        assert len(rest.rows) == len(full.rows) - 10
        merged = sorted(full.rows[:10] + rest.rows, key=lambda r: r.run_id)
        assert [(r.run_id, r.score) for r in merged] == [(r.run_id, r.score) for r in full.rows]

    def test_worker_pool_matches_serial(self, tiny_spec, tiny_probes):
        kwargs = dict(
            methods=(Method.AWQ,), bits=(2, 4), tasks=(TaskKind.RETRIEVAL, TaskKind.VQA),
            seeds=(3,), calibration_pairs=8, eval_pairs=4,
        )
        serial = run_sota_grid(tiny_spec, tiny_probes, workers=1, **kwargs)
        pooled = run_sota_grid(tiny_spec, tiny_probes, workers=4, **kwargs)
        assert [(r.run_id, r.score) for r in serial.rows] == [(r.run_id, r.score) for r in pooled.rows]


class TestPersistence:
    def test_empty_table_is_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        save_results(ResultsTable(), path)
        assert path.read_text() == CSV_HEADER + "\n"

    def test_round_trip_identity(self, tmp_path):
        rows = [
            _record(run_id="aaa", bpw=4.248692, score=0.123457),
            _record(run_id="bbb", bpw=16.0, score=1.0, groups=frozenset({BlockGroup.FRONT, BlockGroup.END})),
            _record(run_id="ccc", bpw=float("nan"), score=float("nan")),
        ]
        path = tmp_path / "t.csv"
        save_results(ResultsTable(rows=rows), path)
        loaded = load_results(path)
        path2 = tmp_path / "t2.csv"
        save_results(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()
        assert loaded.rows[1].groups == frozenset({BlockGroup.FRONT, BlockGroup.END})
        for orig, back in zip(rows[:2], loaded.rows[:2]):
            assert back.bpw == pytest.approx(orig.bpw, rel=1e-5)
            assert back.score == pytest.approx(orig.score, rel=1e-5)

    def test_groups_serialization_order(self, tmp_path):
        row = _record(groups=frozenset({BlockGroup.END, BlockGroup.FRONT}))
        path = tmp_path / "g.csv"
        save_results(ResultsTable(rows=[row]), path)
        assert ",front+end," in path.read_text()

    def test_malformed_rows_error_with_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(CSV_HEADER + "\nonly,three,fields\n")
        with pytest.raises(ValueError, match="line 2"):
            load_results(path)
        path.write_text(CSV_HEADER + "\n" + _record().to_csv_row() + "\n" + "x,uniform,retrieval,4,4,4,weird,attn,0,4,0.5,7,0\n")
        with pytest.raises(ValueError, match="line 3"):
            load_results(path)
        path.write_text("not,the,header\n")
        with pytest.raises(ValueError, match="line 1"):
            load_results(path)


class TestPareto:
    def test_single_row(self):
        table = ResultsTable(rows=[_record()])
        assert pareto_frontier(table, TaskKind.RETRIEVAL).rows == table.rows

    def test_domination(self):
        rows = [_record(run_id="a", bpw=4.0, score=0.9), _record(run_id="b", bpw=8.0, score=0.8)]
        front = pareto_frontier(ResultsTable(rows=rows), TaskKind.RETRIEVAL).rows
        assert [r.run_id for r in front] == ["a"]

    def test_equal_score_higher_bpw_dominated(self):
        rows = [
            _record(run_id="a", bpw=4.0, score=0.8),
            _record(run_id="b", bpw=6.0, score=0.9),
            _record(run_id="c", bpw=8.0, score=0.9),
        ]
        front = pareto_frontier(ResultsTable(rows=rows), TaskKind.RETRIEVAL).rows
        assert [r.run_id for r in front] == ["a", "b"]

    def test_exact_ties_all_retained(self):
        rows = [_record(run_id="a", bpw=4.0, score=0.9), _record(run_id="b", bpw=4.0, score=0.9)]
        front = pareto_frontier(ResultsTable(rows=rows), TaskKind.RETRIEVAL).rows
        assert len(front) == 2

    def test_nan_rows_excluded_and_sorted(self):
        rows = [
            _record(run_id="n", bpw=float("nan"), score=float("nan")),
            _record(run_id="hi", bpw=9.0, score=0.99),
            _record(run_id="lo", bpw=2.0, score=0.3),
        ]
        front = pareto_frontier(ResultsTable(rows=rows), TaskKind.RETRIEVAL).rows
        assert [r.run_id for r in front] == ["lo", "hi"]

    def test_empty_task_slice_rejected(self):
        with pytest.raises(ValueError, match="no finished rows"):
            pareto_frontier(ResultsTable(rows=[_record(task=TaskKind.VQA)]), TaskKind.CAPTION)
