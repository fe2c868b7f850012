"""Dataset generation, the metrics protocol, and report/dataset files."""
import json

import numpy as np
import pytest

from cinplan import (
    EvalReport,
    default_hyperparams,
    emit_report,
    evaluate,
    generate_dataset,
    init_net,
    load_report,
)
from cinplan.evaluation import SplitData, load_dataset, save_dataset


@pytest.fixture(scope="module")
def small_2d():
    return generate_dataset(8, (6, 2, 3), kind="occupancy2d", seed=0)


@pytest.fixture(scope="module")
def small_3d():
    return generate_dataset(8, (4, 1, 2), kind="terrain3d", seed=1, delta_h_star=0.25)


class TestGenerateDataset:
    def test_split_sizes(self, small_2d):
        assert (len(small_2d.train), len(small_2d.val), len(small_2d.test)) == (6, 2, 3)

    def test_splits_hold_distinct_maps(self, small_2d):
        blobs = set()
        for name in ("train", "val", "test"):
            for world in small_2d.splits[name].maps:
                blobs.add(world.cells.tobytes())
        assert len(blobs) == 11

    def test_goals_reachable_from_another_cell(self, small_2d, small_3d):
        for ds in (small_2d, small_3d):
            for name in ("train", "val", "test"):
                split = ds.splits[name]
                for world, goal, sol in zip(split.maps, split.goals, split.oracles):
                    assert world.traversable(goal)
                    others = np.isfinite(sol.dist).sum() - 1
                    assert others >= 1

    def test_deterministic(self):
        a = generate_dataset(8, (3, 1, 1), kind="occupancy2d", seed=5)
        b = generate_dataset(8, (3, 1, 1), kind="occupancy2d", seed=5)
        for name in ("train", "val", "test"):
            assert a.splits[name].goals == b.splits[name].goals
            for wa, wb in zip(a.splits[name].maps, b.splits[name].maps):
                assert np.array_equal(wa.cells, wb.cells)

    def test_bad_counts_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset(8, (0, 0, 0), kind="occupancy2d", seed=0)
        with pytest.raises(ValueError):
            generate_dataset(8, (-1, 1, 1), kind="occupancy2d", seed=0)
        with pytest.raises(ValueError):
            generate_dataset(8, (1, 1, 1), kind="hex", seed=0)


class TestEvaluate:
    def test_expert_scores_perfectly(self, small_2d):
        hp = default_hyperparams(8, exact=True)
        report = evaluate(None, small_2d.test, hp)
        assert report.pct_opt == 100.0
        assert report.pct_suc == 100.0
        assert report.pct_err == 0.0

    def test_expert_perfect_on_terrain(self, small_3d):
        hp = default_hyperparams(8, exact=True)
        report = evaluate(None, small_3d.test, hp)
        assert (report.pct_opt, report.pct_suc, report.pct_err) == (100.0, 100.0, 0.0)

    def test_opt_never_exceeds_suc(self, small_2d):
        hp = default_hyperparams(8)
        for seed in range(3):
            report = evaluate(init_net(rng_seed=seed), small_2d.test, hp)
            assert report.pct_opt <= report.pct_suc

    def test_order_invariance(self, small_2d):
        hp = default_hyperparams(8, exact=True)
        split = small_2d.test
        reversed_split = SplitData(
            maps=split.maps[::-1], goals=split.goals[::-1], oracles=split.oracles[::-1]
        )
        a = evaluate(None, split, hp)
        b = evaluate(None, reversed_split, hp)
        assert (a.pct_opt, a.pct_suc, a.pct_err) == (b.pct_opt, b.pct_suc, b.pct_err)

    def test_parallel_matches_serial(self, small_2d):
        hp = default_hyperparams(8, exact=True)
        a = evaluate(None, small_2d.test, hp, jobs=1)
        b = evaluate(None, small_2d.test, hp, jobs=2)
        assert (a.pct_opt, a.pct_suc, a.pct_err) == (b.pct_opt, b.pct_suc, b.pct_err)
        assert a.per_map == b.per_map

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            evaluate(None, SplitData([], [], []), default_hyperparams(8))

    def test_impossible_report_rejected(self):
        with pytest.raises(ValueError):
            EvalReport(pct_opt=90.0, pct_suc=80.0, pct_err=0.0, per_map=[], config={})


class TestReportFiles:
    def _report(self, small_2d):
        hp = default_hyperparams(8, exact=True)
        return evaluate(None, small_2d.test, hp, config={"m": 8, "split": "test"})

    def test_roundtrip_equals_in_memory(self, small_2d, tmp_path):
        report = self._report(small_2d)
        emit_report(report, tmp_path / "report")
        loaded = load_report(tmp_path / "report")
        assert loaded.pct_opt == report.pct_opt
        assert loaded.pct_suc == report.pct_suc
        assert loaded.pct_err == report.pct_err
        assert loaded.per_map == report.per_map
        assert loaded.config == report.config

    def test_write_read_write_bytes_identical(self, small_2d, tmp_path):
        report = self._report(small_2d)
        csv1, json1 = emit_report(report, tmp_path / "a")
        csv2, json2 = emit_report(load_report(tmp_path / "a"), tmp_path / "b")
        assert csv1.read_bytes() == csv2.read_bytes()
        assert json1.read_bytes() == json2.read_bytes()

    def test_percentages_have_one_decimal(self, small_2d, tmp_path):
        report = self._report(small_2d)
        csv_path, json_path = emit_report(report, tmp_path / "r")
        text = csv_path.read_text()
        assert "pct_opt,100.0" in text
        payload = json.loads(json_path.read_text())
        assert payload["pct_suc"] == 100.0
        assert round(payload["pct_err"], 1) == payload["pct_err"]


class TestDatasetFiles:
    def test_roundtrip(self, small_3d, tmp_path):
        save_dataset(small_3d, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.kind == small_3d.kind
        assert loaded.m == small_3d.m
        assert loaded.counts == small_3d.counts
        assert loaded.delta_h_star == small_3d.delta_h_star
        for name in ("train", "val", "test"):
            a, b = small_3d.splits[name], loaded.splits[name]
            assert a.goals == b.goals
            for wa, wb in zip(a.maps, b.maps):
                assert np.array_equal(wa.cells, wb.cells)

    def test_reloaded_oracles_match(self, small_2d, tmp_path):
        save_dataset(small_2d, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds", splits=("test",))
        for sol_a, sol_b in zip(small_2d.test.oracles, loaded.test.oracles):
            assert np.array_equal(sol_a.policy, sol_b.policy)
            assert np.array_equal(sol_a.dist, sol_b.dist)

    def test_layout(self, small_2d, tmp_path):
        save_dataset(small_2d, tmp_path / "ds")
        root = tmp_path / "ds"
        assert (root / "maps" / "train" / "0000.cinmap").exists()
        assert (root / "maps" / "test" / "0002.cinmap").exists()
        assert (root / "goals.csv").exists()
        meta = json.loads((root / "meta.json").read_text())
        assert meta["kind"] == "occupancy2d"
        assert meta["counts"] == [6, 2, 3]
