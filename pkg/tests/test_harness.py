import json

import numpy as np
import pytest

from sdrkit.datagen import DataMatrixPair
from sdrkit.harness import (
    ConfigError,
    ExperimentConfig,
    ResultTable,
    cell_seed,
    emit_results,
    geometric_schedule,
    projection_seed,
    read_results,
    run_linear_trial,
    run_sweep,
    subsample_without_replacement,
)


def _small_linear(**overrides):
    base = dict(kind="linear", generator={"n": 30, "t": 100, "m_shared": 1, "m_self": 1,
                                          "gamma_self": 5.0},
                methods=["pca", "rcca"], axes={"gamma_shared": [0.5, 5.0]}, trials=3,
                rc0_trials=3, master_seed=7)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_unknown_parameter(self):
        with pytest.raises(ConfigError, match="unknown parameter"):
            ExperimentConfig(generator={"snr": 1})

    def test_empty_axis(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(axes={"t": []})

    def test_bad_method_and_trials(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(methods=["ica"])
        with pytest.raises(ConfigError):
            ExperimentConfig(trials=0)

    def test_json_round_trip(self, tmp_path):
        cfg = _small_linear()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg
        path.write_text(json.dumps({**cfg.to_dict(), "colour": 1}))
        with pytest.raises(ConfigError, match="unknown config"):
            ExperimentConfig.from_json(path)

    def test_cells_are_cartesian(self):
        cfg = ExperimentConfig(axes={"t": [100, 200], "gamma_shared": [1.0, 2.0, 3.0]})
        cells = cfg.cells()
        assert len(cells) == 6 and cells[1] == {"t": 100, "gamma_shared": 2.0}

    def test_seeds_are_distinct(self):
        seeds = {cell_seed(0, c, t) for c in range(5) for t in range(5)}
        assert len(seeds) == 25
        assert cell_seed(0, 1, 2) == cell_seed(0, 1, 2) != cell_seed(1, 1, 2)


class TestSweep:
    def test_single_cell_equals_direct_call(self):
        cfg = _small_linear(axes={"gamma_shared": [5.0]}, trials=1)
        table = run_sweep(cfg)
        seeds = (projection_seed(7), cell_seed(7, 0, 0, 1), cell_seed(7, 0, 0, 2))
        direct = run_linear_trial({**cfg.generator, "gamma_shared": 5.0}, cfg.methods, seeds, 3)
        got = {r["method"]: r["rc_prime"] for r in table.trial_rows}
        assert got == {r["method"]: r["rc_prime"] for r in direct}

    def test_rerun_is_cached_noop(self, tmp_path, monkeypatch):
        cfg = _small_linear()
        first = run_sweep(cfg, output_dir=tmp_path)
        import sdrkit.harness as harness

        def boom(_):
            raise AssertionError("cell recomputed")

        monkeypatch.setattr(harness, "_run_cell", boom)
        second = run_sweep(cfg, output_dir=tmp_path)
        assert first.rows == second.rows

    def test_workers_do_not_change_results(self):
        cfg = _small_linear()
        assert run_sweep(cfg).rows == run_sweep(cfg, workers=2).rows

    def test_aggregates_match_trials(self):
        table = run_sweep(_small_linear())
        for agg in table.aggregate_rows:
            vals = [r["rc_prime"] for r in table.trial_rows
                    if r["cell"] == agg["cell"] and r["method"] == agg["method"]]
            assert agg["rc_prime"] == pytest.approx(np.mean(vals))
            assert agg["rc_prime_std"] == pytest.approx(np.std(vals))
            assert agg["n_trials"] == 3

    def test_cell_failure_recorded(self):
        cfg = _small_linear(methods=["cca"], axes={"t": [20, 100]}, trials=1)
        table = run_sweep(cfg)
        by_t = {r["t"]: r for r in table.aggregate_rows}
        assert "UndersampledError" in by_t[20]["error"]
        assert by_t[100]["error"] is None and by_t[100]["n_trials"] == 1

    def test_pca_misses_weak_shared_signal(self):
        cfg = _small_linear(generator={"n": 200, "t": 300, "m_shared": 1, "m_self": 1,
                                       "gamma_self": 5.0}, trials=2)
        table = run_sweep(cfg)
        agg = {(r["gamma_shared"], r["method"]): r["rc_prime"] for r in table.aggregate_rows}
        assert agg[(0.5, "rcca")] - agg[(0.5, "pca")] > 0.3

    def test_gaussian_kind(self):
        cfg = ExperimentConfig(kind="gaussian_mi", generator={"k": 3, "n": 20_000},
                               axes={"mi": [0.5, 2.0]}, trials=2)
        for agg in run_sweep(cfg).aggregate_rows:
            assert agg["estimate"] == pytest.approx(agg["true_mi"], rel=0.05)


class TestEmit:
    def test_empty_table_is_header_only(self, tmp_path):
        (path,) = emit_results(ResultTable(["a", "b"], []), tmp_path, formats=("csv",))
        assert path.read_text() == "a,b\n"

    def test_round_trip(self, tmp_path):
        table = run_sweep(_small_linear())
        csv_path, json_path = emit_results(table, tmp_path, config=_small_linear())
        back = read_results(csv_path)
        assert back.columns == table.columns
        assert back.rows == [{c: r.get(c) for c in table.columns} for r in table.rows]
        summary = json.loads(json_path.read_text())
        assert summary["schema_version"] == 1 and len(summary["aggregates"]) == 4

    def test_byte_identical_reruns(self, tmp_path):
        a = emit_results(run_sweep(_small_linear()), tmp_path / "a", formats=("csv",))[0]
        b = emit_results(run_sweep(_small_linear()), tmp_path / "b", formats=("csv",))[0]
        assert a.read_bytes() == b.read_bytes()


class TestSubsample:
    def test_full_draw_is_a_permutation(self):
        data = np.arange(50)
        assert sorted(subsample_without_replacement(data, 50, 3)) == list(range(50))

    def test_nested(self):
        rng = np.random.default_rng(0)
        pair = DataMatrixPair(rng.standard_normal((500, 2)), rng.standard_normal((500, 2)))
        small = subsample_without_replacement(pair, 100, 9)
        big = subsample_without_replacement(pair, 200, 9)
        big_rows = {tuple(r) for r in big.x}
        assert all(tuple(r) in big_rows for r in small.x)
        assert len(big_rows) == 200

    def test_too_many(self):
        with pytest.raises(ValueError):
            subsample_without_replacement(np.arange(5), 6, 0)

    def test_geometric_schedule(self):
        sizes = geometric_schedule()
        assert sizes[:3] == [256, 339, 451]
        assert sizes[-1] == 55996
        ratios = np.diff(np.log(sizes))
        assert np.allclose(ratios, ratios[0], atol=0.01)
