import json
import math

import pytest

from driftfl import cli
from driftfl.errors import ConfigError


def tiny_doc(**overrides):
    doc = {
        "num_clients": 3,
        "T": 3,
        "participant_rate": 1.0,
        "local_epochs": 1,
        "batch_size": 16,
        "anchor_size": 25,
        "hidden_dim": 5,
        "pretrain_samples": 300,
        "pretrain_epochs": 40,
        "bounds": {"eta_min": 0.01, "eta_max": 0.5},
        "scenario": {"scenario": "label_shift", "schedule": "linear", "T": 3,
                     "num_classes": 3, "input_dim": 4, "mean_scale": 2.0,
                     "noise_std": 1.0},
        "modes": ["adaptive", {"fixed": 0.02}],
        "seeds": [0, 1],
    }
    doc.update(overrides)
    return doc


class TestValidateConfig:
    def test_empty_object_gets_full_defaults(self):
        config = cli.validate_config("{}")
        assert config.base.T == 100
        assert config.base.num_clients == 100
        assert config.base.participant_rate == 0.1
        assert config.base.local_epochs == 4
        assert config.base.bounds.eta_min == 5e-6
        assert config.base.bounds.eta_max == 1e-4
        assert config.base.scenario.alpha == 0.1
        assert [m.label for m in config.modes] == ["adaptive"]
        assert config.seeds == [0]

    def test_participant_count_from_paper_defaults(self):
        config = cli.validate_config("{}")
        m = math.ceil(config.base.participant_rate * config.base.num_clients)
        assert m == 10

    def test_inverted_bounds_named(self):
        doc = tiny_doc(bounds={"eta_min": 0.5, "eta_max": 0.01})
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(doc))
        assert any("RateBounds" in v or "eta" in v
                   for v in exc_info.value.violations)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(tiny_doc(seeds=[])))
        assert any("seeds" in v for v in exc_info.value.violations)

    def test_violations_aggregate(self):
        doc = tiny_doc(seeds=[], num_clients=0,
                       modes=["adaptive", {"fixed": 9.0}])
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(doc))
        assert len(exc_info.value.violations) >= 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(tiny_doc(tpyo=1)))
        assert any("tpyo" in v for v in exc_info.value.violations)

    def test_badly_typed_values_aggregate(self):
        doc = tiny_doc(batch_size="big", participant_rate="most")
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(doc))
        assert any("invalid run settings" in v
                   for v in exc_info.value.violations)

    def test_malformed_json_reports_location(self):
        with pytest.raises(json.JSONDecodeError) as exc_info:
            cli.validate_config('{"seeds": [1,]}')
        assert exc_info.value.lineno == 1

    def test_fixed_eta_outside_bounds_rejected(self):
        doc = tiny_doc(modes=[{"fixed": 0.7}])
        with pytest.raises(ConfigError) as exc_info:
            cli.validate_config(json.dumps(doc))
        assert any("fixed_0.7" in v for v in exc_info.value.violations)

    def test_mode_labels(self):
        config = cli.validate_config(json.dumps(tiny_doc(
            modes=["adaptive", "fixed:0.02", {"fixed": 0.5}])))
        assert [m.label for m in config.modes] == ["adaptive", "fixed_0.02",
                                                   "fixed_0.5"]


class TestRunExperiment:
    def test_writes_expected_files(self, tmp_path):
        doc = tiny_doc(output_dir=str(tmp_path / "out"))
        config = cli.validate_config(json.dumps(doc))
        assert cli.run_experiment(config) == cli.EXIT_OK
        h = config.config_hash()
        out = tmp_path / "out"
        for mode in ("adaptive", "fixed_0.02"):
            for seed in (0, 1):
                assert (out / f"metrics_{h}_{mode}_{seed}.csv").exists()
            assert (out / f"summary_{h}_{mode}.json").exists()
        assert (out / f"comparison_{h}.csv").exists()

    def test_csv_schema_exact(self, tmp_path):
        doc = tiny_doc(output_dir=str(tmp_path))
        config = cli.validate_config(json.dumps(doc))
        cli.run_experiment(config)
        h = config.config_hash()
        header = (tmp_path / f"metrics_{h}_adaptive_0.csv").read_text().splitlines()[0]
        assert header == "t,client_id,mode,seed,accuracy,loss,s_unc,s_rep,s,eta,bbse_l1"

    def test_same_config_twice_byte_identical(self, tmp_path):
        doc = tiny_doc()
        c1 = cli.validate_config(json.dumps({**doc, "output_dir": str(tmp_path / "a")}))
        c2 = cli.validate_config(json.dumps({**doc, "output_dir": str(tmp_path / "b")}))
        cli.run_experiment(c1)
        cli.run_experiment(c2)
        f1 = sorted((tmp_path / "a").glob("metrics_*.csv"))
        f2 = sorted((tmp_path / "b").glob("metrics_*.csv"))
        assert f1 and len(f1) == len(f2)
        for a, b in zip(f1, f2):
            assert a.read_bytes() == b.read_bytes()

    def test_worker_pool_matches_serial(self, tmp_path):
        doc = tiny_doc()
        c1 = cli.validate_config(json.dumps({**doc, "output_dir": str(tmp_path / "s")}))
        c2 = cli.validate_config(json.dumps({**doc, "output_dir": str(tmp_path / "p")}))
        cli.run_experiment(c1, workers=1)
        cli.run_experiment(c2, workers=2)
        for a in sorted((tmp_path / "s").glob("*.csv")):
            b = tmp_path / "p" / a.name
            assert a.read_bytes() == b.read_bytes()

    def test_summary_fields(self, tmp_path):
        doc = tiny_doc(output_dir=str(tmp_path))
        config = cli.validate_config(json.dumps(doc))
        cli.run_experiment(config)
        h = config.config_hash()
        summary = json.loads((tmp_path / f"summary_{h}_adaptive.json").read_text())
        for key in ("mean_accuracy", "final_accuracy", "mean_eta", "cum_S",
                    "std_accuracy", "per_seed"):
            assert key in summary
        assert summary["seeds"] == [0, 1]

    def test_unwritable_output_dir(self, tmp_path):
        target = tmp_path / "blocked"
        target.write_text("a file, not a directory")
        doc = tiny_doc(output_dir=str(target))
        config = cli.validate_config(json.dumps(doc))
        assert cli.run_experiment(config) == cli.EXIT_IO

    def test_signals_csv_when_diagnostics_enabled(self, tmp_path):
        doc = tiny_doc(output_dir=str(tmp_path), emit_oracle_diagnostics=True,
                       seeds=[0], modes=["adaptive"])
        config = cli.validate_config(json.dumps(doc))
        cli.run_experiment(config)
        h = config.config_hash()
        sig = tmp_path / f"signals_{h}_adaptive_0.csv"
        assert sig.exists()
        header = sig.read_text().splitlines()[0]
        assert header.startswith("t,client_id,s_unc,s_rep,s,eta,l1_to_true_prior")


class TestMainEntry:
    def test_validate_subcommand(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(tiny_doc()))
        assert cli.main(["validate", "--config", str(cfg)]) == cli.EXIT_OK
        echo = json.loads(capsys.readouterr().out)
        assert echo["modes"] == ["adaptive", "fixed_0.02"]

    def test_validate_bad_config_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seeds": []}')
        assert cli.main(["validate", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_run_and_report_roundtrip(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        out = tmp_path / "out"
        cfg.write_text(json.dumps(tiny_doc(seeds=[0])))
        assert cli.main(["run", "--config", str(cfg),
                         "--out", str(out)]) == cli.EXIT_OK
        capsys.readouterr()
        assert cli.main(["report", "--in", str(out)]) == cli.EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "mode,mean_accuracy,rows"
        assert len(lines) == 3

    def test_missing_config_file(self, capsys):
        assert cli.main(["run", "--config", "/nonexistent.json"]) == cli.EXIT_IO
