import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from snspdsim.cli import main
from snspdsim.config import ConfigError, default_config_dict, load_config, parse_config
from snspdsim.tagio import read_csv_columns, read_tags, write_tags
from snspdsim.engine import TagStream

REPO_ROOT = Path(__file__).resolve().parents[1]
CSV_SCHEMAS = json.loads((REPO_ROOT / "docs" / "csv_schemas.json").read_text())["schemas"]


def small_config(tmp_path, **patches) -> Path:
    data = default_config_dict()
    data["seed"] = 7
    data["duration"] = 2e-4
    data["source"]["cw_rate"] = 2e8
    for dotted, value in patches.items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestParseConfig:
    def test_defaults_resolve(self):
        cfg = parse_config({"seed": 3})
        assert cfg.seed == 3
        assert len(cfg.wires) == 32
        assert len(cfg.discriminators) == 32
        assert cfg.wires[0].tau_reset == 6.8
        assert cfg.coupling().per_wire.sum() == pytest.approx(0.78, abs=2e-3)

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config({})

    def test_all_violations_reported(self):
        bad = {
            "seed": -1,
            "banana": 1,
            "duration": -2.0,
            "device": {"shared": {"i_detect": "ten", "mystery": 5}},
        }
        with pytest.raises(ConfigError) as err:
            parse_config(bad)
        text = "\n".join(err.value.violations)
        assert len(err.value.violations) >= 5
        assert "seed" in text
        assert "banana" in text
        assert "duration" in text
        assert "i_detect" in text
        assert "mystery" in text

    def test_relational_constraint_caught(self):
        with pytest.raises(ConfigError, match="i_detect < i_switch"):
            parse_config({"seed": 1, "device": {"shared": {"i_detect": 50.0}}})

    def test_device_overrides(self):
        cfg = parse_config({
            "seed": 1,
            "device": {"overrides": {"3": {"i_switch": 10.0, "i_latch": 10.5}}},
        })
        assert cfg.wires[3].i_switch == 10.0
        assert cfg.wires[0].i_switch == 9.15

    def test_threshold_overrides(self):
        cfg = parse_config({
            "seed": 1,
            "discriminator": {"threshold_overrides": {"14": 0.33}},
        })
        assert cfg.discriminators[14].threshold_fraction == 0.33
        assert cfg.discriminators[0].threshold_fraction == 0.25

    def test_channel_out_of_range(self):
        with pytest.raises(ConfigError, match="out of range"):
            parse_config({"seed": 1, "device": {"overrides": {"40": {"i_switch": 10.0}}}})

    def test_reference_config_file(self):
        cfg = load_config(REPO_ROOT / "configs" / "reference.json")
        assert cfg.seed == 1
        assert cfg.discriminators[14].threshold_fraction == 0.33


class TestCliSimulate:
    def test_outputs_and_columns(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "run"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        header, _ = read_csv_columns(out / "simulate_summary.csv")
        assert header == CSV_SCHEMAS["simulate_summary"]
        tags = read_tags(out / "tags.pqtg")
        assert len(tags) > 0
        assert tags.is_sorted()
        manifest = json.loads((out / "simulate_manifest.json").read_text())
        assert manifest["seed"] == 7
        assert "config_sha256" in manifest
        assert "timestamp" not in json.dumps(manifest).lower()
        # dead-time losses at 2e8 photons/s pull the estimate below the
        # low-rate system efficiency of 0.78
        assert 0.65 < manifest["results"]["sde_estimate"] < 0.79

    def test_byte_identical_reruns(self, tmp_path):
        cfg = small_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
        for name in ("tags.pqtg", "truth.pqtr", "simulate_summary.csv",
                     "simulate_manifest.json"):
            assert file_sha(out1 / name) == file_sha(out2 / name), name

    def test_seed_flag_changes_output(self, tmp_path):
        cfg = small_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", str(cfg), "--out", str(out1)])
        main(["simulate", "--config", str(cfg), "--seed", "8", "--out", str(out2)])
        assert file_sha(out1 / "tags.pqtg") != file_sha(out2 / "tags.pqtg")
        m2 = json.loads((out2 / "simulate_manifest.json").read_text())
        assert m2["seed"] == 8

    def test_crosstalk_flagged(self, tmp_path):
        cfg = small_config(tmp_path, **{"crosstalk.probability": 0.01})
        out = tmp_path / "ct"
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "simulate_manifest.json").read_text())
        assert manifest["results"]["n_crosstalk_tags"] > 0


class TestCliErrors:
    def test_bad_config_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"seed": 1, "nope": 2}))
        code = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["category"] == "config"
        assert any("nope" in v for v in err["error"]["violations"])

    def test_missing_tags_exit_3(self, tmp_path, capsys):
        code = main(["report", "--tags", str(tmp_path / "missing.pqtg"),
                     "--out", str(tmp_path / "o")])
        assert code == 3
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "io"

    def test_analysis_error_exit_4(self, tmp_path, capsys):
        cfg = small_config(tmp_path, duration=2e-5)
        out = tmp_path / "run"
        main(["simulate", "--config", str(cfg), "--out", str(out)])
        code = main(["analyze-deadtime", "--config", str(cfg),
                     "--tags", str(out / "tags.pqtg"), "--channel", "0",
                     "--out", str(tmp_path / "dt")])
        assert code == 4
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "analysis"

    def test_usage_error_exit_5(self, tmp_path, capsys):
        cfg = small_config(tmp_path)
        out = tmp_path / "run"
        main(["simulate", "--config", str(cfg), "--out", str(out)])
        code = main(["analyze-jitter", "--tags", str(out / "tags.pqtg"),
                     "--reference", "truth", "--out", str(tmp_path / "j")])
        assert code == 5
        assert json.loads(capsys.readouterr().err)["error"]["category"] == "usage"


@pytest.fixture(scope="module")
def sim_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    # Band-limited readout (pulse fall below tau_reset) keeps the
    # inter-arrival rising edge shaped by the efficiency recovery, and a
    # moderate per-wire rate keeps the exponential gap decay mild.
    cfg = small_config(tmp, duration=4e-3, **{
        "source.cw_rate": 1e8,
        "device.shared.tau_fall": 2.3,
    })
    out = tmp / "run"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestCliAnalysis:

    def test_analyze_deadtime(self, sim_run, tmp_path):
        cfg, run = sim_run
        out = tmp_path / "dt"
        assert main(["analyze-deadtime", "--config", str(cfg), "--tags",
                     str(run / "tags.pqtg"), "--channel", "16",
                     "--out", str(out)]) == 0
        header, _ = read_csv_columns(out / "interarrival_histogram.csv")
        assert header == CSV_SCHEMAS["histogram"]
        res = json.loads((out / "analyze_deadtime_manifest.json").read_text())["results"]
        assert res["tau_reset_fit_ns"] == pytest.approx(6.8, abs=0.7)
        assert res["observed_dead_time_ps"] > 5000

    def test_analyze_jitter(self, sim_run, tmp_path):
        cfg, run = sim_run
        out = tmp_path / "jit"
        assert main(["analyze-jitter", "--tags", str(run / "tags.pqtg"),
                     "--truth", str(run / "truth.pqtr"), "--reference", "truth",
                     "--out", str(out)]) == 0
        res = json.loads((out / "analyze_jitter_manifest.json").read_text())["results"]
        assert 15.0 < res["fwhm_ps"] < 40.0
        assert res["fw1pm_ps"] > res["fwhm_ps"] * 2.0

    def test_analyze_pcr(self, sim_run, tmp_path):
        cfg, run = sim_run
        out = tmp_path / "pcr"
        assert main(["analyze-pcr", "--config", str(cfg), "--channel", "16",
                     "--out", str(out)]) == 0
        header, body = read_csv_columns(out / "pcr_curve.csv")
        assert header == CSV_SCHEMAS["pcr_curve"]
        res = json.loads((out / "analyze_pcr_manifest.json").read_text())["results"]
        assert res["i_detect_fit_ua"] == pytest.approx(6.0, rel=0.02)
        assert res["sigma_fit_ua"] == pytest.approx(0.35, rel=0.02)

    def test_walk_roundtrip_cli(self, sim_run, tmp_path):
        cfg, run = sim_run
        cal_dir = tmp_path / "cal"
        assert main(["calibrate-walk", "--config", str(cfg),
                     "--tags", str(run / "tags.pqtg"),
                     "--truth", str(run / "truth.pqtr"),
                     "--reference", "truth", "--order", "2",
                     "--out", str(cal_dir)]) == 0
        corr_dir = tmp_path / "corr"
        assert main(["apply-walk", "--tags", str(run / "tags.pqtg"),
                     "--calibration", str(cal_dir / "walk_calibration.json"),
                     "--out", str(corr_dir)]) == 0
        corrected = read_tags(corr_dir / "corrected.pqtg")
        original = read_tags(run / "tags.pqtg")
        assert len(corrected) == len(original)
        assert corrected.is_sorted()

    def test_report(self, sim_run, tmp_path):
        _, run = sim_run
        out = tmp_path / "rep"
        assert main(["report", "--tags", str(run / "tags.pqtg"),
                     "--out", str(out)]) == 0
        header, body = read_csv_columns(out / "report.csv")
        assert header == CSV_SCHEMAS["report"]
        assert body.shape[0] == 32

    def test_report_empty_file(self, tmp_path):
        empty = tmp_path / "empty.pqtg"
        write_tags(empty, TagStream.empty())
        out = tmp_path / "rep0"
        assert main(["report", "--tags", str(empty), "--out", str(out)]) == 0
        res = json.loads((out / "report_manifest.json").read_text())["results"]
        assert res["n_tags"] == 0


class TestCliCompose:
    def test_compose_array_jitter(self, tmp_path):
        from snspdsim.analysis import Histogram
        from snspdsim.tagio import write_histogram_csv

        lib_dir = tmp_path / "irfs"
        lib_dir.mkdir()
        edges = np.arange(-100.0, 300.5, 0.5)
        centers = 0.5 * (edges[:-1] + edges[1:])
        rates, names = [], []
        for i, (rate, sigma) in enumerate([(1e6, 9.0), (1e7, 12.0), (3e7, 18.0)]):
            counts = 1e6 * np.exp(-0.5 * (centers / sigma) ** 2)
            write_histogram_csv(lib_dir / f"irf{i}.csv", Histogram(edges, counts))
            rates.append(rate)
            names.append(f"irf{i}.csv")
        lib = lib_dir / "library.json"
        lib.write_text(json.dumps({"rates_cps": rates, "histograms": names}))
        cfg = small_config(tmp_path)
        out = tmp_path / "composed"
        assert main(["compose-array-jitter", "--config", str(cfg),
                     "--array-rate", "2.5e8", "--irf-library", str(lib),
                     "--out", str(out)]) == 0
        header, _ = read_csv_columns(out / "composed_jitter_histogram.csv")
        assert header == CSV_SCHEMAS["histogram"]
        res = json.loads((out / "compose_array_jitter_manifest.json").read_text())["results"]
        assert 9.0 * 2.3 < res["fwhm_ps"] < 18.0 * 2.4
        assert len(res["wire_rates_cps"]) == 32
        assert sum(res["wire_rates_cps"]) == pytest.approx(2.5e8, rel=1e-5)

    def test_analyze_jitter_sync(self, tmp_path):
        cfg = small_config(tmp_path, **{
            "source.kind": "pulsed",
            "source.rep_rate": 5e6,
            "source.mean_photons_per_pulse": 0.3,
            "source.pulse_sigma": 0.5,
            "duration": 2e-3,
        })
        run = tmp_path / "run"
        assert main(["simulate", "--config", str(cfg), "--out", str(run)]) == 0
        out = tmp_path / "jit"
        assert main(["analyze-jitter", "--tags", str(run / "tags.pqtg"),
                     "--reference", "sync", "--config", str(cfg),
                     "--out", str(out)]) == 0
        res = json.loads((out / "analyze_jitter_manifest.json").read_text())["results"]
        assert 15.0 < res["fwhm_ps"] < 40.0


class TestCliMcrSweep:
    def test_analyze_mcr(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "mcr"
        assert main(["analyze-mcr", "--config", str(cfg), "--points", "25",
                     "--out", str(out)]) == 0
        header, _ = read_csv_columns(out / "mcr_array_curve.csv")
        assert header == CSV_SCHEMAS["rate_curve"]
        header, body = read_csv_columns(out / "mcr_summary.csv")
        assert header == CSV_SCHEMAS["mcr_summary"]
        assert body.shape[0] == 33  # 32 wires + array row
        res = json.loads((out / "analyze_mcr_manifest.json").read_text())["results"]
        assert res["array_mcr_cps"] == pytest.approx(1.53e9, rel=0.1)
        assert res["wire_mcr_cps"] == pytest.approx(62.7e6, rel=0.1)

    def test_sweep_kinetic_inductance(self, tmp_path):
        cfg = small_config(tmp_path)
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(cfg),
                     "--param", "device.shared.l_kinetic",
                     "--values", "430,680", "--points", "17",
                     "--out", str(out)]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0].split(",") == CSV_SCHEMAS["sweep"]
        rows = [line.split(",") for line in lines[1:]]
        assert [r[0] for r in rows] == ["device.shared.l_kinetic"] * 2
        taus = [float(r[2]) for r in rows]
        mcrs = [float(r[5]) for r in rows]
        assert taus[0] == pytest.approx(4.3) and taus[1] == pytest.approx(6.8)
        assert mcrs[0] > mcrs[1]
