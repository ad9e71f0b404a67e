import json
from pathlib import Path

import numpy as np
import pytest

from spinmech import __version__
from spinmech.cli import OUT_ENV, main
from spinmech.config import ConfigError, parse_scenario
from spinmech.units import MHz_per_GPa

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, text, name="scenario.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _err(capsys):
    return json.loads(capsys.readouterr().err)


class TestParse:
    def test_defaults(self):
        sc = parse_scenario('kind = "resonances"\n[stress]\npressure_GPa = 1.0\n')
        p = sc.susceptibility.params()
        got = np.array([p.a1, p.a2, p.b, p.c]) / MHz_per_GPa
        assert got == pytest.approx([4.86, -3.7, -2.3, 3.5], rel=1e-12)

    def test_negative_pressure(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario('kind = "resonances"\n[stress]\npressure_GPa = -1\n')
        assert "pressure_GPa" in info.value.key

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario('kind = "resonances"\n[stress]\npresure_GPa = 1.0\n')
        assert "presure_GPa" in str(info.value)

    def test_syntax_error_location(self):
        with pytest.raises(ConfigError) as info:
            parse_scenario('kind = "resonances"\n[stress\n')
        assert info.value.line == 2

    def test_noise_needs_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_scenario((CONFIGS / "force-map.toml").read_text().replace("seed = 11\n", ""))

    def test_kind_mismatch(self):
        with pytest.raises(ConfigError):
            parse_scenario((CONFIGS / "fig2b.toml").read_text(), kind="inertial")

    @pytest.mark.parametrize("name", ["fig1e", "fig2b", "fig2e-pipeline", "fig4c-point", "calibration-mc", "force-map"])
    def test_shipped_configs_valid(self, name):
        parse_scenario((CONFIGS / f"{name}.toml").read_text())


class TestMain:
    def test_config_error_exit_2(self, tmp_path, capsys):
        path = _write(tmp_path, 'kind = "sensitivity"\n[pillar]\nwidth_um = "thin"\n')
        assert main(["sensitivity", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert _err(capsys)["error"] == "config"
        assert not (tmp_path / "o").exists()

    def test_missing_file_exit_2(self, tmp_path, capsys):
        assert main(["sensitivity", "--config", str(tmp_path / "nope.toml")]) == 2
        assert _err(capsys)["error"] == "config"

    def test_numerical_failure_exit_3(self, tmp_path, capsys):
        path = _write(tmp_path, 'kind = "sensitivity"\n[pillar]\nnv_offset_um = 0.0\n')
        assert main(["sensitivity", "--config", path, "--out", str(tmp_path / "o")]) == 3
        err = _err(capsys)
        assert err["error"] == "numerical" and err["type"] == "NonInvertibleError"

    def test_validate_only_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["sensitivity", "--config", str(CONFIGS / "fig2b.toml"), "--out", str(out), "--validate-only"]) == 0
        assert json.loads(capsys.readouterr().out)["valid"]
        assert not out.exists()

    def test_sensitivity_outputs(self, tmp_path):
        out = tmp_path / "o"
        assert main(["sensitivity", "--config", str(CONFIGS / "fig2b.toml"), "--out", str(out)]) == 0
        res = json.loads((out / "sensitivity.json").read_text())
        assert res["eta_dc_pN_per_rtHz"] == pytest.approx(100, rel=0.1)
        lines = (out / "crossover.csv").read_text().splitlines()
        assert lines[0] == "w_um,h_um,gradB_mT_per_um" and len(lines) == 65

    def test_manifest(self, tmp_path):
        out = tmp_path / "o"
        main(["force-map", "--config", str(CONFIGS / "force-map.toml"), "--out", str(out), "--seed", "5"])
        m = json.loads((out / "run_manifest.json").read_text())
        assert m["seed"] == 5 and m["version"] == __version__ and m["kind"] == "force_map"
        assert len(m["config_sha256"]) == 64 and m["wall_time_s"] >= 0
        assert set(m["outputs"]) == {p.name for p in out.iterdir()} - {"run_manifest.json"}

    @pytest.mark.parametrize("cmd,name", [("force-map", "force-map"), ("inertial", "fig4c-point"), ("calibrate", "fig2e-pipeline")])
    def test_deterministic(self, tmp_path, cmd, name):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            assert main([cmd, "--config", str(CONFIGS / f"{name}.toml"), "--out", str(d)]) == 0
        files = sorted(p.name for p in dirs[0].iterdir() if p.name != "run_manifest.json")
        for f in files:
            assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()

    def test_seed_override_changes_noise(self, tmp_path):
        for s in ("1", "2"):
            main(["force-map", "--config", str(CONFIGS / "force-map.toml"), "--out", str(tmp_path / s), "--seed", s])
        assert (tmp_path / "1" / "pixels.csv").read_bytes() != (tmp_path / "2" / "pixels.csv").read_bytes()

    def test_output_dir_precedence(self, tmp_path, monkeypatch):
        cfg = (CONFIGS / "fig2b.toml").read_text().replace('dir = "out/fig2b"', f'dir = "{tmp_path / "cfg"}"')
        path = _write(tmp_path, cfg)
        main(["sensitivity", "--config", path])
        assert (tmp_path / "cfg" / "sensitivity.json").exists()
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        main(["sensitivity", "--config", path])
        assert (tmp_path / "env" / "sensitivity.json").exists()
        main(["sensitivity", "--config", path, "--out", str(tmp_path / "flag")])
        assert (tmp_path / "flag" / "sensitivity.json").exists()

    def test_no_temp_files_left(self, tmp_path):
        out = tmp_path / "o"
        main(["resonances", "--config", str(CONFIGS / "fig1e.toml"), "--out", str(out)])
        assert {p.name for p in out.iterdir()} == {"odmr.csv", "resonances.csv", "summary.json", "run_manifest.json"}

    def test_bad_seed(self, tmp_path, capsys):
        assert main(["sensitivity", "--config", str(CONFIGS / "fig2b.toml"), "--seed", "-1"]) == 2
