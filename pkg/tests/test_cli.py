"""Command-line interface: exit codes, output files, reproducibility."""

import json

import pytest

from mwdml.arrays import Shape
from mwdml.cli import _parse_shape, main
from mwdml.harness import HarnessError


def write_config(tmp_path, raw, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def location_raw(**overrides):
    raw = {
        "dgp": {"kind": "location", "params": {}},
        "nuisance": "none",
        "shapes": [[5, 4]],
        "replications": 2,
        "seed": 3,
        "oracle_mode": "off",
    }
    raw.update(overrides)
    return raw


class TestParseShape:
    def test_x_separator(self):
        assert _parse_shape("50x50") == Shape((50, 50))

    def test_comma_separator(self):
        assert _parse_shape("3,2") == Shape((3, 2))

    def test_single_dimension(self):
        assert _parse_shape("7") == Shape((7,))

    def test_garbage(self):
        with pytest.raises(HarnessError, match="cannot parse shape"):
            _parse_shape("4xa")


class TestDispatch:
    def test_no_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        capsys.readouterr()


class TestConfigErrors:
    def test_missing_config_flag(self, tmp_path, capsys):
        assert main(["--out", str(tmp_path), "simulate"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_nonexistent_config_file(self, tmp_path, capsys):
        rc = main(["--config", str(tmp_path / "nope.json"), "--out", str(tmp_path), "simulate"])
        assert rc == 2
        capsys.readouterr()

    def test_config_not_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{]")
        assert main(["--config", str(bad), "--out", str(tmp_path), "simulate"]) == 2
        capsys.readouterr()

    def test_config_fails_validation(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"dgp": {"kind": "nope"}, "shapes": [[2, 2]], "replications": 1})
        assert main(["--config", cfg, "--out", str(tmp_path), "simulate"]) == 2
        assert "config error" in capsys.readouterr().err


class TestSimulate:
    def test_writes_sample_csv(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        out = tmp_path / "out"
        out.mkdir()
        assert main(["--config", cfg, "--out", str(out), "simulate"]) == 0
        lines = (out / "sample.csv").read_text().splitlines()
        assert lines[0] == "i_1,i_2,x"
        assert len(lines) == 1 + 20
        assert "20 cells" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        main(["--config", cfg, "--out", str(a), "simulate"])
        main(["--config", cfg, "--out", str(b), "simulate"])
        assert (a / "sample.csv").read_bytes() == (b / "sample.csv").read_bytes()
        capsys.readouterr()

    def test_seed_override_changes_sample(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        main(["--config", cfg, "--out", str(a), "simulate"])
        main(["--config", cfg, "--seed", "12345", "--out", str(b), "simulate"])
        assert (a / "sample.csv").read_bytes() != (b / "sample.csv").read_bytes()
        capsys.readouterr()

    def test_shape_override(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        assert main(["--config", cfg, "--out", str(tmp_path), "simulate", "--shape", "3x3"]) == 0
        lines = (tmp_path / "sample.csv").read_text().splitlines()
        assert len(lines) == 1 + 9
        assert "9 cells" in capsys.readouterr().out


class TestPartition:
    def test_golden_3x2_interaction(self, tmp_path, capsys):
        rc = main(["--out", str(tmp_path), "partition", "--shape", "3x2", "--mask", "11"])
        assert rc == 0
        lines = (tmp_path / "partition.csv").read_text().splitlines()
        assert lines[0] == "group_id,i_1,i_2"
        assert lines[1] == "1,1,1"
        assert lines[2] == "1,2,2"
        assert len(lines) == 7
        assert "3 groups of size 2" in capsys.readouterr().out

    def test_needs_no_config(self, tmp_path, capsys):
        assert main(["--out", str(tmp_path), "partition", "--shape", "4x4", "--mask", "10"]) == 0
        capsys.readouterr()

    def test_bad_mask(self, tmp_path, capsys):
        rc = main(["--out", str(tmp_path), "partition", "--shape", "3x2", "--mask", "21"])
        assert rc == 2
        capsys.readouterr()


class TestDecompose:
    def test_writes_component_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        assert main(["--config", cfg, "--out", str(tmp_path), "decompose", "--field", "x"]) == 0
        lines = (tmp_path / "decompose.csv").read_text().splitlines()
        assert lines[0] == "mask,lattice_size,h_value"
        assert {row.split(",")[0] for row in lines[1:]} == {"10", "01", "11"}
        out = capsys.readouterr().out
        assert "max_residual" in out and "field=x" in out

    def test_unknown_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        rc = main(["--config", cfg, "--out", str(tmp_path), "decompose", "--field", "nope"])
        assert rc == 2
        assert "not in sample" in capsys.readouterr().err


class TestEstimate:
    def test_writes_estimate_json(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw(shapes=[[6, 6]]))
        assert main(["--config", cfg, "--out", str(tmp_path), "estimate"]) == 0
        text = (tmp_path / "estimate.json").read_text()
        obj = json.loads(text)
        assert obj["shape"] == [6, 6]
        assert len(obj["theta_hat"]) == 1
        assert obj["converged"] and not obj["boundary"]
        assert obj["se"][0] >= 0.0
        assert obj["ci_lo"][0] <= obj["theta_hat"][0] <= obj["ci_hi"][0]
        assert obj["level"] == 0.95
        # file is sorted/indented JSON and is also echoed to stdout
        assert text == json.dumps(obj, indent=2, sort_keys=True) + "\n"
        assert capsys.readouterr().out == text

    def test_shape_override(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        assert main(["--config", cfg, "--out", str(tmp_path), "estimate", "--shape", "8x5"]) == 0
        obj = json.loads((tmp_path / "estimate.json").read_text())
        assert obj["shape"] == [8, 5]
        capsys.readouterr()


class TestMc:
    def test_sweep_writes_reports(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw(shapes=[[4, 4], [3, 5]]))
        assert main(["--config", cfg, "--out", str(tmp_path), "mc"]) == 0
        lines = (tmp_path / "replications.csv").read_text().splitlines()
        assert lines[0] == "shape_id,rep,theta_hat_1,se_1,covered_1,flags"
        assert len(lines) == 1 + 4
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert len(summary["shapes"]) == 2
        out = capsys.readouterr().out
        assert "shape 4x4:" in out and "shape 3x5:" in out and "wrote" in out

    def test_unwritable_out_is_io_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not dir\n")
        rc = main(["--config", cfg, "--out", str(blocker / "sub"), "mc"])
        assert rc == 3
        assert "i/o error" in capsys.readouterr().err


class TestBounds:
    def test_threshold_grid_check(self, tmp_path, capsys):
        raw = location_raw()
        raw["bounds"] = {
            "field": "x",
            "thresholds": [0.0],
            "masks": ["10", "01"],
            "n_grid": [4, 8],
            "replications": 120,
            "q": 4.0,
        }
        cfg = write_config(tmp_path, raw)
        assert main(["--config", cfg, "--out", str(tmp_path), "bounds"]) == 0
        lines = (tmp_path / "bounds.csv").read_text().splitlines()
        assert lines[0] == "mask,n,lhs,lhs_se,rhs_global,rhs_local,ratio"
        assert len(lines) == 1 + 4  # 2 masks x 2 lattice sizes
        meta = json.loads((tmp_path / "bounds_meta.json").read_text())
        assert set(meta["per_mask"]) == {"10", "01"}
        for stats in meta["per_mask"].values():
            assert stats["max_ratio"] > 0.0
            assert stats["max_over_median"] >= 1.0
        out = capsys.readouterr().out
        assert "mask 10:" in out and "mask 01:" in out

    def test_missing_block(self, tmp_path, capsys):
        cfg = write_config(tmp_path, location_raw())
        assert main(["--config", cfg, "--out", str(tmp_path), "bounds"]) == 2
        assert "bounds" in capsys.readouterr().err
