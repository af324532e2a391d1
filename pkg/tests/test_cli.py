"""End-to-end driver tests: artifacts, exit codes, reproducibility.

All invocations go through main(argv) in-process so exit codes and
stderr text are pinned exactly as a shell would see them.
"""

import json
import os

import numpy as np
import pytest
import yaml

import splatphys.cli as cli
from splatphys.cli import main
from splatphys.config import parse_config
from splatphys.pointset import load_ply

PULSE = ["--in", "builtin:pulse-cube"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def frame_files(dirname):
    return sorted(f for f in os.listdir(dirname)
                  if f.startswith("frame_") and f.endswith(".ply"))


class TestFill:
    def test_artifacts(self, tmp_path, capsys):
        code, out, _ = run(capsys, "fill", *PULSE,
                           "--out-dir", str(tmp_path))
        assert code == 0
        filled = load_ply(tmp_path / "filled.ply")
        assert len(filled) == 5000          # density 0: input passes through
        assert set(np.unique(filled.labels)) == {0}
        meta = json.loads((tmp_path / "filled.labels.json").read_text())
        assert meta["instances"] == 1
        assert meta["points_per_label"] == {"0": 5000}
        assert "1 instance(s)" in out

    def test_out_flag_overrides_path(self, tmp_path, capsys):
        target = tmp_path / "deep" / "cloud.ply"
        code, _, _ = run(capsys, "fill", *PULSE,
                         "--out-dir", str(tmp_path), "--out", str(target))
        assert code == 0
        assert target.exists()
        assert (tmp_path / "deep" / "cloud.labels.json").exists()


class TestSimulate:
    def test_frames_and_snapshots(self, tmp_path, capsys):
        code, _, _ = run(capsys, "simulate", *PULSE, "--frames", "3",
                         "--out-dir", str(tmp_path))
        assert code == 0
        assert len(frame_files(tmp_path)) == 3
        with np.load(tmp_path / "snapshots.npz") as snap:
            assert snap["frames"].tolist() == [0, 1, 2]
            assert snap["frame_000_x"].shape == (5000, 3)
            assert snap["frame_002_F"].shape == (5000, 3, 3)
            assert snap["frame_001_label"].shape == (5000,)

    def test_snapshot_frames_flag(self, tmp_path, capsys):
        code, _, _ = run(capsys, "simulate", *PULSE, "--frames", "4",
                         "--snapshot-frames", "0,3",
                         "--out-dir", str(tmp_path))
        assert code == 0
        with np.load(tmp_path / "snapshots.npz") as snap:
            assert snap["frames"].tolist() == [0, 3]


class TestOptimize:
    def test_audit_and_materials(self, tmp_path, capsys):
        code, out, _ = run(capsys, "optimize", *PULSE, "--frames", "3",
                           "--iterations", "2", "--out-dir", str(tmp_path))
        assert code == 0
        lines = (tmp_path / "audit.jsonl").read_text().splitlines()
        assert len(lines) == 2              # one label, two iterations
        recs = [json.loads(ln) for ln in lines]
        keys = {"iteration", "label", "young_before", "stress_norm",
                "distance", "eta", "update", "young_after", "suppressed",
                "clamped"}
        assert all(set(r) == keys for r in recs)
        assert [r["iteration"] for r in recs] == [0, 1]
        assert recs[1]["young_before"] == recs[0]["young_after"]
        mats = yaml.safe_load((tmp_path / "materials.yaml").read_text())
        young = np.exp(mats["materials"][0]["log_young"])
        assert young == pytest.approx(recs[1]["young_after"], rel=1e-12)
        assert young < 3e8                  # stiff init must soften
        assert "label 0: young" in out

    def test_report_flag(self, tmp_path, capsys):
        rep = tmp_path / "trace.jsonl"
        code, _, _ = run(capsys, "optimize", *PULSE, "--frames", "3",
                         "--iterations", "1", "--out-dir", str(tmp_path),
                         "--report", str(rep))
        assert code == 0
        assert len(rep.read_text().splitlines()) == 1


class TestPipeline:
    def test_artifact_set(self, tmp_path, capsys):
        cfg_path = tmp_path / "run.yaml"
        cfg_path.write_text(yaml.safe_dump({
            "input": "builtin:pulse-cube",
            "output_dir": str(tmp_path / "out"),
            "sim": {"frames": 3},
            "bgdo": {"iterations": 1},
        }))
        code, out, _ = run(capsys, "pipeline", "--config", str(cfg_path))
        assert code == 0
        out_dir = tmp_path / "out"
        assert len(frame_files(out_dir / "frames")) == 3
        assert len((out_dir / "audit.jsonl").read_text().splitlines()) == 1
        mats = yaml.safe_load((out_dir / "materials.yaml").read_text())
        assert 0 in mats["materials"]
        report = (out_dir / "report.txt").read_text().splitlines()
        assert [ln.split()[0] for ln in report] \
            == ["stage", "fill", "forward", "optimize", "final", "total"]
        resolved = parse_config(out_dir / "config.resolved.yaml")
        assert resolved == parse_config(cfg_path)
        assert "pipeline done: 3 frames" in out

    def test_byte_identical_reruns(self, tmp_path, capsys):
        doc = {"input": "builtin:pulse-cube", "sim": {"frames": 3},
               "bgdo": {"iterations": 1}, "seed": 5}
        outs = []
        for tag in ("a", "b"):
            cfg_path = tmp_path / f"{tag}.yaml"
            cfg_path.write_text(yaml.safe_dump(
                {**doc, "output_dir": str(tmp_path / tag)}))
            code, _, _ = run(capsys, "pipeline", "--config", str(cfg_path))
            assert code == 0
            outs.append(tmp_path / tag)
        a, b = outs
        names = frame_files(a / "frames")
        assert names == frame_files(b / "frames")
        for name in names:
            assert (a / "frames" / name).read_bytes() \
                == (b / "frames" / name).read_bytes()
        assert (a / "audit.jsonl").read_bytes() \
            == (b / "audit.jsonl").read_bytes()
        assert (a / "materials.yaml").read_bytes() \
            == (b / "materials.yaml").read_bytes()


class TestFailureModes:
    def test_unknown_config_key(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("input: builtin:pulse-cube\noutput_dir: o\n"
                     "fill:\n  radiuss: 0.1\n")
        code, _, err = run(capsys, "simulate", "--config", str(p))
        assert code == 2
        assert "error [config]" in err and "'fill.radiuss'" in err

    def test_invariant_violation_names_the_invariant(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump({
            "input": "builtin:pulse-cube", "output_dir": "o",
            "materials": {0: {"density": 1000, "poisson": 0.6,
                              "young": 1e5}}}))
        code, _, err = run(capsys, "simulate", "--config", str(p))
        assert code == 2
        assert "poisson must be in (0, 0.5)" in err

    def test_missing_material_leaves_no_frames(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump({
            "input": "builtin:shell-pair",
            "output_dir": str(tmp_path / "out"),
            "sim": {"frames": 2},
            "materials": {0: {"preset": "jelly"}}}))
        code, _, err = run(capsys, "simulate", "--config", str(p))
        assert code == 2
        assert "materials missing for labels [1]" in err
        out_dir = tmp_path / "out"
        assert not out_dir.exists() or frame_files(out_dir) == []

    def test_missing_input_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "fill", "--in",
                           str(tmp_path / "nope.ply"),
                           "--out-dir", str(tmp_path))
        assert code == 2
        assert "error [input]" in err and "cannot read input" in err

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate",
                           "--config", str(tmp_path / "absent.yaml"))
        assert code == 2
        assert "error [config]" in err

    def test_cfl_violation_is_config_class(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", *PULSE, "--frames", "2",
                           "--dt", "0.1", "--out-dir", str(tmp_path))
        assert code == 2
        assert "CFL" in err and "0.1" in err
        assert frame_files(tmp_path) == [] if tmp_path.exists() else True

    def test_runtime_failure_maps_to_exit_3(self, tmp_path, capsys,
                                            monkeypatch):
        def boom(*a, **kw):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(cli, "run_pipeline", boom)
        code, _, err = run(capsys, "pipeline", *PULSE,
                           "--out-dir", str(tmp_path))
        assert code == 3
        assert "error [pipeline] disk on fire" in err

    def test_missing_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
