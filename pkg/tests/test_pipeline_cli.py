import csv
import json
import shutil
import subprocess
import sys

import filelock
import numpy as np
import pytest

from dodfatlas import io
from dodfatlas.cli import main
from dodfatlas.errors import DegenerateDesignError, ValidationError
from dodfatlas.phantom import PhantomSpec, write_phantom
from dodfatlas.pipeline import PipelineConfig, StageFailure, pipeline_run


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    manifest = write_phantom(PhantomSpec(n_subjects=3, warp_degrees=5.0), root)
    (root / "config.json").write_text(json.dumps({"labels": "labels.nii.gz", "mask": "mask.nii.gz", "track": True}))
    return root, manifest


@pytest.fixture(scope="module")
def first_run(dataset, tmp_path_factory):
    root, manifest = dataset
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "--manifest", str(manifest), "--config", str(root / "config.json"), "--out", str(out)])
    return out, code


def digests(out):
    return {str(p.relative_to(out)): io.file_digest(p) for p in sorted(out.rglob("*")) if p.is_file()
            and p.name not in ("run_report.json", ".lock")}


class TestRun:
    def test_outputs(self, first_run):
        out, code = first_run
        assert code == 0
        report = json.loads((out / "run_report.json").read_text())
        assert report["status"] == "ok"
        assert [s["stage"] for s in report["stages"]] == ["sh", "average", "lme", "maps", "track", "trends"]
        assert set(report["versions"]) >= {"python", "numpy"} and report["config"]["lam"] == 0.006
        for rel in ("atlas/metadata.json", "atlas/average_odf.nii.gz", "maps/r2.nii.gz", "maps/gfa_12mo.nii.gz",
                    "tracks/streamlines.dstl", "tracks/streamlines.txt", "trends/roi_trends.csv"):
            assert (out / rel).exists(), rel
        atlas, r2 = io.load_atlas(out / "atlas")
        assert len(atlas.subjects) == 3 and r2.shape == atlas.dims
        rows = list(csv.DictReader(open(out / "trends" / "roi_trends.csv")))
        assert {r["roi_name"] for r in rows} == {"genu", "body", "splenium"} and len(rows) == 3 * 34

    def test_rerun_skips_everything(self, dataset, first_run):
        root, manifest = dataset
        out, _ = first_run
        before = digests(out)
        cfg = PipelineConfig.load(root / "config.json")
        report = pipeline_run(manifest, cfg, out)
        assert all(s["skipped"] for s in report["stages"])
        assert digests(out) == before

    def test_changed_config_reruns_downstream_only(self, dataset, first_run, tmp_path):
        root, manifest = dataset
        out = tmp_path / "copy"
        shutil.copytree(first_run[0], out)
        cfg = PipelineConfig.load(root / "config.json")
        cfg.gfa_ages = (6.0,)
        report = pipeline_run(manifest, cfg, out)
        ran = {s["stage"] for s in report["stages"] if not s["skipped"]}
        assert ran == {"maps"}
        assert (out / "maps" / "gfa_6mo.nii.gz").exists()

    def test_locked_directory(self, dataset, tmp_path):
        root, manifest = dataset
        out = tmp_path / "locked"
        out.mkdir()
        with filelock.FileLock(str(out / ".lock")):
            code = main(["run", "--manifest", str(manifest), "--out", str(out)])
        assert code == 4


def test_single_subject_fails_at_lme(dataset, tmp_path):
    root, manifest = dataset
    m = io.parse_manifest(manifest)
    one = tmp_path / "one.json"
    io.write_manifest(one, [s for s in m.sessions if s.subject == m.subjects[0]])
    out = tmp_path / "out"
    with pytest.raises(StageFailure) as err:
        pipeline_run(one, PipelineConfig(), out)
    assert err.value.stage == "lme" and isinstance(err.value.cause, DegenerateDesignError)
    report = json.loads((out / "run_report.json").read_text())
    assert report["status"] == "failed" and report["failed_stage"] == "lme"
    assert (out / "atlas" / "average_odf.nii.gz").exists()
    assert len(list((out / "sh").glob("*_odf.nii.gz"))) == sum(s.subject == m.subjects[0] for s in m.sessions)
    assert main(["run", "--manifest", str(one), "--out", str(tmp_path / "out2")]) == 3


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="unknown"):
            PipelineConfig.from_dict({"lmax": 6, "colour": "red"})

    def test_lambda_alias_and_grid(self):
        cfg = PipelineConfig.from_dict({"lambda": 0.01, "t-step": 0.5, "t_stop": 4.0})
        assert cfg.lam == 0.01 and np.allclose(cfg.t_grid(), [3.0, 3.5, 4.0])

    @pytest.mark.parametrize("bad", [{"lmax": 5}, {"threads": 0}, {"max_angle": 95}, {"t_start": 40}])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            PipelineConfig.from_dict(bad)


class TestExitCodes:
    def test_validation_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"subjects": [{"id": "a", "sessions": [{"id": "1"}]}]}))
        assert main(["run", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")]) == 2

    def test_validation_missing_option(self, tmp_path):
        assert main(["fit-sh", "--dwi", "x", "--bval", "y", "--bvec", "z"]) == 2

    def test_validation_flag_value(self, dataset, tmp_path):
        root, _ = dataset
        args = ["fit-sh", "--dwi", str(next((root / "dwi").iterdir())), "--bval", str(root / "dwi.bval"),
                "--bvec", str(root / "dwi.bvec"), "--lmax", "5", "--out", str(tmp_path / "f.nii.gz")]
        assert main(args) == 2

    def test_io_missing_file(self, tmp_path):
        assert main(["scalars", "--dwi", str(tmp_path / "x.nii.gz"), "--bval", "b", "--bvec", "c",
                     "--out", str(tmp_path)]) == 4

    def test_io_corrupt_volume(self, dataset, tmp_path):
        root, _ = dataset
        bad = tmp_path / "bad.nii"
        bad.write_bytes(b"\x00" * 100)
        assert main(["scalars", "--dwi", str(bad), "--bval", str(root / "dwi.bval"), "--bvec",
                     str(root / "dwi.bvec"), "--out", str(tmp_path)]) == 4

    def test_numerical(self, dataset, tmp_path):
        # twelve gradient directions cannot support an unregularized order-6 fit
        root, _ = dataset
        dwi = io.load_dwi(next((root / "dwi").iterdir()), root / "dwi.bval", root / "dwi.bvec")
        keep = np.r_[0, 1:13]
        io.save_nifti(tmp_path / "d.nii.gz", dwi.data[..., keep].astype(np.float32))
        (tmp_path / "d.bval").write_text(" ".join(f"{b:g}" for b in dwi.scheme.bvals[keep]) + "\n")
        vecs = np.vstack([np.zeros(3), dwi.scheme.dirs[:12]]).T
        (tmp_path / "d.bvec").write_text("\n".join(" ".join(f"{v:.8f}" for v in row) for row in vecs) + "\n")
        args = ["fit-sh", "--dwi", str(tmp_path / "d.nii.gz"), "--bval", str(tmp_path / "d.bval"),
                "--bvec", str(tmp_path / "d.bvec"), "--lambda", "0", "--out", str(tmp_path / "f.nii.gz")]
        with pytest.warns(UserWarning):
            assert main(args) == 3


class TestCommands:
    def test_single_volume_commands(self, dataset, first_run, tmp_path, capsys):
        root, _ = dataset
        out, _ = first_run
        dwi = str(next((root / "dwi").iterdir()))
        common = ["--bval", str(root / "dwi.bval"), "--bvec", str(root / "dwi.bvec")]
        assert main(["fit-sh", "--dwi", dwi, *common, "--mask", str(root / "mask.nii.gz"),
                     "--out", str(tmp_path / "sig.nii.gz")]) == 0
        assert main(["odf", "--sh", str(tmp_path / "sig.nii.gz"), "--out", str(tmp_path / "odf.nii.gz")]) == 0
        assert io.load_sh_field(tmp_path / "odf.nii.gz").kind == "odf"
        assert main(["gfa-map", "--sh", str(tmp_path / "odf.nii.gz"), "--out", str(tmp_path / "g.nii.gz")]) == 0
        assert main(["scalars", "--dwi", dwi, *common, "--out", str(tmp_path / "sc")]) == 0
        capsys.readouterr()
        assert main(["ncc-matrix", "--scalars-dir", str(tmp_path / "sc"), "--mask", str(root / "mask.nii.gz")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["names"] == ["fa", "md", "rd", "ad", "baseline"]
        assert main(["atlas-eval", "--atlas", str(out / "atlas"), "--age", "12", "--out", str(tmp_path / "a.nii.gz")]) == 0
        assert main(["atlas-eval", "--atlas", str(out / "atlas"), "--age", "99", "--out", str(tmp_path / "b.nii.gz")]) == 2
        assert main(["r2-map", "--atlas", str(out / "atlas"), "--out", str(tmp_path / "r2.nii.gz")]) == 0
        assert main(["roi-trends", "--atlas", str(out / "atlas"), "--labels", str(root / "labels.nii.gz"),
                     "--no-subjects", "--out", str(tmp_path / "t.csv")]) == 0
        assert (tmp_path / "t.csv").read_text().splitlines()[1].startswith("1,genu,3.0,")

    def test_warp_apply_and_track(self, dataset, tmp_path, capsys):
        root, _ = dataset
        assert main(["phantom", "--kind", "tube", "--out", str(tmp_path / "tube")]) == 0
        capsys.readouterr()
        assert main(["track", "--sh", str(tmp_path / "tube" / "odf.nii.gz"), "--out", str(tmp_path / "t.dstl"),
                     "--text", str(tmp_path / "t.txt"), "--threads", "2"]) == 0
        n = json.loads(capsys.readouterr().out)["streamlines"]
        assert n > 0 and len(io.read_streamlines(tmp_path / "t.dstl")[0]) == n
        warp = next((root / "warps").iterdir())
        m = io.parse_manifest(root / "manifest.json")
        entry = next(s for s in m.sessions if s.warp == warp)
        assert main(["warp-apply", "--dwi", str(entry.dwi), "--bval", str(entry.bval), "--bvec", str(entry.bvec),
                     "--warp", str(warp), "--out", str(tmp_path / "w.nii.gz")]) == 0

    def test_lme_fit_command(self, dataset, tmp_path):
        root, manifest = dataset
        assert main(["lme-fit", "--manifest", str(manifest), "--mask", str(root / "mask.nii.gz"),
                     "--out", str(tmp_path / "atlas")]) == 0
        assert io.load_atlas(tmp_path / "atlas")[0].mask.any()

    def test_console_script_help(self):
        res = subprocess.run([sys.executable, "-m", "dodfatlas.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "run" in res.stdout
