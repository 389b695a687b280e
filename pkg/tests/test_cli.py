import csv
import io
import json

import numpy as np
import pytest

from radiofield.cli import EXIT_CAP, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from radiofield.dataset import load_dataset
from radiofield.trainer import trainer_from_checkpoint

TINY = """\
preset: desk
sampler.m: 8
network.trunk_width: 16
network.head_width: 16
network.feature_width: 8
trainer.receivers_per_iter: 4
trainer.eval_every: 10
trainer.val_receivers: 4
trainer.warmup_iters: 5
trainer.checkpoint_every: 10
"""

GEN = ["gen-data", "--room", "4x3x2.5", "--tx", "1,1.2,1.4", "--n", "40", "--seed", "7", "--negatives", "3",
       "--prune-db", "20"]


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A generated dataset and a short training run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    assert main(GEN + ["--out", str(root / "data")]) == EXIT_OK
    args = ["train", "--config", str(root / "tiny.yaml"), "--dataset", str(root / "data" / "dataset.rfds"),
            "--max-iters", "20", "--out", str(root / "run")]
    assert main(args) == EXIT_CAP
    return root


class TestGenData:
    def test_manifest_echoes_parameters(self, workdir):
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        p = manifest["parameters"]
        assert p["room"] == [4.0, 3.0, 2.5] and p["tx"] == [1.0, 1.2, 1.4]
        assert p["n"] == 40 and p["seed"] == 7 and p["negatives"] == 3 and p["material"] == "gypsum"
        assert p["fc"] == 2.4e9 and p["max_order"] == 3 and p["min_relative_power_db"] == 20.0
        assert manifest["n_samples"] == 40 and sum(manifest["splits"].values()) == 40

    def test_preset_example(self, tmp_path):
        assert main(["gen-data", "--preset", "scene-a", "--n", "5", "--seed", "7", "--out", str(tmp_path)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["parameters"]["room"] == [8.0, 5.0, 3.0] and manifest["seed"] == 7

    def test_rerun_byte_identical(self, workdir, tmp_path):
        assert main(GEN + ["--out", str(tmp_path)]) == EXIT_OK
        for name in ("dataset.rfds", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (workdir / "data" / name).read_bytes()

    @pytest.mark.parametrize("extra", [["--n", "0"], ["--room", "4x3"], ["--room", "4x-3x2"], ["--material", "cheese"],
                                       ["--tx", "9,1,1"], ["--max-order", "7"], ["--fc", "-1"]])
    def test_usage_errors(self, extra, tmp_path, capsys):
        assert main(GEN + extra + ["--out", str(tmp_path)]) == EXIT_USAGE
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "dataset.rfds").exists()

    def test_paths_csv(self, tmp_path):
        assert main(GEN + ["--out", str(tmp_path), "--paths-csv"]) == EXIT_OK
        assert (tmp_path / "dataset_paths.csv").exists()

    def test_name_cannot_escape_out(self, tmp_path):
        assert main(GEN + ["--out", str(tmp_path / "o"), "--name", "../x.rfds"]) == EXIT_USAGE
        assert not (tmp_path / "x.rfds").exists()


class TestTrain:
    def test_outputs(self, workdir):
        run = workdir / "run"
        assert {p.name for p in run.iterdir()} == {"checkpoint.rfck", "train_log.csv", "config.yaml"}
        lines = (run / "train_log.csv").read_text().splitlines()
        assert lines[0].startswith("# flags:") and lines[2].startswith("iteration,train_loss_db")
        assert len(lines) == 3 + 20

    def test_ablation_flags_logged(self, workdir, tmp_path):
        args = ["train", "--config", str(workdir / "tiny.yaml"), "--dataset", str(workdir / "data" / "dataset.rfds"),
                "--max-iters", "2", "--ablate-ipe", "--ablate-zeta", "--out", str(tmp_path)]
        assert main(args) == EXIT_CAP
        header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
        assert "'use_ipe': False" in header and "'zeta_compensation': False" in header
        assert "'scale_consistent': True" in header

    def test_resume_bit_exact(self, workdir, tmp_path):
        base = ["train", "--config", str(workdir / "tiny.yaml"), "--dataset",
                str(workdir / "data" / "dataset.rfds")]
        assert main(base + ["--max-iters", "30", "--out", str(tmp_path / "full")]) == EXIT_CAP
        assert main(base + ["--max-iters", "20", "--out", str(tmp_path / "part")]) == EXIT_CAP
        assert main(base + ["--max-iters", "30", "--out", str(tmp_path / "part"), "--resume"]) == EXIT_CAP

        def strip(path):
            return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

        assert strip(tmp_path / "part" / "train_log.csv") == strip(tmp_path / "full" / "train_log.csv")

    def test_resume_without_checkpoint(self, workdir, tmp_path):
        args = ["train", "--dataset", str(workdir / "data" / "dataset.rfds"), "--resume", "--out", str(tmp_path)]
        assert main(args) == EXIT_IO

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "none.rfds"), "--out", str(tmp_path)]) == EXIT_IO

    def test_config_conflict(self, workdir, tmp_path):
        args = ["train", "--dataset", str(workdir / "data" / "dataset.rfds"), "--set", "trainer.w_c=0.5",
                "--out", str(tmp_path)]
        assert main(args) == EXIT_USAGE

    def test_init_from(self, workdir, tmp_path):
        args = ["train", "--config", str(workdir / "tiny.yaml"), "--dataset", str(workdir / "data" / "dataset.rfds"),
                "--max-iters", "1", "--init-from", str(workdir / "run" / "checkpoint.rfck"), "--out", str(tmp_path)]
        assert main(args) == EXIT_CAP


class TestEval:
    def test_identical_csv(self, workdir, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--dataset",
                str(workdir / "data" / "dataset.rfds"), "--split", "test"]
        assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "mean" in out and "p10" in out and "p90" in out
        for name in ("eval_test.csv", "eval_test_paths.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = read_csv((tmp_path / "a" / "eval_test.csv").read_text())
        assert list(rows[0]) == ["receiver_id", "n_rays", "nmse_db", "true_re", "true_im", "pred_re", "pred_im"]

    def test_missing_checkpoint(self, workdir, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(tmp_path / "nope.rfck"), "--dataset", str(workdir / "data" / "dataset.rfds")]
        assert main(args) == EXIT_IO
        assert "not found" in capsys.readouterr().err

    def test_bad_split(self, workdir):
        args = ["eval", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--dataset",
                str(workdir / "data" / "dataset.rfds"), "--split", "bogus"]
        assert main(args) == EXIT_USAGE

    def test_corrupt_checkpoint(self, workdir, tmp_path):
        data = bytearray((workdir / "run" / "checkpoint.rfck").read_bytes())
        data[-40] ^= 0xFF
        (tmp_path / "bad.rfck").write_bytes(bytes(data))
        args = ["eval", "--checkpoint", str(tmp_path / "bad.rfck"), "--dataset", str(workdir / "data" / "dataset.rfds")]
        assert main(args) == EXIT_IO


class TestPredict:
    def test_zero_doas(self, workdir, capsys):
        args = ["predict", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--rx", "1,1,1", "--format",
                "csv"]
        assert main(args) == EXIT_OK
        rows = read_csv(capsys.readouterr().out)
        assert len(rows) == 1 and rows[0]["ray"] == "total"
        assert float(rows[0]["re"]) == 0 and float(rows[0]["im"]) == 0

    def test_matches_evaluate(self, workdir, capsys):
        ds = load_dataset(workdir / "data" / "dataset.rfds")
        tr = trainer_from_checkpoint(workdir / "run" / "checkpoint.rfck", ds, weights_only=True)
        i = int(ds.indices("test")[0])
        report = tr.evaluate("test")
        args = ["predict", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--dataset",
                str(workdir / "data" / "dataset.rfds"), "--receiver-id", str(i), "--format", "csv"]
        assert main(args) == EXIT_OK
        rows = read_csv(capsys.readouterr().out)
        assert len(rows) == len(ds.samples[i].paths) + 1
        total = rows[-1]
        pred = complex(float(total["re"]), float(total["im"]))
        assert pred == report.rows[0]["pred"]

    def test_table_output(self, workdir, capsys):
        args = ["predict", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--rx", "1,1,1",
                "--doa", "90,0", "--doa", "45,30,0.5"]
        assert main(args) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("CFR =") and "peak depth" in out and "2 rays" in out

    def test_degrees_and_radians_agree(self, workdir, capsys):
        base = ["predict", "--checkpoint", str(workdir / "run" / "checkpoint.rfck"), "--rx", "1,1,1",
                "--format", "csv"]
        main(base + ["--doa", "90,45"])
        deg = read_csv(capsys.readouterr().out)[-1]
        main(base + ["--no-degrees", "--doa", f"{np.pi / 2!r},{np.pi / 4!r}"])
        rad = read_csv(capsys.readouterr().out)[-1]
        assert float(deg["abs"]) == pytest.approx(float(rad["abs"]), rel=1e-9)

    @pytest.mark.parametrize("extra", [["--rx", "1,1"], ["--rx", "1,1,1", "--doa", "90"], ["--rx", "a,b,c"],
                                       ["--receiver-id", "0"]])
    def test_malformed(self, workdir, extra):
        assert main(["predict", "--checkpoint", str(workdir / "run" / "checkpoint.rfck")] + extra) == EXIT_USAGE


class TestFresnelTable:
    def run(self, capsys, *extra):
        assert main(["fresnel-table", *extra]) == EXIT_OK
        return read_csv(capsys.readouterr().out)

    def test_columns_and_sweep(self, capsys):
        rows = self.run(capsys, "--material", "concrete")
        assert list(rows[0]) == ["theta_deg", "re_r_perp", "im_r_perp", "re_r_par", "im_r_par", "R_perp", "R_par"]
        assert float(rows[0]["theta_deg"]) == 0 and float(rows[-1]["theta_deg"]) == pytest.approx(89.9)
        assert len(rows) == 900

    def test_matched_media(self, capsys):
        rows = self.run(capsys, "--material", "air", "--step", "1")
        for col in ("re_r_perp", "im_r_perp", "re_r_par", "im_r_par", "R_perp", "R_par"):
            assert all(float(r[col]) == 0 for r in rows)

    def test_brewster_minimum(self, capsys):
        rows = self.run(capsys, "--eps-r", "4", "--step", "0.01")
        r_par = np.array([float(r["R_par"]) for r in rows])
        k = int(np.argmin(r_par))
        assert 0 < k < len(rows) - 1 and r_par[k] < 1e-7
        assert float(rows[k]["theta_deg"]) == pytest.approx(np.degrees(np.arctan(2.0)), abs=0.01)

    def test_monotone_r_perp(self, capsys):
        rows = self.run(capsys, "--eps-r", "6", "--step", "0.5")
        assert np.all(np.diff([float(r["R_perp"]) for r in rows]) > 0)

    def test_unknown_material(self):
        assert main(["fresnel-table", "--material", "unobtainium"]) == EXIT_USAGE

    def test_material_file_and_out(self, tmp_path):
        (tmp_path / "m.yaml").write_text("materials:\n  - {name: glass, eps_r: 6.3, sigma: 0.0}\n")
        out = tmp_path / "o"
        assert main(["fresnel-table", "--materials", str(tmp_path / "m.yaml"), "--material", "glass",
                     "--out", str(out)]) == EXIT_OK
        assert (out / "fresnel_glass.csv").exists()


class TestInspectEncoding:
    def test_rows(self, capsys):
        assert main(["inspect-encoding", "--preset", "scene-a"]) == EXIT_OK
        rows = read_csv(capsys.readouterr().out)
        assert len(rows) == 29
        for r in rows:
            assert abs(float(r["ipe_sin"])) <= abs(float(r["pe_sin"])) + 1e-15
            assert abs(float(r["ipe_cos"])) <= abs(float(r["pe_cos"])) + 1e-15

    def test_bad_frustum(self):
        assert main(["inspect-encoding", "--t-lo", "3", "--t-hi", "2"]) == EXIT_USAGE


class TestContract:
    def test_writes_only_inside_out(self, workdir, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        main(GEN + ["--out", "o1"])
        main(["train", "--config", str(workdir / "tiny.yaml"), "--dataset", "o1/dataset.rfds", "--max-iters", "2",
              "--out", "o2"])
        main(["eval", "--checkpoint", "o2/checkpoint.rfck", "--dataset", "o1/dataset.rfds", "--out", "o3"])
        main(["fresnel-table", "--out", "o4"])
        main(["inspect-encoding", "--out", "o5"])
        assert sorted(p.name for p in tmp_path.iterdir()) == ["o1", "o2", "o3", "o4", "o5"]

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_toy_run_completes(self, tmp_path):
        """200 receivers, 2,000 iteration cap: finishes and leaves a final checkpoint."""
        (tmp_path / "t.yaml").write_text(TINY + "trainer.eval_every: 500\n")
        assert main(GEN[:5] + ["--n", "200", "--seed", "1", "--negatives", "2", "--prune-db", "15",
                               "--out", str(tmp_path / "d")]) == EXIT_OK
        code = main(["train", "--config", str(tmp_path / "t.yaml"), "--dataset", str(tmp_path / "d" / "dataset.rfds"),
                     "--set", "sampler.m=4", "--max-iters", "2000", "--out", str(tmp_path / "r")])
        assert code in (EXIT_OK, EXIT_CAP)
        ds = load_dataset(tmp_path / "d" / "dataset.rfds")
        tr = trainer_from_checkpoint(tmp_path / "r" / "checkpoint.rfck", ds)
        assert tr.iteration == 2000 or code == EXIT_OK
