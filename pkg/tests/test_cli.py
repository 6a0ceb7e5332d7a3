import json

import numpy as np
import pytest

from oracles import hand_embeddings
from tsdlab import cli
from tsdlab.benchmark import Record, read_manifest, write_manifest
from tsdlab.embeddings import save_embeddings
from tsdlab.labels import Occlusion

SMALL = ["--train-ids", "4", "--test-ids", "4", "--images-per-id", "8"]


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(out), "--seed", "3", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(small_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data", str(small_dir), "--out", str(out), "--toy", "--epochs", "2",
                     "--ids-per-batch", "4", "--check-leakage"])
    assert code == 0
    return out


def write_hand_case(tmp_path):
    query, gallery, expected = hand_embeddings()
    save_embeddings(tmp_path / "hand.tsdt", gallery)
    write_manifest(tmp_path / "query.csv", [Record(im, int(pid), int(cam), "query", occ) for im, pid, cam, occ in
                                            zip(query.image_ids, query.ids, query.cams, query.occlusion)])
    return expected


class TestSynth:
    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["synth", "--out", str(tmp_path / d), "--seed", "7", *SMALL]) == 0
        for name in ("scenes.tsdt", "manifest.csv", "synth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_file_and_override(self, tmp_path):
        (tmp_path / "c.toml").write_text("[synth]\ntrain_ids = 2\ntest_ids = 2\nimages_per_id = 4\nseed = 1\n")
        assert cli.main(["synth", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "c.toml"),
                         "--test-ids", "6"]) == 0
        cfg = json.loads((tmp_path / "d" / "synth.json").read_text())
        assert (cfg["train_ids"], cfg["test_ids"], cfg["seed"]) == (2, 6, 1)

    def test_bad_config_exit_code(self, tmp_path):
        (tmp_path / "c.toml").write_text("[synth]\nnpo_rate = 0.9\nntp_rate = 0.9\n")
        assert cli.main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "c.toml")]) == cli.EXIT_CONFIG

    def test_unparseable_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text("epochs = = 3\n")
        assert cli.main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "c.toml")]) == cli.EXIT_CONFIG


class TestRunConfig:
    def parse(self, argv):
        return cli.build_parser().parse_args(["train", "--data", "x", "--out", "y", *argv])

    def test_precedence(self, tmp_path):
        (tmp_path / "r.toml").write_text('profile = "toy"\nepochs = 9\nlr = 0.1\n[encoder]\ndepth = 1\n')
        cfg = cli.run_config(self.parse(["--epochs", "3"]), cli.read_toml(tmp_path / "r.toml"))
        assert (cfg.epochs, cfg.lr, cfg.encoder.depth, cfg.encoder.dim) == (3, 0.1, 1, 32)

    def test_full_defaults(self):
        cfg = cli.run_config(self.parse([]), {})
        assert (cfg.parts, cfg.lr, cfg.epochs, cfg.batch_size) == (8, 0.004, 120, 64)

    def test_unknown_key(self):
        with pytest.raises(cli.CliError) as err:
            cli.run_config(self.parse([]), {"bogus": 1})
        assert err.value.code == cli.EXIT_CONFIG

    def test_variant(self):
        cfg = cli.run_config(self.parse(["--variant", "M1", "--toy"]), {})
        assert cfg.use_decoder and not cfg.teacher


class TestTrainEval:
    def test_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"train_log.jsonl", "model.tsdt", "run.json", "embeddings.tsdt", "embeddings.tsv",
                "epoch_000.tsdt", "epoch_001.tsdt"} <= names

    def test_eval_run(self, trained, small_dir, capsys):
        assert cli.main(["eval", "--run", str(trained), "--data", str(small_dir)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) == {"ALL", "OCC", "NPO", "NTP"}
        assert 0.0 <= report["ALL"]["mAP"] <= 1.0

    def test_eval_exported_embeddings(self, trained, small_dir, tmp_path, capsys):
        assert cli.main(["build-benchmark", "--manifest", str(small_dir / "manifest.csv"),
                         "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        assert cli.main(["eval", "--embeddings", str(trained / "embeddings.tsdt"), "--query",
                         str(tmp_path / "query.csv"), "--gallery", str(tmp_path / "gallery.csv")]) == 0
        from_file = json.loads(capsys.readouterr().out)
        assert cli.main(["eval", "--run", str(trained), "--data", str(small_dir)]) == 0
        assert json.loads(capsys.readouterr().out) == from_file

    def test_mismatched_image_size(self, small_dir, tmp_path):
        code = cli.main(["train", "--data", str(small_dir), "--out", str(tmp_path), "--epochs", "1"])
        assert code == cli.EXIT_CONFIG

    def test_degenerate_dataset(self, small_dir, tmp_path):
        code = cli.main(["train", "--data", str(small_dir), "--out", str(tmp_path), "--toy",
                         "--ids-per-batch", "8"])
        assert code == cli.EXIT_DATA

    def test_missing_dataset(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path), "--toy"]) == cli.EXIT_DATA

    def test_export_attn(self, trained, small_dir, tmp_path):
        code = cli.main(["export-attn", "--run", str(trained), "--data", str(small_dir), "--out", str(tmp_path),
                         "--limit", "2", "--pgm"])
        assert code == 0
        grids = sorted(tmp_path.glob("*.txt"))
        assert len(grids) == 2 * 8
        g = np.loadtxt(grids[0])
        assert g.shape == (8, 4) and g.sum() == pytest.approx(1.0, abs=1e-6)
        pgm = next(tmp_path.glob("*.pgm")).read_bytes()
        assert pgm.startswith(b"P5\n4 8\n255\n") and len(pgm) == len(b"P5\n4 8\n255\n") + 32

    def test_export_unknown_image(self, trained, small_dir, tmp_path):
        code = cli.main(["export-attn", "--run", str(trained), "--data", str(small_dir), "--out", str(tmp_path),
                         "--image-ids", "nope"])
        assert code == cli.EXIT_DATA


class TestEvalHandCase:
    def test_metrics_match_hand_values(self, tmp_path, capsys):
        expected = write_hand_case(tmp_path)
        assert cli.main(["eval", "--embeddings", str(tmp_path / "hand.tsdt"), "--query",
                         str(tmp_path / "query.csv"), "--out", str(tmp_path / "m.json")]) == 0
        report = json.loads(capsys.readouterr().out)
        assert json.loads((tmp_path / "m.json").read_text()) == report
        for fam, want in expected.items():
            for key, value in want.items():
                assert report[fam][key] == pytest.approx(value, abs=1e-12), (fam, key)

    def test_missing_query_image(self, tmp_path):
        write_hand_case(tmp_path)
        write_manifest(tmp_path / "q2.csv", [Record("zz", 0, 0, "query")])
        code = cli.main(["eval", "--embeddings", str(tmp_path / "hand.tsdt"), "--query", str(tmp_path / "q2.csv")])
        assert code == cli.EXIT_DATA

    def test_needs_inputs(self):
        assert cli.main(["eval"]) == cli.EXIT_USAGE


class TestBuildBenchmark:
    def test_writes_split(self, tmp_path):
        recs = [Record("q0", 1, 1, "query", Occlusion.NPO), Record("g0", 1, 2, "gallery", Occlusion.HOLISTIC)]
        write_manifest(tmp_path / "m.csv", recs)
        assert cli.main(["build-benchmark", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "o")]) == 0
        assert len(read_manifest(tmp_path / "o" / "query.csv").records) == 1

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("image_id\nx\n")
        assert cli.main(["build-benchmark", "--manifest", str(tmp_path / "m.csv"),
                         "--out", str(tmp_path)]) == cli.EXIT_DATA


class TestUsage:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["frobnicate"])
        assert err.value.code == cli.EXIT_USAGE

    def test_ablate_tiny(self, tmp_path, capsys):
        (tmp_path / "a.toml").write_text('profile = "toy"\nids_per_batch = 4\n'
                                         "[synth]\ntrain_ids = 4\ntest_ids = 4\nimages_per_id = 8\n")
        code = cli.main(["ablate", "--config", str(tmp_path / "a.toml"), "--epochs", "1", "--seeds", "0",
                         "--variants", "baseline", "M1"])
        assert code == 0
        table = json.loads(capsys.readouterr().out)["table"]
        assert set(table) == {"baseline", "M1"}


@pytest.mark.slow
class TestGradcheckCommand:
    def test_exit_zero(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        assert "cases, worst" in capsys.readouterr().out
