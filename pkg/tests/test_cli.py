import json
from pathlib import Path

import pytest

from datr.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


SMALL_GEN = ["--topics", "4", "--details", "2", "--videos-per", "2",
             "--d-in", "12", "--n-frames", "4"]
SMALL_MODEL = ["--embed-dim", "16", "--heads", "2", "--video-layers", "2",
               "--text-layers", "1", "--max-tokens", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["gen-corpus", "--out", str(root / "corpus"), "--seed", "5",
                 *SMALL_GEN])
    assert code == 0
    code = main(["split", "--corpus", str(root / "corpus"), "--out",
                 str(root / "split.json"), "--seed", "1"])
    assert code == 0
    code = main(["train-stage1", "--corpus", str(root / "corpus"), "--split",
                 str(root / "split.json"), "--out", str(root / "s1.ckpt"),
                 "--epochs", "2", "--batch-size", "4", *SMALL_MODEL])
    assert code == 0
    code = main(["train-stage2", "--corpus", str(root / "corpus"), "--split",
                 str(root / "split.json"), "--checkpoint", str(root / "s1.ckpt"),
                 "--out", str(root / "s2.ckpt"), "--epochs", "3",
                 "--negatives", "5"])
    assert code == 0
    code = main(["build-index", "--corpus", str(root / "corpus"), "--split",
                 str(root / "split.json"), "--side", "test", "--checkpoint",
                 str(root / "s2.ckpt"), "--out", str(root / "test.index")])
    assert code == 0
    return root


class TestGenCorpus:
    def test_identical_bytes_across_runs(self, tmp_path, capsys):
        for sub in ("a", "b"):
            code, _, _ = run(capsys, "gen-corpus", "--out", str(tmp_path / sub),
                             "--seed", "9", *SMALL_GEN)
            assert code == 0
        for rel in ("triplets.jsonl", "manifest.jsonl", "latents.json"):
            assert (tmp_path / "a" / rel).read_bytes() == \
                   (tmp_path / "b" / rel).read_bytes()
        feats = sorted(p.name for p in (tmp_path / "a" / "features").iterdir())
        for name in feats:
            assert (tmp_path / "a" / "features" / name).read_bytes() == \
                   (tmp_path / "b" / "features" / name).read_bytes()

    def test_json_output(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-corpus", "--out", str(tmp_path / "c"),
                           "--seed", "0", "--json", *SMALL_GEN)
        assert code == 0
        payload = json.loads(out)
        assert payload["videos"] == 16

    def test_bad_spec_exits_nonzero(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-corpus", "--out", str(tmp_path / "c"),
                           "--details", "1")
        assert code == 1 and "error" in err


class TestPipelineVerbs:
    def test_evaluate_json(self, workspace, capsys):
        code, out, _ = run(capsys, "evaluate", "--corpus", str(workspace / "corpus"),
                           "--split", str(workspace / "split.json"),
                           "--checkpoint", str(workspace / "s2.ckpt"),
                           "--index", str(workspace / "test.index"),
                           "--k", "8", "--json")
        assert code == 0
        payload = json.loads(out)
        assert payload["n_queries"] == 4

    def test_evaluate_stage2_off_matches_ablation_identity(self, workspace, capsys):
        args = ["evaluate", "--corpus", str(workspace / "corpus"),
                "--split", str(workspace / "split.json"),
                "--checkpoint", str(workspace / "s2.ckpt"),
                "--index", str(workspace / "test.index"), "--k", "8", "--json"]
        code, on_out, _ = run(capsys, *args, "--stage2", "off")
        code2, off_out, _ = run(capsys, *args, "--stage2", "off")
        assert code == 0 and code2 == 0
        assert on_out == off_out  # byte-identical repeated runs

    def test_validate_clean_corpus(self, workspace, capsys):
        code, out, _ = run(capsys, "validate", "--corpus",
                           str(workspace / "corpus"), "--json")
        assert code == 0 and json.loads(out)["ok"] is True

    def test_validate_dirty_corpus_exit_1(self, workspace, tmp_path, capsys):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(workspace / "corpus", broken)
        victim = next(iter(sorted((broken / "features").iterdir())))
        victim.unlink()
        code, _, err = run(capsys, "validate", "--corpus", str(broken))
        assert code == 1 and "missing feature file" in err

    def test_unknown_verb_exits_2(self, capsys):
        with pytest.raises(SystemExit):
            main(["frobnicate"])


class TestConfigFile:
    def test_config_file_supplies_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("topics=4\ndetails=2\nvideos-per=2\nd-in=12\nn-frames=4\n")
        code, out, _ = run(capsys, "gen-corpus", "--out", str(tmp_path / "c"),
                           "--config", str(cfg), "--json")
        assert code == 0
        assert json.loads(out)["videos"] == 16

    def test_explicit_flag_beats_config(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("topics=4\ndetails=2\nvideos-per=2\nd-in=12\nn-frames=4\n")
        code, out, _ = run(capsys, "gen-corpus", "--out", str(tmp_path / "c2"),
                           "--config", str(cfg), "--videos-per", "1", "--json")
        assert code == 0
        assert json.loads(out)["videos"] == 8

    def test_missing_config_file_errors(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-corpus", "--out", str(tmp_path / "c"),
                           "--config", str(tmp_path / "nope.cfg"))
        assert code == 1 and "error" in err


class TestDeterminism:
    def test_train_checkpoint_byte_identical(self, workspace, tmp_path, capsys):
        outs = []
        for sub in ("r1", "r2"):
            out = tmp_path / f"{sub}.ckpt"
            code, _, _ = run(capsys, "train-stage1", "--corpus",
                             str(workspace / "corpus"), "--split",
                             str(workspace / "split.json"), "--out", str(out),
                             "--epochs", "2", "--batch-size", "4", "--seed", "4",
                             *SMALL_MODEL)
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_build_index_byte_identical(self, workspace, tmp_path, capsys):
        outs = []
        for sub in ("i1", "i2"):
            out = tmp_path / f"{sub}.index"
            code, _, _ = run(capsys, "build-index", "--corpus",
                             str(workspace / "corpus"), "--split",
                             str(workspace / "split.json"), "--side", "test",
                             "--checkpoint", str(workspace / "s2.ckpt"),
                             "--out", str(out))
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
