import json
import subprocess
import sys

import pytest

from shortrun.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_USAGE, run_cli

TINY = [
    "--set", "model.d = 2", "--set", "model.hidden = 4", "--set", "model.embed = 3",
    "--set", "train.iterations = 3", "--set", "train.batch_size = 8", "--set", "train.lr = 0.01",
    "--set", "sri.K = 3", "--set", "sri.s = 0.05", "--set", "eval.M = 4", "--set", "eval.samples = 3",
    "--threads", "1",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["gen-synthetic", "--kind", "toy", "--n", "30", "--seed", "5", "--out", str(root)]) == 0
    corpus = root / "toy-seed5.txt"
    assert run_cli(["train", "--corpus", str(corpus), "--out", str(root / "runs"), "--seed", "5", *TINY]) == 0
    (run,) = list((root / "runs").iterdir())
    return root, corpus, run


def test_gen_synthetic_outputs(workspace):
    root, corpus, _ = workspace
    lines = corpus.read_text().splitlines()
    assert len(lines) == 30 and all(line.endswith("c") for line in lines)
    truth = json.loads((root / "toy-seed5.truth.json").read_text())
    assert truth["seed"] == 5 and truth["grammar"] == "a^n b^n c" and len(truth["config_hash"]) == 12


def test_linear_gaussian_synthetic(tmp_path):
    assert run_cli(["gen-synthetic", "--kind", "linear-gaussian", "--n", "7", "--p", "3", "--d", "2",
                    "--seed", "1", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "linear-gaussian-seed1.csv").read_text().splitlines()) == 7
    truth = json.loads((tmp_path / "linear-gaussian-seed1.truth.json").read_text())
    assert len(truth["W"]) == 3 and len(truth["W"][0]) == 2


def test_run_directory_layout(workspace):
    _, _, run = workspace
    assert run.name.split("-")[-1] == (run / "config.txt").read_text().splitlines()[0].split()[-1]
    assert (run / "checkpoints" / "final.ckpt").is_file()
    assert (run / "samples").is_dir()
    rows = [json.loads(line) for line in (run / "logs.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == [0, 1, 2]


def test_eval_writes_report(workspace, capsys):
    _, corpus, run = workspace
    ckpt = run / "checkpoints" / "final.ckpt"
    assert run_cli(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus)]) == 0
    report = json.loads((run / "metrics.json").read_text())
    assert report["M"] == 4 and report["seed"] == 5 and report["config_hash"] == run.name.split("-")[-1]
    assert report["ppl"] > 1 and 0 <= report["au"] <= 2
    assert len((run / "history.jsonl").read_text().splitlines()) >= 1


def test_eval_is_reproducible(workspace, tmp_path):
    _, corpus, run = workspace
    ckpt = run / "checkpoints" / "final.ckpt"
    for name in ("a", "b"):
        assert run_cli(["eval", "--checkpoint", str(ckpt), "--corpus", str(corpus), "--M", "3",
                        "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_sample_zero_gives_empty_file(workspace, tmp_path):
    _, _, run = workspace
    assert run_cli(["sample", "--checkpoint", str(run / "checkpoints" / "final.ckpt"), "--n", "0",
                    "--out", str(tmp_path)]) == 0
    (f,) = list((tmp_path / "samples").iterdir())
    assert f.read_text() == "" and "seed5" in f.name


def test_sample_and_interpolate(workspace, tmp_path):
    _, _, run = workspace
    ckpt = str(run / "checkpoints" / "final.ckpt")
    assert run_cli(["sample", "--checkpoint", ckpt, "--n", "4", "--out", str(tmp_path)]) == 0
    (f,) = list((tmp_path / "samples").glob("samples-*.txt"))
    assert len(f.read_text().splitlines()) == 4
    assert run_cli(["interpolate", "--checkpoint", ckpt, "--n", "2", "--k", "5", "--out", str(tmp_path)]) == 0
    (g,) = list((tmp_path / "samples").glob("interpolate-*.txt"))
    blocks = g.read_text().split("\n\n")
    assert len(blocks) == 2 and all(len(b.strip().splitlines()) == 5 for b in blocks)


def test_noisy_recon_table(workspace, tmp_path, capsys):
    _, corpus, run = workspace
    assert run_cli(["noisy-recon", "--checkpoint", str(run / "checkpoints" / "final.ckpt"),
                    "--corpus", str(corpus), "--k", "1,2,3,4", "--out", str(tmp_path)]) == 0
    (f,) = list(tmp_path.glob("noisy-recon-*.tsv"))
    lines = f.read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and "seed=5" in lines[0]
    assert lines[1] == "k\trecon"
    assert [line.split("\t")[0] for line in lines[2:]] == ["1", "2", "3", "4"]


def test_features_then_cluster(workspace, tmp_path):
    _, corpus, run = workspace
    labels = tmp_path / "labels.txt"
    labels.write_text("".join(f"{line.count('a')}\n" for line in corpus.read_text().splitlines()))
    assert run_cli(["features", "--checkpoint", str(run / "checkpoints" / "final.ckpt"), "--corpus",
                    str(corpus), "--labels", str(labels), "--out", str(tmp_path)]) == 0
    (f,) = list(tmp_path.glob("features-*.csv"))
    head = f.read_text().splitlines()
    assert head[0] == "dim_0,dim_1,label" and len(head) == 31
    assert run_cli(["cluster", "--features", str(f), "--k", "2", "--out", str(tmp_path)]) == 0
    (c,) = list(tmp_path.glob("clusters-*.json"))
    doc = json.loads(c.read_text())
    assert len(doc["assignments"]) == 30 and 0 <= doc["accuracy"] <= 1


def test_resume_from_checkpoint(workspace, tmp_path):
    _, corpus, run = workspace
    ckpt = str(run / "checkpoints" / "final.ckpt")
    assert run_cli(["train", "--checkpoint", ckpt, "--corpus", str(corpus), "--set", "train.iterations = 5",
                    "--out", str(tmp_path)]) == 0
    (new,) = list(tmp_path.iterdir())
    rows = [json.loads(line) for line in (new / "logs.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == [3, 4]


def test_train_linear_gaussian(tmp_path):
    assert run_cli(["gen-synthetic", "--kind", "linear-gaussian", "--n", "50", "--p", "1", "--d", "1",
                    "--out", str(tmp_path)]) == 0
    assert run_cli(["train", "--corpus", str(tmp_path / "linear-gaussian-seed0.csv"), "--out", str(tmp_path / "r"),
                    "--set", "model.decoder = linear_gaussian", "--set", "model.d = 1",
                    "--set", "train.iterations = 5", "--set", "train.batch_size = 10", "--set", "sri.s = 0.01"]) == 0
    (run,) = list((tmp_path / "r").iterdir())
    assert run_cli(["sample", "--checkpoint", str(run / "checkpoints" / "final.ckpt"), "--n", "3"]) == 0
    (f,) = list((run / "samples").glob("*.csv"))
    assert len(f.read_text().splitlines()) == 3


def test_distinct_exit_codes(workspace, tmp_path, capsys):
    _, corpus, run = workspace
    codes = {
        "usage": run_cli(["train", "--no-such-flag"]),
        "config": run_cli(["train", "--corpus", str(corpus), "--set", "model.d = 0"]),
        "checkpoint": run_cli(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]),
        "data": run_cli(["train", "--corpus", str(tmp_path / "missing.txt"), "--out", str(tmp_path)]),
    }
    assert codes == {"usage": EXIT_USAGE, "config": EXIT_CONFIG, "checkpoint": EXIT_CHECKPOINT, "data": EXIT_DATA}
    assert len(set(codes.values())) == 4
    err = capsys.readouterr().err
    assert "error:" in err


def test_corrupt_checkpoint_is_a_checkpoint_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert run_cli(["sample", "--checkpoint", str(bad), "--n", "1"]) == EXIT_CHECKPOINT


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "shortrun.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-synthetic" in out.stdout
