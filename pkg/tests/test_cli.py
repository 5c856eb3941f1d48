from __future__ import annotations

import json

import pytest

from s4c.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main, parse_args
from s4c.corpora import mixed_corpus


def test_generate_defaults():
    cfg = parse_args(["generate", "--weights", "w", "--draft-weights", "d", "--max-new", "64"])
    assert (cfg.temperature, cfg.seed, cfg.max_new, cfg.format) == (0.0, 0, 64, "json")
    assert cfg.correction == "residual" and cfg.draft == {}


def test_missing_flag_is_usage_error(capsys):
    assert main(["generate", "--draft-weights", "d"]) == EXIT_USAGE
    assert "--weights" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["verify-lossless", "--temperature", "-1"], ["nonsense"],
                                  ["verify-lossless", "--trials", "x"], ["verify-lossless", "--heads", "0"]])
def test_bad_values_are_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_missing_file_is_io_error(tmp_path, capsys):
    rc = main(["generate", "--weights", str(tmp_path / "nope.s4cw"), "--draft-weights", str(tmp_path / "d")])
    assert rc == EXIT_IO and "nope.s4cw" in capsys.readouterr().err


def test_verify_lossless_command(tmp_path):
    out = tmp_path / "v.json"
    assert main(["verify-lossless", "--trials", "100", "--vocab", "6", "--out", str(out)]) == EXIT_OK
    summary = json.loads(out.read_text())
    assert summary["passed"] and summary["max_l1_deviation"] < 1e-10
    assert main(["verify-lossless", "--trials", "100", "--eq12-correction", "--out", str(out)]) == EXIT_OK
    ablation = json.loads(out.read_text())
    assert not ablation["passed"] and "ablation" in ablation["note"]
    assert main(["verify-lossless", "--trials", "0", "--out", str(out)]) == EXIT_OK
    assert "0 trials" in json.loads(out.read_text())["note"]


def test_grad_check_command(tmp_path):
    out = tmp_path / "g.json"
    assert main(["grad-check", "--coords", "50", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["max_relative_error"] < 1e-4


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "corpus.txt").write_bytes(mixed_corpus(12_000, 0))
    model = ["--hidden", "8", "--layers", "1", "--attn-heads", "2", "--context", "96"]
    assert main(["train-target", "--corpus", str(d / "corpus.txt"), "--out", str(d / "t.s4cw"),
                 "--epochs", "1", *model]) == EXIT_OK
    draft = ["--heads", "2", "--tokens-per-head", "1", "--epochs", "1"]
    assert main(["train-draft", "--weights", str(d / "t.s4cw"), "--corpus", str(d / "corpus.txt"),
                 "--out", str(d / "d.s4cw"), "--log", str(d / "log.jsonl"), *draft]) == EXIT_OK
    return d


def test_training_commands_are_reproducible(trained, tmp_path):
    (tmp_path / "corpus.txt").write_bytes(mixed_corpus(12_000, 0))
    assert main(["train-target", "--corpus", str(tmp_path / "corpus.txt"), "--out", str(tmp_path / "t.s4cw"),
                 "--epochs", "1", "--hidden", "8", "--layers", "1", "--attn-heads", "2", "--context", "96"]) == 0
    assert (tmp_path / "t.s4cw").read_bytes() == (trained / "t.s4cw").read_bytes()
    log = [json.loads(x) for x in (trained / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1]


def test_generate_and_dump_tree(trained, tmp_path):
    pair = ["--weights", str(trained / "t.s4cw"), "--draft-weights", str(trained / "d.s4cw")]
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        assert main(["generate", *pair, "--max-new", "12", "--temperature", "0.7", "--seed", "3",
                     "--out", str(path)]) == EXIT_OK
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    result = json.loads(outs[0])
    assert len(result["tokens"]) == 12 and result["stats"]["wall_time_ns"] == 0
    assert main(["dump-tree", *pair, "--out", str(tmp_path / "tree.json")]) == EXIT_OK
    tree = json.loads((tmp_path / "tree.json").read_text())
    assert tree["nodes"][0]["parent"] == -1


def test_bench_command(trained, tmp_path):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({"tasks": [{"name": "a", "prompts": ["ab", "cd"], "max_new": 10}],
                                 "temperatures": [0.0, 1.0], "seeds": [0]}))
    pair = ["--weights", str(trained / "t.s4cw"), "--draft-weights", str(trained / "d.s4cw")]
    reports = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        assert main(["bench", *pair, "--suite", str(suite), "--no-timing", "--out", str(path)]) == EXIT_OK
        reports.append(path.read_bytes())
    assert reports[0] == reports[1]
    md = tmp_path / "r.md"
    assert main(["bench", *pair, "--suite", str(suite), "--format", "md", "--out", str(md)]) == EXIT_OK
    assert md.read_text().startswith("| Model | Temperature | a |")
