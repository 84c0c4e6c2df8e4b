"""Command-line behavior: exit codes, JSON report shapes, file plumbing.

Every invocation goes through cli.main(argv) in-process; stdout is
captured with capsys and parsed back as JSON where applicable.
"""

import json

import numpy as np
import pytest

from induce.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

GRAMMAR_TEXT = """\
S -> X 1.0
X -> X Y 0.3
X -> Y X 0.3
X -> Y Y 0.4
Y -> a 0.4
Y -> b 0.3
Y -> c 0.3
"""

CONFIG_TEXT = """\
n_nonterminals = 2
n_preterminals = 3
dim = 16
z_dim = 4
vocab_size = 20
epochs = 2
batch_size = 8
lr = 0.01
max_length = 10
zero_train = true
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Sampled corpus + gold trees + config, shared across the module."""
    root = tmp_path_factory.mktemp("cli")
    grammar = root / "toy.grammar"
    grammar.write_text(GRAMMAR_TEXT)
    rc = main(["sample", "--grammar", str(grammar), "--count", "40",
               "--seed", "3", "--max-len", "6", "--out", str(root / "data")])
    assert rc == EXIT_OK
    (root / "run.conf").write_text(CONFIG_TEXT)
    return root


@pytest.fixture(scope="module")
def trained(workdir, tmp_path_factory):
    """One trained run directory, reused by eval/decode/ablate/select tests."""
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "train", str(workdir / "data.tokens"),
        "--val", str(workdir / "data.tokens"),
        "--val-trees", str(workdir / "data.trees"),
        "--config", str(workdir / "run.conf"),
        "--seed", "0",
        "--out", str(out),
    ])
    assert rc == EXIT_OK
    return out


def run_json(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out
    return rc, json.loads(out)


class TestExitCodes:
    def test_unknown_subcommand_is_usage(self, capsys):
        assert main(["induct"]) == EXIT_USAGE

    def test_unknown_flag_is_usage(self, capsys):
        assert main(["select", "somewhere", "--criteria", "val_f1"]) == EXIT_USAGE

    def test_missing_file_is_data_error(self, capsys):
        assert main(["eval", "no-such.ckp", "no-such.txt", "--trees", "x"]) == EXIT_DATA

    def test_select_without_records_is_data_error(self, tmp_path, capsys):
        assert main(["select", str(tmp_path)]) == EXIT_DATA

    def test_bad_config_key_is_usage(self, workdir, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("optimiser = adam\n")
        rc = main(["train", str(workdir / "data.tokens"),
                   "--val", str(workdir / "data.tokens"),
                   "--val-trees", str(workdir / "data.trees"),
                   "--config", str(conf), "--out", str(tmp_path / "o")])
        assert rc == EXIT_USAGE

    def test_bad_thread_count_is_usage(self, capsys):
        assert main(["--threads", "0", "gradcheck"]) == EXIT_USAGE


class TestSample:
    def test_writes_parallel_files(self, workdir):
        tokens = (workdir / "data.tokens").read_text().splitlines()
        trees = (workdir / "data.trees").read_text().splitlines()
        assert len(tokens) == len(trees) == 40
        for sent, tree in zip(tokens, trees):
            assert 2 <= len(sent.split()) <= 6
            assert sent.split() == [t for t in tree.replace("(", " ").replace(")", " ").split()
                                    if t not in ("S", "X", "Y")]

    def test_stdout_mode_prints_trees(self, workdir, capsys):
        rc = main(["sample", "--grammar", str(workdir / "toy.grammar"),
                   "--count", "3", "--seed", "1", "--max-len", "5"])
        assert rc == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3 and all(l.startswith("(") for l in lines)


class TestTrain:
    def test_report_shape(self, workdir, tmp_path, capsys):
        rc, report = run_json(capsys, [
            "train", str(workdir / "data.tokens"),
            "--val", str(workdir / "data.tokens"),
            "--val-trees", str(workdir / "data.trees"),
            "--config", str(workdir / "run.conf"),
            "--seed", "1",
            "--out", str(tmp_path / "run1"),
        ])
        assert rc == EXIT_OK
        assert report["seed"] == 1
        assert report["val_metrics"]["f1_scale"] == "percent"
        assert 0.0 <= report["val_metrics"]["corpus_f1"] <= 100.0
        assert report["test_metrics"] is None
        assert (tmp_path / "run1" / "record.json").exists()

    def test_flag_overrides_config_file(self, workdir, tmp_path, capsys):
        # config says zero_train; --mode flag must still reach the model
        rc, report = run_json(capsys, [
            "train", str(workdir / "data.tokens"),
            "--val", str(workdir / "data.tokens"),
            "--val-trees", str(workdir / "data.trees"),
            "--config", str(workdir / "run.conf"),
            "--seed", "0", "--decoder", "viterbi",
            "--out", str(tmp_path / "run2"),
        ])
        assert rc == EXIT_OK
        record = json.loads((tmp_path / "run2" / "record.json").read_text())
        assert record["config"]["decoder"] == "viterbi"
        assert record["config"]["zero_train"] is True


class TestEval:
    def test_metrics_report(self, workdir, trained, capsys):
        rc, report = run_json(capsys, [
            "eval", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens"),
            "--trees", str(workdir / "data.trees"),
        ])
        assert rc == EXIT_OK
        assert report["f1_scale"] == "percent"
        assert set(report) >= {"corpus_f1", "sentence_f1", "ppl", "mbf", "config_hash", "decoder"}

    def test_viterbi_decoder_accepted(self, workdir, trained, capsys):
        rc, report = run_json(capsys, [
            "eval", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens"),
            "--trees", str(workdir / "data.trees"), "--decoder", "viterbi",
        ])
        assert rc == EXIT_OK and report["decoder"] == "viterbi"


class TestDecode:
    def test_stdout_trees_parse_back(self, workdir, trained, capsys):
        from induce.trees import parse_tree_line

        rc = main(["decode", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens")])
        assert rc == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        corpus_lines = (workdir / "data.tokens").read_text().splitlines()
        assert len(lines) == len(corpus_lines)
        for line, sent in zip(lines, corpus_lines):
            assert parse_tree_line(line).tokens() == sent.split()

    def test_out_file(self, workdir, trained, tmp_path, capsys):
        out = tmp_path / "trees.txt"
        rc = main(["decode", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens"),
                   "--out", str(out)])
        assert rc == EXIT_OK
        assert len(out.read_text().splitlines()) == 40


class TestAblate:
    def test_all_kinds_one_json_per_line(self, workdir, trained, capsys):
        rc = main(["ablate", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens"),
                   "--trees", str(workdir / "data.trees")])
        assert rc == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        reports = [json.loads(l) for l in lines]
        assert [r["ablation"] for r in reports] == [
            "default", "zero_z", "random_z", "shuffle", "zero_captions"
        ]
        default = next(r for r in reports if r["ablation"] == "default")
        zero_z = next(r for r in reports if r["ablation"] == "zero_z")
        # the fixture trains with zero_train, so z ablations change nothing
        assert zero_z["identical_to_default"]
        assert zero_z["corpus_f1"] == default["corpus_f1"]

    def test_single_kind(self, workdir, trained, capsys):
        rc = main(["ablate", str(trained / "checkpoint.ckp"), str(workdir / "data.tokens"),
                   "--trees", str(workdir / "data.trees"), "--kind", "shuffle"])
        assert rc == EXIT_OK
        reports = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
        assert len(reports) == 1 and reports[0]["ablation"] == "shuffle"


class TestSelect:
    def test_selects_over_run_tree(self, workdir, trained, tmp_path, capsys):
        # second run with another seed next to a copy of the first
        import shutil

        runs = tmp_path / "runs"
        shutil.copytree(trained, runs / "s0")
        rc = main([
            "train", str(workdir / "data.tokens"),
            "--val", str(workdir / "data.tokens"),
            "--val-trees", str(workdir / "data.trees"),
            "--config", str(workdir / "run.conf"),
            "--seed", "7",
            "--out", str(runs / "s7"),
        ])
        assert rc == EXIT_OK
        capsys.readouterr()
        rc, report = run_json(capsys, ["select", str(runs), "--k", "2"])
        assert rc == EXIT_OK
        assert report["runs_considered"] == 2
        assert sorted(report["chosen_seeds"]) == [0, 7]
        assert report["reported_split"] == "val"
        assert report["f1_scale"] == "percent"
        assert 0.0 <= report["corpus_f1"]["mean"] <= 100.0

    def test_k_larger_than_runs_is_data_error(self, trained, tmp_path, capsys):
        import shutil

        runs = tmp_path / "runs"
        shutil.copytree(trained, runs / "s0")
        assert main(["select", str(runs), "--k", "4"]) == EXIT_DATA


class TestBaseline:
    @pytest.mark.parametrize("kind", ["left", "right", "random"])
    def test_kinds(self, workdir, kind, capsys):
        rc, report = run_json(capsys, [
            "baseline", str(workdir / "data.tokens"),
            "--trees", str(workdir / "data.trees"), "--kind", kind,
        ])
        assert rc == EXIT_OK
        assert report["baseline"] == kind
        assert 0.0 <= report["corpus_f1"] <= 100.0
        if kind == "right":
            assert report["mbf"] > 1.0

    def test_random_is_seed_deterministic(self, workdir, capsys):
        args = ["baseline", str(workdir / "data.tokens"),
                "--trees", str(workdir / "data.trees"), "--kind", "random", "--seed", "5"]
        _, a = run_json(capsys, args)
        _, b = run_json(capsys, args)
        assert a == b


class TestGradcheck:
    def test_passes_at_tolerance(self, capsys):
        rc, report = run_json(capsys, ["gradcheck"])
        assert rc == EXIT_OK
        assert report["ok"] is True
        assert all(v <= 1e-6 for v in report["max_relative_error"].values())
