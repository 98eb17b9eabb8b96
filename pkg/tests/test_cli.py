import json

from lpfl.cli import main
from lpfl.data import load_corpus
from helpers import tiny_spec


def write_config(path, out, **fl):
    path.write_text(json.dumps(tiny_spec(out, **fl).to_json()))
    return str(path)


def test_validate_default_and_bad(tmp_path, capsys):
    assert main(["validate"]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    cfg = write_config(tmp_path / "bad.json", tmp_path / "o", arm="fp-ct", clients=4)
    assert main(["validate", cfg]) == 1
    assert "fl.clients" in capsys.readouterr().out
    (tmp_path / "broken.json").write_text('{"model": {}}')
    assert main(["validate", str(tmp_path / "broken.json")]) == 2


def test_synth_writes_corpus(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "c.jsonl"), "--n", "50", "--vocab-size", "80", "--signal-words", "5"]) == 0
    examples = load_corpus(tmp_path / "c.jsonl")
    assert len(examples) == 50 and {e.label for e in examples} == {0, 1}


def test_run_then_compare(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "unused")
    for arm in ("lp-fl", "lp-ct"):
        assert main(["run", cfg, "--arm", arm, "--out", str(tmp_path / arm)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split("\t")[0] == "arm" and lines[1].split("\t")[0] == arm
        assert (tmp_path / arm / "validation.png").stat().st_size > 0
    assert main(["compare", str(tmp_path / "lp-fl"), str(tmp_path / "lp-ct"), "--out", str(tmp_path / "cmp")]) == 0
    table = capsys.readouterr().out
    assert "lp-fl" in table and "lp-ct" in table
    assert (tmp_path / "cmp" / "comparison.csv").is_file() and (tmp_path / "cmp" / "comparison.png").is_file()


def test_run_rejects_invalid_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "o", lr=-1.0)
    assert main(["run", cfg]) == 2
    assert "fl.lr" in capsys.readouterr().err
