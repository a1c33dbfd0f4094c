import json
import shutil

import pytest

from ratelsim.cli import main
from ratelsim.programs import corpus_dir

CORPUS = corpus_dir()


def _src(name):
    return str(CORPUS / f"{name}.s")


def test_assemble_disasm_roundtrip(tmp_path, capsys):
    out = tmp_path / "hello.gb64"
    assert main(["assemble", _src("hello"), "-o", str(out)]) == 0
    assert main(["disasm", str(out)]) == 0
    text = capsys.readouterr().out
    again = tmp_path / "again.s"
    again.write_text(text)
    out2 = tmp_path / "again.gb64"
    assert main(["assemble", str(again), "-o", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_both_worlds_agree_through_reports(tmp_path, capsys):
    a, b = tmp_path / "dbt.txt", tmp_path / "oracle.txt"
    rc = main(["run", _src("fib"), "--report", str(a), "--quiet"])
    dbt_out = capsys.readouterr().out
    assert main(["run-oracle", _src("fib"), "--report", str(b), "--quiet"]) == rc
    assert capsys.readouterr().out == dbt_out
    assert main(["diff", str(a), str(b)]) == 0
    assert capsys.readouterr().out.strip() == "equal"
    assert json.loads((tmp_path / "dbt.txt.json").read_text())["world"] == "dbt"


def test_diff_reports_first_divergence(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    main(["run", _src("hello"), "--report", str(a), "--quiet"])
    main(["run", _src("fib"), "--report", str(b), "--quiet"])
    capsys.readouterr()
    assert main(["diff", str(a), str(b), "--scope", "output"]) == 1
    assert "first divergence" in capsys.readouterr().out


@pytest.mark.parametrize("name,code", [("segv", 2), ("exit_group", 1), ("hello", 0)])
def test_exit_status_mapping(name, code, capsys):
    assert main(["run", _src(name), "--quiet"]) == code


def test_configuration_errors(tmp_path, capsys):
    assert main(["run", _src("hello"), "--tcs", "0", "--quiet"]) == 4
    assert main(["run", str(tmp_path / "missing.s")]) == 4
    assert main(["frobnicate"]) == 4
    assert main(["run", _src("hello"), "--adversary", "nonsense"]) == 4


def test_stdin_script_and_adversary(tmp_path, capsys):
    stdin = tmp_path / "in.txt"
    stdin.write_bytes(b"abc\n")
    assert main(["run", _src("echo_stdin"), "--stdin", str(stdin), "--quiet",
                 "--adversary", "toctou-mutate"]) == 0
    assert capsys.readouterr().out.startswith("abc\n")
    assert main(["run", _src("sigscript"), "--script", str(CORPUS / "sigscript.script"),
                 "--quiet"]) == 0


def test_logdir_collects_log_and_report(tmp_path, capsys):
    logdir = tmp_path / "logs"
    assert main(["run", _src("hello"), "--logdir", str(logdir), "--loglevel", "2", "--quiet"]) == 0
    assert (logdir / "run.log").exists()
    assert (logdir / "report-dbt.txt").read_text().startswith("ratel-report")


def test_bench_over_a_directory(tmp_path, capsys):
    for name in ("lib", "hello", "fib"):
        shutil.copy(CORPUS / f"{name}.s", tmp_path)
    assert main(["bench", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[0] == "program"
    assert {ln.split()[0] for ln in lines[1:]} == {"hello", "fib"}
    assert all(ln.split()[-1] == "True" for ln in lines[1:])


def test_dumps(capsys):
    assert main(["dump-syscalls"]) == 0
    assert "archctl" in capsys.readouterr().out
    assert main(["dump-procmap", _src("reloc")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("region_a ") and "relocated " in out
