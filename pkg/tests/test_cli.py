import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from minivfi import cli
from minivfi import config as C

TINY_CFG = C.Config().with_overrides(
    data__n_sequences=10, data__res=32, teacher__epochs=1, teacher__batch=4, prune__epochs=2,
    prune__batch=4, prune__lr=0.05, prune__lambda=5e-3, student__epochs=1, student__batch=4,
    eval__bench_res=16, report__format="csv")


def tree_hashes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(C.dump(TINY_CFG))
    steps = [
        ("data", ["gen-data"]),
        ("teacher", ["train-teacher", "--data", root / "data"]),
        ("prune", ["prune", "--teacher", root / "teacher/teacher.snet", "--data", root / "data"]),
        ("plan", ["plan", "--ckpt", root / "prune/sparse.snet"]),
        ("compress", ["compress", "--plan", root / "plan/plan.txt", "--teacher", root / "teacher/teacher.snet"]),
        ("baseline", ["baseline", "--student", root / "compress/student.net", "--data", root / "data"]),
        ("distill", ["distill", "--student", root / "compress/student.net", "--data", root / "data",
                     "--teacher", root / "teacher/teacher.snet"]),
        ("eval_b", ["eval", "--ckpt", root / "baseline/baseline.snet", "--data", root / "data"]),
        ("eval_d", ["eval", "--ckpt", root / "distill/distilled.snet", "--data", root / "data"]),
        ("bench", ["bench", "--ckpt", root / "teacher/teacher.snet"]),
        ("report", ["report", "--records", root / "eval_b/eval.jsonl", root / "eval_d/eval.jsonl"]),
    ]
    codes = {}
    for name, argv in steps:
        codes[name] = run(*argv, "--config", cfg, "--out", root / name, "--seed", 1)
    return root, codes


def test_pipeline_completes(pipeline):
    root, codes = pipeline
    assert codes == {k: 0 for k in codes}
    for name in codes:
        m = json.loads((root / name / cli.MANIFEST_NAME).read_text())
        assert m["seeds"] == {"seed": 1} and m["started"] <= m["finished"]
        assert C.parse(m["config"]) == TINY_CFG
    report = (root / "report/report.csv").read_text().splitlines()
    assert len(report) == 3 and report[0].startswith("model,split")


def test_every_manifest_replays(pipeline, tmp_path):
    root, codes = pipeline
    for name in codes:
        assert run("replay", "--manifest", root / name / cli.MANIFEST_NAME, "--out", tmp_path / name) == 0, name


def test_replay_detects_tampering(pipeline, tmp_path):
    root, _ = pipeline
    m = json.loads((root / "plan" / cli.MANIFEST_NAME).read_text())
    m["outputs"]["plan.txt"] = "0" * 64
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps(m))
    assert run("replay", "--manifest", bad, "--out", tmp_path / "again") == cli.EXIT_RUNTIME


def test_inputs_are_not_mutated(pipeline, tmp_path):
    root, _ = pipeline
    before = tree_hashes(root / "teacher")
    assert run("plan", "--ckpt", root / "teacher/teacher.snet", "--out", tmp_path / "p") == 0
    assert run("bench", "--ckpt", root / "teacher/teacher.snet", "--out", tmp_path / "b",
               "--config", root / "tiny.cfg") == 0
    assert tree_hashes(root / "teacher") == before


def test_dense_checkpoint_gives_identity_plan(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert run("plan", "--ckpt", root / "teacher/teacher.snet", "--out", tmp_path) == 0
    assert "identity plan" in capsys.readouterr().out
    from minivfi.pruner import CompressionPlan
    assert CompressionPlan.parse((tmp_path / "plan.txt").read_text()).is_identity


def test_dump_config_is_a_fixed_point(tmp_path, capsys):
    src = tmp_path / "in.cfg"
    src.write_text(C.dump(TINY_CFG))
    assert run("gen-data", "--dump-config", "--config", src) == 0
    dumped = capsys.readouterr().out
    assert dumped == C.dump(TINY_CFG)
    fed = tmp_path / "fed.cfg"
    fed.write_text(dumped)
    assert run("gen-data", "--config", src, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--config", fed, "--out", tmp_path / "b") == 0
    ha, hb = tree_hashes(tmp_path / "a"), tree_hashes(tmp_path / "b")
    ha.pop(cli.MANIFEST_NAME), hb.pop(cli.MANIFEST_NAME)
    assert ha == hb
    capsys.readouterr()
    assert run("--dump-config") == 0
    assert C.parse(capsys.readouterr().out) == C.Config()


def error_line(capsys) -> str:
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return lines[0]


def test_unknown_flag_exits_2(capsys):
    assert run("plan", "--bogus") == cli.EXIT_USAGE
    assert error_line(capsys).startswith("minivfi: error category=usage ")
    assert run() == cli.EXIT_USAGE
    assert "category=usage" in error_line(capsys)


def test_bad_config_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(f"{C.CONFIG_HEADER}\nstudent.epochs = -1\n")
    assert run("gen-data", "--config", bad, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "category=config type=ConfigError" in error_line(capsys)


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert run("plan", "--ckpt", tmp_path / "missing.snet", "--out", tmp_path / "o") == cli.EXIT_RUNTIME
    line = error_line(capsys)
    assert "category=runtime" in line and 'message="' in line


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "minivfi", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("minivfi ")
