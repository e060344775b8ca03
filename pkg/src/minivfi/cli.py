"""Command-line front end: one subcommand per pipeline phase.

Every run writes its outputs, the effective config and a ``run_manifest.json``
under ``--out``. ``replay`` re-executes a manifest and checks that every
non-timing output is byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod

log = logging.getLogger("minivfi")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
# outputs that carry wall-clock measurements and so differ between runs
VOLATILE = ("runlog.csv", "bench.json", "eval.jsonl")


class UsageError(Exception):
    pass


class ReplayMismatch(RuntimeError):
    pass


def _fail(category: str, exc: BaseException | str, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    kind = type(exc).__name__ if isinstance(exc, BaseException) else "Error"
    print(f"minivfi: error category={category} type={kind} message={json.dumps(msg)}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands; each returns {name: path} of inputs it read
# ---------------------------------------------------------------------------

def _load_ckpt(path):
    from .netdef import load_checkpoint
    return load_checkpoint(path)


def _load_spec(path):
    from .netdef import NetworkSpec
    return NetworkSpec.from_manifest(Path(path).read_text())[0]


def cmd_gen_data(a, cfg, out: Path) -> dict:
    from .datagen import build_dataset
    m = build_dataset(out, n_sequences=cfg["data.n_sequences"], seed=a.seed, res=cfg["data.res"],
                      channels=cfg["data.channels"])
    print(f"wrote {m.count} sequences to {out}")
    return {}


def _write_runlog(out: Path, logbook) -> None:
    (out / "runlog.csv").write_text(logbook.csv())
    lines = ["step,total,stud,dist"]
    for i, (t, s, d) in enumerate(logbook.steps):
        lines.append(f"{i},{t!r},{s!r},{'' if d is None else repr(d)}")
    (out / "steps.csv").write_text("\n".join(lines) + "\n")


def cmd_train_teacher(a, cfg, out: Path) -> dict:
    from .datagen import load_dataset
    from .distill import TrainConfig, train_teacher
    from .netdef import TeacherConfig, build_teacher, save_checkpoint
    ds = load_dataset(a.data)
    tc = TrainConfig(epochs=cfg["teacher.epochs"], lr=cfg["teacher.lr"], batch=cfg["teacher.batch"],
                     seed=a.seed, mode="baseline", augment=cfg["teacher.augment"])
    spec = build_teacher(TeacherConfig(channels=ds.manifest.channels))
    ckpt, logbook = train_teacher(spec, ds, tc)
    save_checkpoint(ckpt, out / "teacher.snet")
    _write_runlog(out, logbook)
    print(f"teacher val_psnr={logbook.epochs[-1].val_psnr:.3f}")
    return {"data": a.data}


def cmd_prune(a, cfg, out: Path) -> dict:
    from .datagen import load_dataset
    from .netdef import save_checkpoint
    from .optim import ObproxSchedule, obprox_run, trajectory_csv
    from .pruner import model_density
    ds = load_dataset(a.data)
    teacher = _load_ckpt(a.teacher)
    sched = ObproxSchedule(cfg["prune.prox_epochs"], cfg["prune.orthant_epochs"], cfg["prune.alternating"])
    sparse, rows = obprox_run(teacher, ds.split("train"), cfg["prune.epochs"], cfg["prune.lambda"],
                              cfg["prune.lr"], sched, batch=cfg["prune.batch"], seed=a.seed)
    save_checkpoint(sparse, out / "sparse.snet")
    (out / "trajectory.csv").write_text(trajectory_csv(rows))
    rep = model_density(sparse)
    (out / "density.txt").write_text(rep.text())
    print(f"model density {float(rep.model_density):.4f}")
    return {"data": a.data, "teacher": a.teacher}


def cmd_plan(a, cfg, out: Path) -> dict:
    from .pruner import make_plan, model_density
    ckpt = _load_ckpt(a.ckpt)
    plan = make_plan(model_density(ckpt), ckpt.spec, cfg["plan.branch_threshold"])
    text = plan.text()
    (out / "plan.txt").write_text(text)
    sys.stdout.write(text)
    print("identity plan" if plan.is_identity else f"removed: {sorted(plan.removed_branches) or 'none'}")
    return {"ckpt": a.ckpt}


def cmd_compress(a, cfg, out: Path) -> dict:
    from .netdef import TeacherConfig, build_from_plan, build_teacher
    from .pruner import CompressionPlan, summarize_compression
    plan = CompressionPlan.parse(Path(a.plan).read_text())
    inputs = {"plan": a.plan}
    if a.teacher:
        teacher_spec = _load_ckpt(a.teacher).spec
        inputs["teacher"] = a.teacher
    else:
        teacher_spec = build_teacher(TeacherConfig(channels=cfg["data.channels"]))
    student = build_from_plan(teacher_spec, plan)
    (out / "student.net").write_text(student.manifest())
    summary = summarize_compression(teacher_spec, student)
    (out / "compression.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"params {summary['params_before']} -> {summary['params_after']} "
          f"({summary['reduction_pct']}% reduction)")
    return inputs


def _train_student(a, cfg, out: Path, mode: str) -> dict:
    from .datagen import load_dataset
    from .distill import TrainConfig, train_baseline, train_distilled
    from .netdef import save_checkpoint
    ds = load_dataset(a.data)
    spec = _load_spec(a.student)
    tc = TrainConfig(epochs=cfg["student.epochs"], alpha=cfg["student.alpha"], lr=cfg["student.lr"],
                     batch=cfg["student.batch"], seed=a.seed, mode=mode,
                     cache_teacher=cfg["student.cache_teacher"], augment=cfg["student.augment"])
    inputs = {"data": a.data, "student": a.student}
    if mode == "distill":
        teacher = _load_ckpt(a.teacher)
        inputs["teacher"] = a.teacher
        ckpt, logbook = train_distilled(spec, teacher, ds, tc)
        name = "distilled"
    else:
        ckpt, logbook = train_baseline(spec, ds, tc)
        name = "baseline"
    save_checkpoint(ckpt, out / f"{name}.snet")
    save_checkpoint(logbook.best_checkpoint, out / f"{name}_best.snet")
    _write_runlog(out, logbook)
    print(f"{name} val_psnr={logbook.epochs[-1].val_psnr:.3f}")
    return inputs


def cmd_baseline(a, cfg, out: Path) -> dict:
    return _train_student(a, cfg, out, "baseline")


def cmd_distill(a, cfg, out: Path) -> dict:
    return _train_student(a, cfg, out, "distill")


def cmd_bench(a, cfg, out: Path) -> dict:
    from .evalkit import bench_runtime
    res = bench_runtime(_load_ckpt(a.ckpt), res=cfg["eval.bench_res"], reps=cfg["eval.bench_reps"], seed=a.seed)
    (out / "bench.json").write_text(json.dumps(res, sort_keys=True, indent=1) + "\n")
    print(f"runtime mean {res['mean']:.4f}s std {res['std']:.4f}s over {len(res['reps'])} reps")
    return {"ckpt": a.ckpt}


def cmd_eval(a, cfg, out: Path) -> dict:
    from .datagen import load_dataset
    from .distill import validate
    from .evalkit import EvalRecord, bench_runtime, emit_report
    from .netdef import count_params
    ds = load_dataset(a.data)
    split = cfg["eval.split"]
    ckpt = _load_ckpt(a.ckpt)
    q = validate(ckpt, ds.split(split))
    (out / "quality.json").write_text(json.dumps(q, sort_keys=True, indent=1) + "\n")
    bench = bench_runtime(ckpt, res=cfg["eval.bench_res"], reps=cfg["eval.bench_reps"], seed=a.seed)
    (out / "bench.json").write_text(json.dumps(bench, sort_keys=True, indent=1) + "\n")
    rec = EvalRecord(a.name or Path(a.ckpt).stem, split, q["psnr_mean"], q["psnr_std"], q["ssim_mean"],
                     q["ssim_std"], bench["mean"], count_params(ckpt.spec)["total"] / 1e6)
    (out / "eval.jsonl").write_text(emit_report([rec], "jsonl", env=bench["env"]))
    sys.stdout.write(emit_report([rec], "text"))
    return {"data": a.data, "ckpt": a.ckpt}


def cmd_report(a, cfg, out: Path) -> dict:
    from .evalkit import emit_report, record_from_json
    records, env = [], None
    for path in a.records:
        for ln in Path(path).read_text().splitlines():
            if not ln.strip():
                continue
            d = json.loads(ln)
            if "environment" in d:
                env = env or d["environment"]
            else:
                records.append(record_from_json(d))
    fmt = cfg["report.format"]
    text = emit_report(records, fmt, env=env)
    ext = {"text": "txt", "csv": "csv", "jsonl": "jsonl"}[fmt]
    (out / f"report.{ext}").write_text(text)
    sys.stdout.write(text)
    return {f"records{i}": p for i, p in enumerate(a.records)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "prune": cmd_prune,
    "plan": cmd_plan,
    "compress": cmd_compress,
    "baseline": cmd_baseline,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
}
# parsed attributes that are not run parameters
_NOT_ARGS = {"command", "out", "config", "dump_config", "verbose", "manifest", "top_config", "top_dump"}
_PATH_ARGS = ("data", "teacher", "ckpt", "student", "plan")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="minivfi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"minivfi {__version__}")
    p.add_argument("--config", dest="top_config", help=argparse.SUPPRESS)
    p.add_argument("--dump-config", dest="top_dump", action="store_true",
                   help="print the effective config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="build the synthetic quintuplet dataset")
    s = sub.add_parser("train-teacher", parents=[common], help="train the dense teacher")
    s.add_argument("--data", required=True)
    s = sub.add_parser("prune", parents=[common], help="sparsity-inducing fine-tuning of the teacher")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s = sub.add_parser("plan", parents=[common], help="densities of a checkpoint to a compression plan")
    s.add_argument("--ckpt", required=True)
    s = sub.add_parser("compress", parents=[common], help="compression plan to a student network")
    s.add_argument("--plan", required=True)
    s.add_argument("--teacher", help="teacher checkpoint (default: stock teacher topology)")
    for name in ("baseline", "distill"):
        s = sub.add_parser(name, parents=[common], help=f"train the {name} student from scratch")
        s.add_argument("--student", required=True, help="student network file")
        s.add_argument("--data", required=True)
        if name == "distill":
            s.add_argument("--teacher", required=True)
    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM, runtime and size of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--name", help="model id in the report (default: file stem)")
    s = sub.add_parser("bench", parents=[common], help="forward wall-clock of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s = sub.add_parser("report", parents=[common], help="merge eval records into a comparison table")
    s.add_argument("--records", nargs="+", required=True)
    s = sub.add_parser("replay", parents=[common], help="re-run a manifest and verify its outputs")
    s.add_argument("--manifest", required=True)
    return p


def _utc() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def run_command(command: str, args: dict, cfg: cfgmod.Config, out: Path) -> dict:
    """Execute one subcommand and write its manifest; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    existing = {p for p in out.rglob("*") if p.is_file()}
    started = _utc()
    ns = argparse.Namespace(**args)
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    inputs = COMMANDS[command](ns, cfg, out)
    outputs = {}
    for p in sorted(out.rglob("*")):
        rel = p.relative_to(out).as_posix()
        if p.is_file() and rel != MANIFEST_NAME and (p not in existing or rel == "config.txt"):
            outputs[rel] = _sha256(p)
    manifest = {
        "tool": "minivfi", "version": __version__, "subcommand": command,
        "args": args, "config": cfgmod.dump(cfg), "seeds": {"seed": args["seed"]},
        "inputs": {k: str(Path(v).resolve()) for k, v in inputs.items()},
        "out": str(out.resolve()), "outputs": outputs,
        "volatile": sorted(k for k in outputs if Path(k).name in VOLATILE),
        "numpy": np.__version__, "started": started, "finished": _utc(),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def replay(manifest_path, out: Path) -> dict:
    """Re-run a recorded invocation into ``out`` and compare deterministic outputs."""
    rec = json.loads(Path(manifest_path).read_text())
    if rec.get("tool") != "minivfi":
        raise ValueError(f"{manifest_path} is not a run manifest")
    if Path(rec["out"]).resolve() == out.resolve():
        raise ValueError("replay needs a fresh --out directory")
    cfg = cfgmod.parse(rec["config"])
    new = run_command(rec["subcommand"], rec["args"], cfg, out)
    bad = [k for k, h in rec["outputs"].items()
           if k not in rec["volatile"] and new["outputs"].get(k) != h]
    if bad:
        raise ReplayMismatch(f"outputs differ from the recorded run: {bad}")
    return new


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    if a.command is None and not a.top_dump:
        return _fail("usage", "a subcommand is required", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if getattr(a, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = getattr(a, "config", None) or a.top_config
    try:
        cfg = cfgmod.load(config_path) if config_path else cfgmod.Config()
    except cfgmod.ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    if a.top_dump or getattr(a, "dump_config", False):
        sys.stdout.write(cfgmod.dump(cfg))
        return EXIT_OK
    if not a.out:
        return _fail("usage", "--out is required", EXIT_USAGE)
    out = Path(a.out)
    try:
        if a.command == "replay":
            m = replay(a.manifest, out)
            print(f"replayed {m['subcommand']}: {len(m['outputs'])} outputs match")
        else:
            args = {k: v for k, v in vars(a).items() if k not in _NOT_ARGS}
            for k in _PATH_ARGS:
                if args.get(k):
                    args[k] = str(Path(args[k]).resolve())
            if args.get("records"):
                args["records"] = [str(Path(r).resolve()) for r in args["records"]]
            run_command(a.command, args, cfg, out)
    except cfgmod.ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one error line
        log.debug("failure", exc_info=True)
        return _fail("runtime", exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
