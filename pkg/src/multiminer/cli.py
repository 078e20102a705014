"""Command-line entry point: ``multiminer <command> [options]``.

Every command writes into a run directory (``--out`` or ``--run-dir``; if
omitted, ``$MULTIMINER_OUT`` and then the config's ``output_dir``).  Failures
exit with the code of their error class and leave ``error.json`` in that
directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .errors import MissingArtifactError, MultiMinerError, NumericError, PretrainingFailure
from .pipeline import OUT_ENV, RunDir
from .scenes import load_dataset

log = logging.getLogger("multiminer")


def _resolve_out(arg, cfg: RunConfig | None) -> Path:
    if arg:
        return Path(arg)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.output_dir if cfg is not None else RunConfig().output_dir)


def _start(args, cfg: RunConfig) -> RunDir:
    run = RunDir(_resolve_out(args.out, cfg)).ensure()
    args.resolved_out = run.root
    cfg.save(run.config)
    run.log({"event": "command", "command": args.command})
    return run


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {what} not found at {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    run = _start(args, cfg)
    ds = pipeline.stage_gen_data(cfg, run.dataset)
    run.mark("gen-data", {"scenes": len(ds.scenes), "train": len(ds.train), "eval": len(ds.eval)})
    print(f"wrote {len(ds.scenes)} scenes to {run.dataset}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    run = _start(args, cfg)
    ds = load_dataset(_require(Path(args.data) if args.data else run.dataset, "dataset"))
    _, metrics = pipeline.stage_pretrain(cfg, ds, run.ckpt, log_fn=run.log)
    seconds = metrics.pop("seconds")
    run.update_report("pretrain", metrics, seconds)
    run.mark("pretrain", {"eval_macro_f1": metrics["eval_macro_f1"]})
    print(f"pretraining done: eval macro-F1 {metrics['eval_macro_f1']:.4f} ({seconds:.0f}s)")
    return 0


def cmd_mine(args) -> int:
    cfg = load_config(args.config)
    run = _start(args, cfg)
    ds = load_dataset(_require(Path(args.data) if args.data else run.dataset, "dataset"))
    ckpt = _require(Path(args.ckpt) if args.ckpt else run.ckpt, "network checkpoint")
    summary = pipeline.stage_mine(cfg, ds, ckpt, run.root, log_fn=run.log)
    run.update_report("mining_run", {"steps_run": summary["steps_run"]}, summary["seconds"])
    run.mark("mine", {"steps_run": summary["steps_run"]})
    print(f"mining done after {summary['steps_run']} steps ({summary['seconds']:.0f}s)")
    return 0


def _eval_into(run: RunDir, cfg: RunConfig) -> dict:
    ds = load_dataset(_require(run.dataset, "dataset"))
    if not (run.pools / "index.json").exists():
        raise MissingArtifactError(f"missing artifact: no pools in {run.pools}")
    rep = pipeline.evaluate_pools(cfg, ds, run.pools)
    pipeline.write_mining_figures(rep, run.figures)
    report = run.update_report("mining", rep)
    run.update_report("acceptance", pipeline.acceptance_summary(report, cfg))
    run.mark("eval")
    return rep


def cmd_eval(args) -> int:
    run = RunDir(_require(Path(args.run_dir), "run directory"))
    args.resolved_out = run.root
    cfg = run.load_config()
    rep = _eval_into(run, cfg)
    print(f"final IoU {rep['final']['iou']:.4f}, pseudo-mask IoU {rep['final']['pseudo_iou']:.4f}")
    return 0


def cmd_render(args) -> int:
    run = RunDir(_require(Path(args.run_dir), "run directory"))
    args.resolved_out = run.root
    paths = pipeline.stage_render(run, args.image_id or None)
    run.mark("render", {"panels": [p.name for p in paths]})
    print(f"wrote {len(paths)} panel(s) to {run.figures / 'panels'}")
    return 0


def _gan_into(run: RunDir, cfg: RunConfig) -> dict:
    rep = pipeline.stage_ganverify(cfg, run.gan)
    seconds = rep.pop("seconds")
    for name in ("gan_hist.csv", "gan_hist.png"):
        run.figures.mkdir(parents=True, exist_ok=True)
        (run.figures / name).write_bytes((run.gan / name).read_bytes())
    report = run.update_report("gan", rep, seconds)
    run.update_report("acceptance", pipeline.acceptance_summary(report, cfg))
    run.mark("ganverify", {"ratio": rep["ratio"], "d_accuracy": rep["d_accuracy"]})
    return rep


def cmd_ganverify(args) -> int:
    cfg = load_config(args.config)
    run = _start(args, cfg)
    rep = _gan_into(run, cfg)
    print(f"divergence {rep['divergence_pre']:.4f} -> {rep['divergence_post']:.5f}, "
          f"D accuracy {rep['d_accuracy']:.3f}")
    return 0


def cmd_full(args) -> int:
    cfg = load_config(args.config)
    run = _start(args, cfg)
    if not args.resume:
        run.reset()
    t0 = time.perf_counter()

    def stage(name):
        if args.resume and run.is_done(name):
            log.info("skipping %s (already complete)", name)
            return False
        log.info("stage %s", name)
        return True

    if stage("gen-data"):
        pipeline.stage_gen_data(cfg, run.dataset)
        run.mark("gen-data")
    ds = load_dataset(run.dataset)
    if stage("pretrain"):
        _, metrics = pipeline.stage_pretrain(cfg, ds, run.ckpt, log_fn=run.log)
        seconds = metrics.pop("seconds")
        run.update_report("pretrain", metrics, seconds)
        run.mark("pretrain")
    if stage("mine"):
        summary = pipeline.stage_mine(cfg, ds, run.ckpt, run.root, log_fn=run.log)
        run.update_report("mining_run", {"steps_run": summary["steps_run"]}, summary["seconds"])
        run.mark("mine")
    if stage("eval"):
        _eval_into(run, cfg)
    if stage("ablations"):
        t1 = time.perf_counter()
        abl, _ = pipeline.stage_ablations(cfg, ds, run.ckpt, run.ablations)
        run.update_report("ablations", abl, time.perf_counter() - t1)
        run.mark("ablations")
    if stage("probe"):
        t1 = time.perf_counter()
        run.update_report("probe", pipeline.stage_probe(cfg, ds, run.ckpt),
                          time.perf_counter() - t1)
        run.mark("probe")
    if stage("ganverify"):
        _gan_into(run, cfg)
    if stage("render"):
        pipeline.stage_render(run)
        run.mark("render")
    run.update_report("acceptance", pipeline.acceptance_summary(run.read_report(), cfg))
    report = run.record_time("full", time.perf_counter() - t0)
    run.mark("full")
    for name, rec in report["acceptance"].items():
        print(f"{name:16s} {'PASS' if rec['passed'] else 'FAIL'}")
    print(f"report: {run.report}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and error contract
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiminer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *flags):
        sp = sub.add_parser(name, help=help_)
        for flag in flags:
            sp.add_argument(f"--{flag}", default=None)
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic dataset", "config", "out")
    add("pretrain", cmd_pretrain, "pretrain extractor and modulator", "config", "data", "out")
    add("mine", cmd_mine, "run multi-step region mining", "config", "data", "ckpt", "out")
    sp = add("eval", cmd_eval, "score mined regions against ground truth")
    sp.add_argument("--run-dir", required=True)
    sp = add("render", cmd_render, "write per-image mining panels")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--image-id", action="append", help="repeatable; default: first few images")
    add("ganverify", cmd_ganverify, "train the toy mapper pair and check divergence",
        "config", "out")
    sp = add("full", cmd_full, "run every stage and write report.json", "config", "out")
    sp.add_argument("--resume", action="store_true", help="skip stages that already completed")
    return p


def _error_record(exc: BaseException, command: str) -> tuple[int, dict]:
    if isinstance(exc, MultiMinerError):
        code, kind = exc.exit_code, exc.kind
    elif isinstance(exc, FloatingPointError):
        code, kind = NumericError.exit_code, NumericError.kind
    else:
        code, kind = 1, "internal"
    rec = {"command": command, "error": kind, "exit_code": code, "message": str(exc),
           "exception": type(exc).__name__}
    if isinstance(exc, MissingArtifactError):
        rec["error"] = "missing artifact"
    if isinstance(exc, NumericError) and exc.step is not None:
        rec["step"] = exc.step
    if isinstance(exc, PretrainingFailure):
        rec["metrics"] = exc.metrics
    if code == 1:
        rec["traceback"] = traceback.format_exc()
    return code, rec


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    args.resolved_out = None
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001  every failure maps to an exit code
        code, rec = _error_record(exc, args.command)
        out = args.resolved_out
        if out is None and getattr(args, "run_dir", None) and Path(args.run_dir).is_dir():
            out = Path(args.run_dir)
        if out is None and getattr(args, "out", None):
            out = Path(args.out)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(rec, indent=1))
            RunDir(out).log({"event": "error", **{k: v for k, v in rec.items()
                                                 if k != "traceback"}})
        print(json.dumps(rec), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
