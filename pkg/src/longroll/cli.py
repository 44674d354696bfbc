"""Command-line entry point: ``longroll <subcommand> ...``.

Exit codes: 0 success, 2 configuration error or missing prerequisite,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, bench, config as config_mod, pipeline
from .numerics import ContractError, NumericError, write_tensor

log = logging.getLogger("longroll")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def parse_set(items: Sequence[str]) -> dict:
    """``section.key=value`` pairs (value parsed as JSON, else kept as text)."""
    out: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise ContractError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(sec, {})[name] = value
    return out


def write_run_meta(out: Path, command: str, cfg: dict, argv: Sequence[str], seeds: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "argv": list(argv), "config": config_mod.document(cfg),
           "config_hash": config_mod.config_hash(cfg), "seeds": seeds, "code_version": code_version()}
    tmp = out / f"run_{command}.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(out / f"run_{command}.json")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg) -> None:
    from .scenegen import make_corpus

    d = cfg["data"]
    manifest = make_corpus(d["count"], d["seed"], args.out, d["frames"], d["size"], d["num_points"])
    write_run_meta(args.out, "gen-data", cfg, args.argv, {"data": d["seed"]})
    log.info("event=gen_data clips=%d out=%s", len(manifest["clips"]), args.out)


def cmd_train_ae(args, cfg) -> None:
    _, hist = pipeline.run_train_ae(cfg, args.data, args.out)
    write_run_meta(args.out, "train-ae", cfg, args.argv, {"train": cfg["train"]["seed"]})
    log.info("event=train_ae_done loss_init=%.6f loss_final=%.6f", hist[0], hist[-1])


def cmd_train(args, cfg) -> None:
    path, rows = pipeline.run_stage(cfg, args.data, args.out, args.stage, resume=args.resume)
    write_run_meta(args.out, f"train-stage{args.stage}", cfg, args.argv,
                   {"train": cfg["train"]["seed"], "stage_stream": cfg["train"]["seed"] + 1000 * args.stage})
    log.info("event=stage_done stage=%d iterations=%d checkpoint=%s", args.stage, len(rows), path)


def cmd_rollout(args, cfg) -> None:
    from .scenegen import long_spec
    from .rollout import total_for

    ae = pipeline.load_ae(_require(pipeline.ae_path(args.run)))
    model, meta = pipeline.load_stage(args.run, args.stage)
    ro = cfg["rollout"]
    windows = args.clips if args.clips is not None else ro["windows"]
    total = total_for(windows, ro["clip_frames"], ro["overlap"])
    spec = long_spec(args.seed, total, cfg["data"]["size"], cfg["data"]["size"])
    args.out.mkdir(parents=True, exist_ok=True)
    frames_path = args.out / "frames.lvt"
    tmp = frames_path.with_name(frames_path.name + ".tmp")
    count = 0
    with open(tmp, "wb") as fh:
        def sink(frame):
            nonlocal count
            write_tensor(fh, frame)
            count += 1
            if count % ro["clip_frames"] == 0:
                log.info("event=rollout frames=%d/%d", count, total)

        out = pipeline.rollout_scene(cfg, model, ae, spec, windows, noise_seed=args.seed,
                                     n_hist_max=meta.get("n_hist_max", 0), global_norm=ro["global_norm"],
                                     unified_noise=ro["unified_noise"], keep_frames=False, sink=sink)
    tmp.replace(frames_path)
    res = out.result
    manifest = {"plan": out.plan.to_dict(), "seed": args.seed, "stage": args.stage, "scene": spec.to_dict(),
                "config_hash": config_mod.config_hash(cfg), "frames": count, "frames_file": frames_path.name,
                "noise_digests": res.noise_digests, "cond_digests": res.cond_digests,
                "peak_state_frames": res.peak_state_frames}
    (args.out / "rollout_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    write_run_meta(args.out, "rollout", cfg, args.argv, {"noise": args.seed, "scene": args.seed})
    log.info("event=rollout_done clips=%d frames=%d", res.clips, count)


def _progress(label, seed, report) -> None:
    log.info("event=eval label=%s seed=%d mean_seam=%.5f drift=%.5f", label, seed, report.mean_seam, report.drift)


def cmd_eval(args, cfg) -> None:
    reports = bench.run_ablation(cfg, args.run, args.out, suite=[args.label], seeds=args.seeds,
                                 windows=args.windows, progress=_progress)
    write_run_meta(args.out, "eval", cfg, args.argv, {"eval": bench.eval_seeds(cfg, args.seeds)})
    log.info("event=eval_done reports=%d", len(reports))


def cmd_ablate(args, cfg) -> None:
    reports = bench.run_ablation(cfg, args.run, args.out, suite=args.suite, seeds=args.seeds,
                                 windows=args.windows, progress=_progress)
    write_run_meta(args.out, "ablate", cfg, args.argv, {"eval": bench.eval_seeds(cfg, args.seeds)})
    for row in bench.summarize(reports):
        log.info("event=ablation label=%s mean_seam=%.5f drift=%.5f mean_ssim=%.4f", row["label"],
                 row["mean_seam"], row["drift_slope"], row["mean_ssim"])


def cmd_report(args, cfg) -> None:
    from .report import render_report

    out = args.out if args.out is not None else args.input
    for path in render_report(args.input, out, args.run):
        log.info("event=figure path=%s", path)


def _require(path: Path) -> Path:
    if not path.exists():
        raise pipeline.MissingPrerequisite(f"missing prerequisite: {path}")
    return path


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")

    p = argparse.ArgumentParser(prog="longroll", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render the synthetic training corpus")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-ae", parents=[common], help="fit the frame autoencoder")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("train", parents=[common], help="run one training stage")
    s.add_argument("--stage", type=int, choices=[0, 1, 2, 3], required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the stage's partial checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rollout", parents=[common], help="generate a long video autoregressively")
    s.add_argument("--run", type=Path, required=True, help="run directory with checkpoints")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--clips", type=int, help="number of clip windows")
    s.add_argument("--seed", type=int, default=0, help="scene and noise seed")
    s.add_argument("--stage", type=int, choices=[1, 2, 3], default=3)
    s.set_defaults(func=cmd_rollout)

    for name, func, helptext in (("eval", cmd_eval, "score one configuration against ground truth"),
                                 ("ablate", cmd_ablate, "score the ablation suite")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--run", type=Path, required=True, help="run directory with checkpoints")
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--seeds", type=int, nargs="+")
        s.add_argument("--windows", type=int)
        if name == "eval":
            s.add_argument("--label", choices=list(bench.ABLATIONS), default="full")
        else:
            s.add_argument("--suite", nargs="+", choices=list(bench.ABLATIONS))
        s.set_defaults(func=func)

    s = sub.add_parser("report", parents=[common], help="render figures from evaluation CSVs")
    s.add_argument("--in", dest="input", type=Path, required=True, help="directory holding report.csv/seams.csv")
    s.add_argument("--out", type=Path, help="figure directory (default: --in)")
    s.add_argument("--run", type=Path, help="run directory whose training logs to plot")
    s.set_defaults(func=cmd_report)
    return p


def resolve_config(args) -> dict:
    overrides = parse_set(args.set)
    flag_map = {"count": ("data", "count"), "epochs": ("autoencoder", "epochs")}
    for attr, (sec, key) in flag_map.items():
        if getattr(args, attr, None) is not None:
            overrides.setdefault(sec, {})[key] = getattr(args, attr)
    if getattr(args, "seed", None) is not None:
        sec = "data" if args.command == "gen-data" else "train" if args.command in ("train-ae", "train") else None
        if sec is not None:
            overrides.setdefault(sec, {})["seed"] = args.seed
    return config_mod.load(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv = argv
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("longroll")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ContractError as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
