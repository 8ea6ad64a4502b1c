"""encscan command line: pretrain, attack, scan, benchmark.

Exit codes: 0 ran to completion (whatever the verdict), 2 configuration
error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .attacks import AttackError
from .config import ConfigError, ToolConfig, dump_config, load_config
from .data import DataError, load_image_dir, synth_dataset
from .detection import detect
from .encoders import EncoderError, pretrain_ssl, read_checkpoint, write_checkpoint
from .inversion import InversionError, export_trigger

log = logging.getLogger("encscan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ABLATIONS = ("trigger-size", "trigger-color", "trigger-position", "shadow-size", "adaptive",
             "external-shadow")


class UsageError(Exception):
    """Bad arguments or config detected after parsing (exit code 2)."""


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="seed for the command's random draws")
    p.add_argument("--out", type=Path, required=True, help="output file or directory")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--tau", type=float, help="PL1 decision threshold")
    p.add_argument("--beta", type=float, help="similarity constraint for inversion")
    p.add_argument("--shadow", help="shadow images: 'pretraining-subset', 'synthetic[:FAMILY]' or a directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encscan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"encscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="contrastive pretraining of a clean encoder")
    _shared(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("attack", help="forge a backdoored copy of a clean encoder")
    _shared(p)
    p.add_argument("--clean", type=Path, required=True, help="clean encoder checkpoint")
    p.add_argument("--alpha", type=float, help="adaptive-attack weight")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("scan", help="invert a trigger and decide clean vs trojaned")
    _shared(p)
    p.add_argument("--encoder", type=Path, required=True, help="encoder checkpoint to scan")
    p.add_argument("--max-iters", type=int)

    p = sub.add_parser("benchmark", help="build a population, scan it and run ablations")
    _shared(p)
    p.add_argument("--resume", action="store_true", help="reuse results already in --out")
    p.add_argument("--ablation", action="append", choices=ABLATIONS, default=[],
                   help="extra study to run (repeatable)")
    p.add_argument("--n-clean", type=int)
    p.add_argument("--n-trojaned", type=int)
    return parser


def resolve_config(args) -> ToolConfig:
    """Config file, then flag overrides (flags win)."""
    cfg = load_config(args.config)
    cfg = cfg.override(scan={"tau": args.tau, "beta": args.beta, "seed": args.seed,
                             "max_iters": getattr(args, "max_iters", None)})
    if args.command == "pretrain":
        cfg = cfg.override(pretrain={"seed": args.seed, "epochs": args.epochs})
    if args.command == "attack":
        cfg = cfg.override(attack={"seed": args.seed, "alpha": args.alpha, "epochs": args.epochs})
    if args.command == "benchmark":
        cfg = cfg.override(harness={"seed": args.seed, "n_clean": args.n_clean,
                                    "n_trojaned": args.n_trojaned})
    if args.shadow is not None:
        cfg = cfg.override(shadow=_shadow_flag(args.shadow))
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        cfg.attack.trigger.origin(cfg.data.shape)
    except DataError as exc:
        raise ConfigError(f"attack.trigger: {exc}") from None
    return cfg


def _shadow_flag(value: str) -> dict:
    if value == "pretraining-subset":
        return {"source": value}
    if value == "synthetic" or value.startswith("synthetic:"):
        family = value.partition(":")[2] or "B"
        return {"source": "synthetic", "family": family}
    if not Path(value).is_dir():
        raise UsageError(f"--shadow {value!r} is neither a known source nor a directory")
    return {"source": "dir", "path": value}


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands

def cmd_pretrain(cfg: ToolConfig, out: Path) -> dict:
    d = cfg.data
    start = time.perf_counter()
    enc = pretrain_ssl(synth_dataset(d.seed, d.count, d.shape, d.family), cfg.pretrain)
    write_checkpoint(enc, out)
    summary = {"checkpoint": str(out), "digest": enc.digest(), "epochs": cfg.pretrain.epochs,
               "images": d.count, "seed": cfg.pretrain.seed, "seconds": time.perf_counter() - start}
    _emit(summary)
    return summary


def cmd_attack(cfg: ToolConfig, clean_path: Path, out: Path) -> dict:
    from .harness import Workbench, forge_gated

    clean = read_checkpoint(clean_path)
    if tuple(clean.input_shape) != tuple(cfg.data.shape):
        raise ConfigError(f"data.shape {cfg.data.shape} does not match checkpoint {clean.input_shape}")
    bench = Workbench.from_config(cfg)
    trojaned, report, spec = forge_gated(clean, bench, None, 1)
    write_checkpoint(trojaned, out)
    doc = {"checkpoint": str(out), "attack": spec.summary(), "report": report.to_dict(),
           "clean_digest": clean.digest(), "digest": trojaned.digest()}
    out.with_suffix(".attack.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _emit(doc)
    return doc


def cmd_scan(cfg: ToolConfig, encoder_path: Path, out: Path) -> dict:
    from .harness import make_shadow

    enc = read_checkpoint(encoder_path)
    shadow = make_shadow(cfg)
    eid = enc.provenance.get("id") or encoder_path.stem
    report, result = detect(enc, shadow, cfg.scan.inversion(), cfg.scan.tau, encoder_id=eid)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    export_trigger(result, out, "trigger")
    _emit(json.loads(report.to_json()))
    return json.loads(report.to_json())


def cmd_benchmark(cfg: ToolConfig, out: Path, ablations=(), resume: bool = False,
                  workers: int = 1) -> dict:
    from . import harness as H

    if out.exists() and any(out.iterdir()) and not resume:
        raise UsageError(f"{out} is not empty; pass --resume to continue it")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    bench = H.Workbench.from_config(cfg)
    spec = H.PopulationSpec.from_config(cfg)
    inv = cfg.scan.inversion()
    tau = cfg.scan.tau

    pop = H.build_population(spec, bench, out / "population", workers)
    result = H.scan_population(pop, bench.shadow, inv, tau, out / "scan", workers)
    summary = {"population": result.summary()}

    bases = [read_checkpoint(p) for p in sorted((pop.root / "bases").glob("clean-*.ckpt"))]
    for name in ablations:
        cached = out / "ablations" / f"{name}.json"
        if cached.exists():
            summary[name] = json.loads(cached.read_text())
            continue
        rows = _run_ablation(name, cfg, bench, pop, bases, inv, tau, out, workers)
        cached.parent.mkdir(parents=True, exist_ok=True)
        cached.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        summary[name] = rows
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary["population"])
    return summary


def _run_ablation(name, cfg, bench, pop, bases, inv, tau, out, workers):
    from . import harness as H

    abl = out / "ablations"
    h = cfg.harness
    if name.startswith("trigger-"):
        variants = H.TRIGGER_VARIANTS[name.split("-", 1)[1]]
        return H.ablation_trigger(variants, bases[:h.ablation_bases], bench, inv, out_dir=abl / name)
    if name == "shadow-size":
        truth = pop.ground_truth()
        eid = next(e for e in sorted(truth) if truth[e]["trojaned"])
        pool = bench.pretraining.sample(min(max(h.shadow_sizes), len(bench.pretraining)), seed=cfg.shadow.seed)
        return H.ablation_shadow(read_checkpoint(pop.checkpoint(eid)), pool, h.shadow_sizes, inv,
                                 out_dir=abl / name)
    if name == "adaptive":
        rows = H.ablation_adaptive(bases[0], bench, h.alphas, inv, out_dir=abl / name)
        return {"rows": rows, "violations": H.trend_violations(rows)}
    if name == "external-shadow":
        d = cfg.data
        if cfg.shadow.source == "dir" and cfg.shadow.path:
            external = load_image_dir(cfg.shadow.path, d.shape)
        else:
            external = synth_dataset(cfg.shadow.seed, cfg.shadow.size, d.shape, h.external_family,
                                     source=f"synthetic-{h.external_family}")
        res = H.external_shadow_study(pop, external, inv, tau, abl / name / "scan", workers)
        return res.summary()
    raise UsageError(f"unknown ablation {name}")


# --------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "pretrain":
            cmd_pretrain(cfg, args.out)
        elif args.command == "attack":
            cmd_attack(cfg, args.clean, args.out)
        elif args.command == "scan":
            cmd_scan(cfg, args.encoder, args.out)
        else:
            cmd_benchmark(cfg, args.out, args.ablation, args.resume, args.workers)
    except (ConfigError, UsageError) as exc:
        print(f"encscan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EncoderError, InversionError, AttackError, DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"encscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
