"""Population experiments: build clean/trojaned encoder zoos, scan them, score.

Scanning only ever sees anonymized checkpoints; ground truth lives in a
separate ``ground_truth.json`` that the scorer reads after all scans finish.
Every stage writes one file per member and skips members whose file already
exists, so interrupted runs resume where they stopped.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .attacks import AttackReport, AttackSpec, attack_report, forge, pick_target
from .config import ToolConfig
from .data import DataError, LabeledSet, PatchTrigger, ShadowDataset, load_image_dir, synth_dataset, synth_labeled
from .detection import DEFAULT_TAU, ScanReport, detect, is_trojaned
from .encoders import EncoderHandle, pretrain_ssl, read_checkpoint, write_checkpoint
from .inversion import InversionConfig, export_trigger

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth.json"


class PopulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# shared experimental setting

@dataclass
class Workbench:
    """Datasets shared by every experiment built from one :class:`ToolConfig`.

    ``pretraining`` trains clean encoders, ``reference`` is the pretraining
    subset the attacker fine-tunes on, ``probe`` is the labeled downstream task
    and ``shadow`` is what the scanner inverts triggers on.
    """

    config: ToolConfig
    pretraining: ShadowDataset
    reference: ShadowDataset
    probe: LabeledSet
    shadow: ShadowDataset

    @classmethod
    def from_config(cls, config: ToolConfig) -> "Workbench":
        d = config.data
        pre = synth_dataset(d.seed, d.count, d.shape, d.family)
        ref = pre.sample(min(config.attack.reference_size, len(pre)), seed=d.seed + 1)
        probe = synth_labeled(config.attack.probe_seed, config.attack.probe_count, d.shape, d.family)
        return cls(config, pre, ref, probe, make_shadow(config, pre))


def make_shadow(config: ToolConfig, pretraining: ShadowDataset | None = None) -> ShadowDataset:
    s, d = config.shadow, config.data
    if s.source == "pretraining-subset":
        if pretraining is None:
            pretraining = synth_dataset(d.seed, d.count, d.shape, d.family)
        return pretraining.sample(min(s.size, len(pretraining)), seed=s.seed)
    if s.source == "synthetic":
        return synth_dataset(s.seed, s.size, d.shape, s.family, source=f"synthetic-{s.family}")
    if s.source == "dir":
        if not s.path:
            raise DataError("shadow.source 'dir' needs shadow.path")
        shadow = load_image_dir(s.path, d.shape)
        return shadow.sample(min(s.size, len(shadow)), seed=s.seed) if len(shadow) > s.size else shadow
    raise DataError(f"unknown shadow source {s.source!r}")


def attack_spec(config: ToolConfig, target_image: np.ndarray, **overrides) -> AttackSpec:
    a = config.attack
    kw = dict(target_image=target_image, trigger=a.trigger, w_utility=a.w_utility,
              w_target=a.w_target, w_backdoor=a.w_backdoor, alpha=a.alpha, epochs=a.epochs,
              batch=a.batch, lr=a.lr, seed=a.seed, target_label=a.target_label)
    kw.update(overrides)
    return AttackSpec(**kw)


def forge_gated(clean: EncoderHandle, bench: Workbench, gate: float | None, retries: int,
                **overrides) -> tuple[EncoderHandle, AttackReport, AttackSpec]:
    """Forge until the downstream ASR exceeds ``gate``, trying ``retries`` seeds.

    ``gate=None`` accepts the first attempt.
    """
    label = overrides.pop("target_label", bench.config.attack.target_label)
    target = pick_target(bench.probe, label, clean)
    seed0 = overrides.pop("seed", bench.config.attack.seed)
    train, test = bench.probe.split(0.7)
    tried = []
    for attempt in range(max(retries, 1)):
        spec = attack_spec(bench.config, target, seed=seed0 + attempt, target_label=label, **overrides)
        trojaned = forge(clean, spec, bench.reference).encoder
        report = attack_report(clean, trojaned, spec, train, label, test)
        tried.append(report.asr)
        if gate is None or report.asr > gate:
            return trojaned, report, spec
        log.info("attack seed %d: asr %.3f <= gate %.3f, retrying", spec.seed, report.asr, gate)
    raise PopulationError(f"attack gate {gate} not met after {len(tried)} seeds (asr {tried})")


# --------------------------------------------------------------------------
# populations

@dataclass(frozen=True)
class PopulationSpec:
    """Desk-scale zoo: ``n_clean`` pretrained encoders plus ``n_trojaned`` forged ones.

    Trojaned member ``j`` is forged from clean base ``j % n_clean`` with the
    ``j``-th entry (cyclically) of ``triggers`` and ``alphas``.
    """

    n_clean: int = 10
    n_trojaned: int = 10
    triggers: tuple[PatchTrigger, ...] = (PatchTrigger(),)
    alphas: tuple[float, ...] = (0.0,)
    asr_gate: float = 0.95
    retries: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_clean < 1 or self.n_trojaned < 1:
            raise PopulationError("population counts must be >= 1")
        if not self.triggers or not self.alphas:
            raise PopulationError("need at least one trigger and one alpha")

    @classmethod
    def from_config(cls, config: ToolConfig) -> "PopulationSpec":
        h = config.harness
        return cls(n_clean=h.n_clean, n_trojaned=h.n_trojaned, triggers=(config.attack.trigger,),
                   alphas=(config.attack.alpha,), asr_gate=h.asr_gate, retries=h.retries, seed=h.seed)

    def plan(self) -> list[dict]:
        """Members in anonymized order; ``id`` carries no hint of the label."""
        members = [{"kind": "clean", "index": i} for i in range(self.n_clean)]
        members += [{"kind": "trojaned", "index": j, "base": j % self.n_clean,
                     "trigger": self.triggers[j % len(self.triggers)].to_dict(),
                     "alpha": float(self.alphas[j % len(self.alphas)])} for j in range(self.n_trojaned)]
        order = np.random.default_rng(self.seed).permutation(len(members))
        width = max(2, len(str(len(members) - 1)))
        return [{**members[k], "id": f"enc-{rank:0{width}d}"} for rank, k in enumerate(order)]


@dataclass
class Population:
    root: Path
    ids: list[str]

    def checkpoint(self, eid: str) -> Path:
        return self.root / "encoders" / f"{eid}.ckpt"

    @property
    def paths(self) -> dict[str, Path]:
        return {eid: self.checkpoint(eid) for eid in self.ids}

    def ground_truth(self) -> dict[str, dict]:
        return json.loads((self.root / GROUND_TRUTH).read_text())

    @classmethod
    def open(cls, root) -> "Population":
        root = Path(root)
        truth = json.loads((root / GROUND_TRUTH).read_text())
        return cls(root, sorted(truth))


def _clean_seed(spec: PopulationSpec, config: ToolConfig, index: int) -> int:
    return config.pretrain.seed + 1000 * spec.seed + index


def build_population(spec: PopulationSpec, bench: Workbench, out_dir,
                     workers: int = 1) -> Population:
    """Pretrain, forge and checkpoint every member, recording ground truth apart.

    Base encoders go to ``bases/``; scan inputs go to ``encoders/`` with all
    provenance stripped except the anonymous id.  Members with a checkpoint
    already on disk are skipped.
    """
    root = Path(out_dir)
    (root / "bases").mkdir(parents=True, exist_ok=True)
    (root / "encoders").mkdir(parents=True, exist_ok=True)
    config = bench.config
    plan = spec.plan()
    (root / "population.json").write_text(json.dumps(
        {"n_clean": spec.n_clean, "n_trojaned": spec.n_trojaned, "asr_gate": spec.asr_gate,
         "retries": spec.retries, "seed": spec.seed, "config": config.to_dict()}, indent=2, sort_keys=True))
    truth_path = root / GROUND_TRUTH
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else {}

    base_jobs = [(i, _clean_seed(spec, config, i), root / "bases" / f"clean-{i:03d}.ckpt")
                 for i in range(spec.n_clean)]
    for _ in _fan_out(_pretrain_job, [(bench, seed, path) for _, seed, path in base_jobs
                                      if not path.exists()], workers):
        pass
    bases = {i: path for i, _, path in base_jobs}

    jobs = []
    for m in plan:
        if m["id"] in truth and (root / "encoders" / f"{m['id']}.ckpt").exists():
            continue
        jobs.append((bench, spec, m, bases, root / "encoders" / f"{m['id']}.ckpt"))
    failures = []
    for entry in _fan_out(_member_job, jobs, workers):
        if "error" in entry:
            failures.append(entry)
            continue
        truth[entry["id"]] = entry
        truth_path.write_text(json.dumps(dict(sorted(truth.items())), indent=2, sort_keys=True))
    if failures:
        raise PopulationError("attack gate failed for: " + "; ".join(
            f"{f['id']} (trigger {f['trigger']}, alpha {f['alpha']}): {f['error']}" for f in failures))
    return Population(root, sorted(m["id"] for m in plan))


def _pretrain_job(bench: Workbench, seed: int, path: Path) -> None:
    enc = pretrain_ssl(bench.pretraining, replace(bench.config.pretrain, seed=seed))
    write_checkpoint(enc, path)


def _member_job(bench: Workbench, spec: PopulationSpec, member: dict, bases: dict, path: Path) -> dict:
    entry = {k: v for k, v in member.items()}
    if member["kind"] == "clean":
        enc = read_checkpoint(bases[member["index"]])
        entry.update(trojaned=False, base=member["index"])
    else:
        clean = read_checkpoint(bases[member["base"]])
        trig = PatchTrigger.from_dict(member["trigger"])
        try:
            enc, report, aspec = forge_gated(
                clean, bench, spec.asr_gate, spec.retries, trigger=trig, alpha=member["alpha"],
                seed=bench.config.attack.seed + 100 * member["index"])
        except PopulationError as exc:
            return {**entry, "error": str(exc)}
        entry.update(trojaned=True, attack=aspec.summary(), attack_report=report.to_dict())
    anon = EncoderHandle(enc.arch, enc.input_shape, enc.embedding_dim, enc.module, {"id": member["id"]})
    write_checkpoint(anon, path)
    return entry


def _fan_out(fn: Callable, jobs: list[tuple], workers: int) -> Iterable:
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            yield fn(*job)
        return
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        for f in futures:
            yield f.result()


def _worker_init() -> None:
    torch.set_num_threads(1)


# --------------------------------------------------------------------------
# scanning and scoring

@dataclass
class BenchmarkResult:
    reports: dict[str, ScanReport]
    truth: dict[str, bool]
    tau: float
    errors: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(self.reports) - set(self.truth)
        if missing:
            raise PopulationError(f"no ground truth for {sorted(missing)}")

    def _verdicts(self):
        return [(is_trojaned(r.pl1, self.tau), self.truth[eid]) for eid, r in self.reports.items()]

    @property
    def confusion(self) -> dict[str, int]:
        v = self._verdicts()
        return {"tp": sum(f and t for f, t in v), "tn": sum(not f and not t for f, t in v),
                "fp": sum(f and not t for f, t in v), "fn": sum(not f and t for f, t in v)}

    @property
    def accuracy(self) -> float:
        c = self.confusion
        total = sum(c.values())
        return (c["tp"] + c["tn"]) / total if total else float("nan")

    def pl1s(self, trojaned: bool) -> list[float]:
        return [r.pl1 for eid, r in sorted(self.reports.items()) if self.truth[eid] == trojaned]

    def roc(self) -> tuple[list[tuple[float, float, float]], float]:
        return roc_auc(self.pl1s(False), self.pl1s(True))

    def rescored(self, tau: float) -> "BenchmarkResult":
        return BenchmarkResult({k: r.rescored(tau) for k, r in self.reports.items()}, self.truth, tau,
                               dict(self.errors))

    def summary(self) -> dict:
        clean, troj = self.pl1s(False), self.pl1s(True)
        times = [r.wall_time for r in self.reports.values()]
        out = {"tau": self.tau, "n_scanned": len(self.reports), "n_errors": len(self.errors),
               "errors": dict(sorted(self.errors.items())), **self.confusion, "accuracy": self.accuracy,
               "pl1_clean": _describe(clean), "pl1_trojaned": _describe(troj),
               "scan_seconds": _describe(times)}
        if clean and troj:
            out["auc"] = self.roc()[1]
        return out

    def write(self, out_dir, bins: int = 20) -> dict[str, Path]:
        """Summary JSON, ROC points, per-encoder PL1 table and histogram counts."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"summary": out / "summary.json", "pl1": out / "pl1.csv",
                 "hist": out / "pl1_hist.csv", "roc": out / "roc.csv"}
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(paths["pl1"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["encoder_id", "pl1", "l1_norm", "flagged", "trojaned"])
            for eid, r in sorted(self.reports.items()):
                w.writerow([eid, repr(r.pl1), repr(r.l1_norm), int(is_trojaned(r.pl1, self.tau)),
                            int(self.truth[eid])])
        clean, troj = self.pl1s(False), self.pl1s(True)
        edges = np.linspace(0.0, max([0.2, *clean, *troj]), bins + 1)
        with open(paths["hist"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "clean", "trojaned"])
            hc, _ = np.histogram(clean, edges)
            ht, _ = np.histogram(troj, edges)
            for lo, hi, a, b in zip(edges[:-1], edges[1:], hc, ht):
                w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(a), int(b)])
        if clean and troj:
            points, _ = self.roc()
            with open(paths["roc"], "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "fpr", "tpr"])
                for thr, fpr, tpr in points:
                    w.writerow([repr(thr), repr(fpr), repr(tpr)])
        return paths


def _describe(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0}
    a = np.asarray(values, dtype=np.float64)
    return {"n": len(a), "mean": float(a.mean()), "median": float(np.median(a)),
            "min": float(a.min()), "max": float(a.max()), "values": [float(v) for v in a]}


def roc_auc(clean_pl1s: Sequence[float], trojaned_pl1s: Sequence[float]
            ) -> tuple[list[tuple[float, float, float]], float]:
    """ROC for the rule ``pl1 < threshold`` with trojaned as the positive class.

    Thresholds sweep every observed value plus ``+inf``; returns
    ``[(threshold, fpr, tpr), ...]`` in increasing threshold order and the
    trapezoidal area under the curve.
    """
    clean = np.asarray(clean_pl1s, dtype=np.float64)
    troj = np.asarray(trojaned_pl1s, dtype=np.float64)
    if clean.size == 0 or troj.size == 0:
        raise ValueError("ROC needs at least one clean and one trojaned value")
    thresholds = np.append(np.unique(np.concatenate([clean, troj])), np.inf)
    fpr = (clean[None, :] < thresholds[:, None]).mean(axis=1)
    tpr = (troj[None, :] < thresholds[:, None]).mean(axis=1)
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return [(float(t), float(f), float(p)) for t, f, p in zip(thresholds, fpr, tpr)], auc


def _scan_job(eid: str, path: Path, shadow: ShadowDataset, config: InversionConfig, tau: float,
              out: Path | None) -> tuple[str, ScanReport | None, str | None]:
    try:
        enc = read_checkpoint(path)
        report, result = detect(enc, shadow, config, tau, encoder_id=eid)
    except Exception as exc:  # recorded per encoder, scoring continues
        log.warning("scan of %s failed: %s", eid, exc)
        return eid, None, f"{type(exc).__name__}: {exc}"
    if out is not None:
        (out / "reports" / f"{eid}.json").write_text(report.to_json() + "\n")
        export_trigger(result, out / "triggers", eid)
    return eid, report, None


def scan_encoders(encoders: dict[str, Path], shadow: ShadowDataset, config: InversionConfig,
                  tau: float = DEFAULT_TAU, out_dir=None, workers: int = 1
                  ) -> tuple[dict[str, ScanReport], dict[str, str]]:
    """Scan each checkpoint, reusing reports already written under ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else None
    reports, errors, jobs = {}, {}, []
    if out is not None:
        (out / "reports").mkdir(parents=True, exist_ok=True)
    for eid, path in sorted(encoders.items()):
        done = out / "reports" / f"{eid}.json" if out is not None else None
        if done is not None and done.exists():
            reports[eid] = ScanReport.from_json(done.read_text()).rescored(tau)
            continue
        jobs.append((eid, Path(path), shadow, config, tau, out))
    for eid, report, err in _fan_out(_scan_job, jobs, workers):
        if err is None:
            reports[eid] = report
        else:
            errors[eid] = err
    return reports, errors


def score(reports: dict[str, ScanReport], errors: dict[str, str], ground_truth: dict[str, dict],
          tau: float) -> BenchmarkResult:
    truth = {eid: bool(ground_truth[eid]["trojaned"]) for eid in reports if eid in ground_truth}
    return BenchmarkResult(dict(reports), truth, tau, dict(errors))


def scan_population(population: Population, shadow: ShadowDataset, config: InversionConfig,
                    tau: float = DEFAULT_TAU, out_dir=None, workers: int = 1) -> BenchmarkResult:
    """Scan every member, then (and only then) read ground truth and score."""
    reports, errors = scan_encoders(population.paths, shadow, config, tau, out_dir, workers)
    result = score(reports, errors, population.ground_truth(), tau)
    if out_dir is not None:
        result.write(out_dir)
    return result


def external_shadow_study(population: Population, external: ShadowDataset, config: InversionConfig,
                          tau: float = DEFAULT_TAU, out_dir=None, workers: int = 1) -> BenchmarkResult:
    """Same scoring as :func:`scan_population` with a shadow set from elsewhere."""
    if external is None or len(external) == 0:
        raise DataError("external shadow set is empty")
    return scan_population(population, external, config, tau, out_dir, workers)


# --------------------------------------------------------------------------
# ablations

def ablation_trigger(variants: Sequence[tuple[str, PatchTrigger]], bases: Sequence[EncoderHandle],
                     bench: Workbench, config: InversionConfig, gate: float | None = None,
                     retries: int = 1, out_dir=None) -> list[dict]:
    """Forge one encoder per (variant, base) and report mean footprint per variant.

    Rows carry ``size_ratio`` (trigger area over image area), the mean
    inverted ``l1_norm`` and ``pl1`` and the per-encoder values.
    """
    shape = bench.config.data.shape
    for name, trig in variants:
        trig.origin(shape)  # every variant must fit
    rows = []
    for name, trig in variants:
        pl1s, l1s, asrs = [], [], []
        for k, clean in enumerate(bases):
            enc, rep, _ = forge_gated(clean, bench, gate, retries, trigger=trig)
            report, _ = detect(enc, bench.shadow, config, encoder_id=f"{name}-{k}")
            pl1s.append(report.pl1)
            l1s.append(report.l1_norm)
            asrs.append(rep.asr)
        rows.append({"variant": name, "trigger": trig.to_dict(),
                     "size_ratio": trig.area / (shape[0] * shape[1]),
                     "l1_norm": float(np.mean(l1s)), "pl1": float(np.mean(pl1s)),
                     "pl1_values": pl1s, "asr": float(np.mean(asrs))})
        log.info("trigger ablation %s: pl1 %.4f", name, rows[-1]["pl1"])
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation_trigger.csv",
                    ["variant", "size_ratio", "l1_norm", "pl1", "asr"])
    return rows


def ablation_shadow(encoder: EncoderHandle, pool: ShadowDataset, sizes: Sequence[int],
                    config: InversionConfig, out_dir=None) -> list[dict]:
    """Scan one encoder with shadow subsets of each size ``M`` drawn from ``pool``."""
    for m in sizes:
        if m < 2:
            raise DataError(f"shadow size must be >= 2, got {m}")
        if m > len(pool):
            raise DataError(f"shadow size {m} exceeds the pool of {len(pool)}")
    rows = []
    for m in sizes:
        shadow = pool.sample(m, seed=config.seed)
        report, _ = detect(encoder, shadow, config)
        rows.append({"M": int(m), "l1_norm": report.l1_norm, "pl1": report.pl1,
                     "converged": report.converged})
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation_shadow.csv", ["M", "l1_norm", "pl1", "converged"])
    return rows


def ablation_adaptive(clean: EncoderHandle, bench: Workbench, alphas: Sequence[float],
                      config: InversionConfig, out_dir=None) -> list[dict]:
    """Forge with each ``alpha`` (same seed) and record utility, ASR and footprint."""
    alphas = [float(a) for a in alphas]
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending")
    rows = []
    for alpha in alphas:
        enc, rep, _ = forge_gated(clean, bench, None, 1, alpha=alpha)
        report, _ = detect(enc, bench.shadow, config, encoder_id=f"alpha-{alpha:g}")
        rows.append({"alpha": alpha, "accuracy": rep.clean_accuracy, "asr": rep.asr,
                     "l1_norm": report.l1_norm, "pl1": report.pl1})
        log.info("adaptive alpha %g: asr %.3f pl1 %.4f", alpha, rep.asr, report.pl1)
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation_adaptive.csv", ["alpha", "accuracy", "asr", "l1_norm", "pl1"])
    return rows


def trend_violations(rows: Sequence[dict]) -> dict[str, int]:
    """Adjacent pairs where ASR rises or PL1 falls as alpha grows."""
    asr = sum(b["asr"] > a["asr"] for a, b in zip(rows, rows[1:]))
    pl1 = sum(b["pl1"] < a["pl1"] for a, b in zip(rows, rows[1:]))
    return {"asr": int(asr), "pl1": int(pl1)}


TRIGGER_VARIANTS: dict[str, list[tuple[str, PatchTrigger]]] = {
    "size": [(f"{s}x{s}", PatchTrigger(s, s)) for s in (5, 7, 10, 12, 14)],
    "color": [("white", PatchTrigger()), ("green", PatchTrigger(fill=(0.0, 1.0, 0.0))),
              ("random", PatchTrigger(fill="random", texture_seed=3))],
    "position": [("lower-right", PatchTrigger()), ("center", PatchTrigger(position="center")),
                 ("upper-left", PatchTrigger(position="upper-left"))],
}


def write_table(rows: Sequence[dict], path: Path, columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])
    return path

