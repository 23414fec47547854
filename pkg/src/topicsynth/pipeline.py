"""End-to-end orchestration: simulate, extract statistics, fit, sample, attack, validate.

Each stage reads and writes declared files only. The fit and sample stages
refuse anything that is not a differentially private statistics directory or
a model checkpoint, which keeps the ground-truth population behind the
privacy boundary.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from typing import Any, Callable

import numpy as np

from . import __version__
from .api import ApiConfig, PopulationConfig, generate_population, observe_traces
from .core import (
    GroundTruthPopulation,
    SequenceDataset,
    Taxonomy,
    Trace,
    child_seed,
    make_rng,
    pad_sets_array,
    read_sequences,
    write_sequences,
    write_traces,
)
from .dp_stats import (
    SIDECAR,
    PrivacyParams,
    StatisticsBundle,
    count_marginals,
    private_statistics,
    raw_statistics,
    read_statistics,
    write_statistics,
)
from .model import CheckpointError, load_model, model_statistics, sample_dataset, save_model
from .reid import measure_reid_risk
from .trainer import TrainConfig, train
from .validation import (
    distinct_topics_distribution,
    empirical_statistics,
    error_histogram,
    pearson,
    statistic_errors,
    stationarity_report,
)

logger = logging.getLogger(__name__)

POPULATION_KIND = "ground-truth-population"
SYNTHETIC_KIND = "synthetic"
SIDECAR_SUFFIX = ".manifest.json"
CDF_THRESHOLDS = (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0)
REL_THRESHOLDS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0)


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class DPBoundaryError(PermissionError):
    """A stage behind the privacy boundary was handed raw data (exit code 4)."""


# --------------------------------------------------------------------------
# Configuration


@dataclasses.dataclass
class PipelineConfig:
    """Flat run configuration. Every field can be set from JSON or a CLI flag."""

    seed: int = 0
    out_dir: str = "run"
    deterministic: bool = True
    jobs: int = 1
    # API and population
    taxonomy_size: int = 469
    k: int = 5
    weeks: int = 4
    p: float = 0.05
    users: int = 10_000
    archetypes: int = 200
    zipf: float = 1.0
    dirichlet: float = 0.1
    rho: float = 0.9
    weekly_visit_topics: int | None = None
    sites: int = 2
    # privacy
    epsilon: float = math.log(3)
    delta: float = 1e-15
    split: tuple[float, float, float] = (0.25, 0.25, 0.5)
    count_fraction: float = 0.01
    no_noise: bool = False
    # training
    types: int = 500
    batch_size: int = 8192
    lr: float = 1.0
    epochs: int = 8000
    init_std: float = 0.001
    eval_every: int = 1
    eval_size: int | None = None
    target_loss: float | None = None
    # sampling
    synthetic_users: int | None = None
    pad: bool = True
    # attacks and validation
    attacks: tuple[str, ...] = ("hamming", "asymmetric")
    queries: int = 10240
    trials: int = 10
    alpha: float = 1.0
    holdout_frac: float = 0.1
    rel_threshold: float = 0.001

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        self.attacks = tuple(self.attacks)
        try:
            self.api_config()
            self.population_config()
            self.privacy_params()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.jobs < 1 or self.sites < 2 or self.queries < 0 or self.trials < 1:
            raise ConfigError("jobs >= 1, sites >= 2, queries >= 0 and trials >= 1 required")
        if self.weeks < 2:
            raise ConfigError("at least 2 weeks are needed for the statistics")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | os.PathLike, **overrides) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["split"], d["attacks"] = list(self.split), list(self.attacks)
        return d

    def api_config(self) -> ApiConfig:
        return ApiConfig(Taxonomy(self.taxonomy_size), self.p, self.k, self.weeks)

    def population_config(self) -> PopulationConfig:
        return PopulationConfig(
            self.users, self.archetypes, self.zipf, self.dirichlet, self.rho, self.weekly_visit_topics
        )

    def privacy_params(self) -> PrivacyParams:
        return PrivacyParams(self.epsilon, self.delta, tuple(self.split), self.count_fraction)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            self.types,
            self.batch_size,
            self.lr,
            self.epochs,
            self.init_std,
            child_seed(self.seed, "fit"),
            self.eval_every,
            self.eval_size,
            self.target_loss,
        )

    def stage_seed(self, stage: str, index: int = 0) -> int:
        return child_seed(self.seed, stage, index)


# --------------------------------------------------------------------------
# Files, digests and manifests


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digests(paths, root: str) -> dict[str, str]:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[os.path.relpath(full, root)] = file_digest(full)
        elif os.path.exists(p):
            out[os.path.relpath(p, root)] = file_digest(p)
    return dict(sorted(out.items()))


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_sidecar(path: str, kind: str, **info) -> None:
    """Digest and provenance record next to a sequence file."""
    _write_json(path + SIDECAR_SUFFIX, {"kind": kind, "sha256": file_digest(path), **info})


def read_sidecar(path: str) -> dict | None:
    try:
        with open(path + SIDECAR_SUFFIX, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError):
        return None


def looks_like_sequences(path: str) -> bool:
    """True for a sequence JSONL (or its sidecar says it is one)."""
    meta = read_sidecar(path)
    if meta and meta.get("kind") in (POPULATION_KIND, SYNTHETIC_KIND):
        return True
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
        obj = json.loads(first)
    except (OSError, UnicodeDecodeError, ValueError):
        return False
    return isinstance(obj, dict) and "sets" in obj


@dataclasses.dataclass
class StageRecord:
    name: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_time: float | None = None
    info: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class RunManifest:
    config: dict
    stages: list[StageRecord]
    tool: str = "topicsynth"
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "tool": self.tool,
            "version": self.version,
            "config": self.config,
            "stages": [dataclasses.asdict(s) for s in self.stages],
        }

    def write(self, path: str) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        stages = [StageRecord(**s) for s in d["stages"]]
        return cls(d["config"], stages, d.get("tool", "topicsynth"), d.get("version", ""))


def verify_manifest(manifest_path: str) -> list[str]:
    """Relative paths whose current digest differs from the recorded one."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    man = RunManifest.read(manifest_path)
    bad = []
    for stage in man.stages:
        for rel, digest in {**stage.inputs, **stage.outputs}.items():
            full = os.path.join(root, rel)
            if not os.path.exists(full) or file_digest(full) != digest:
                bad.append(rel)
    return sorted(set(bad))


# --------------------------------------------------------------------------
# Stages


def simulate_stage(
    cfg: PipelineConfig, out_sequences: str, out_traces: str | None = None
) -> dict:
    """Generates the ground-truth population and, optionally, its traces on every site."""
    api = cfg.api_config()
    pop = generate_population(cfg.population_config(), api, make_rng(cfg.stage_seed("simulate")))
    write_sequences(out_sequences, pop)
    write_sidecar(out_sequences, POPULATION_KIND, users=len(pop), weeks=pop.weeks, k=pop.k,
                  taxonomy_size=cfg.taxonomy_size)
    if out_traces:
        traces = []
        for s in range(1, cfg.sites + 1):
            site = f"site{s}"
            outputs = observe_traces(pop, site, api)
            traces.extend(Trace(u, site, tuple(int(x) for x in row)) for u, row in zip(pop.users, outputs))
        write_traces(out_traces, traces)
    return {"users": len(pop)}


def extract_stats_stage(cfg: PipelineConfig, in_sequences: str, out_dir: str) -> StatisticsBundle:
    """Counts the first two weeks and releases (noisy) statistics."""
    pop = read_sequences(in_sequences, k=cfg.k, cls=GroundTruthPopulation)
    if len(pop) == 0:
        raise ValueError("population is empty")
    counts = count_marginals(pop, cfg.taxonomy_size)
    if cfg.no_noise:
        stats = raw_statistics(counts)
    else:
        seed = cfg.stage_seed("extract-stats")
        stats = private_statistics(counts, cfg.privacy_params(), make_rng(seed), seed)
    write_statistics(out_dir, stats)
    return stats


def load_private_statistics(stats_dir: str, allow_non_private: bool = False) -> StatisticsBundle:
    """Reads a statistics directory, enforcing the privacy boundary."""
    if os.path.isfile(stats_dir):
        if looks_like_sequences(stats_dir):
            raise DPBoundaryError(
                f"{stats_dir} is a sequence file; fitting only reads DP statistics directories"
            )
        raise ConfigError(f"{stats_dir} is not a statistics directory")
    if not os.path.exists(os.path.join(stats_dir, SIDECAR)):
        raise ConfigError(f"{stats_dir} has no {SIDECAR}")
    stats = read_statistics(stats_dir)
    if not stats.is_private and not allow_non_private:
        raise DPBoundaryError(
            f"{stats_dir} holds noiseless statistics; pass --allow-non-private to fit them anyway"
        )
    return stats


def fit_stage(
    cfg: PipelineConfig,
    stats_dir: str,
    out_model: str,
    log_path: str | None = None,
    allow_non_private: bool = False,
) -> dict:
    stats = load_private_statistics(stats_dir, allow_non_private)
    if stats.taxonomy_size != cfg.taxonomy_size or stats.k != cfg.k:
        raise ConfigError(
            f"statistics have taxonomy {stats.taxonomy_size} and k={stats.k}, "
            f"config has {cfg.taxonomy_size} and k={cfg.k}"
        )
    log: list[dict] = []
    tcfg = cfg.train_config()
    params = train(stats, tcfg, cfg.weeks, make_rng(tcfg.seed), log)
    save_model(out_model, params)
    if log_path:
        cols = ["epoch", "batch_loss", "objective"] + ([] if cfg.deterministic else ["wall_time"])
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in log:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
    return {"final_objective": log[-1]["objective"] if log else None, "epochs_run": len(log)}


def sample_stage(model_path: str, n: int, seed: int, out_sequences: str, pad: bool = True) -> dict:
    if looks_like_sequences(model_path):
        raise DPBoundaryError(f"{model_path} is a sequence file, not a model checkpoint")
    params = load_model(model_path)
    rng = make_rng(seed)
    ds = sample_dataset(params.theta, n, rng)
    if pad and n:
        ds = SequenceDataset(ds.users, pad_sets_array(ds.sets, params.taxonomy_size, rng))
    write_sequences(out_sequences, ds)
    write_sidecar(out_sequences, SYNTHETIC_KIND, users=n, model_sha256=file_digest(model_path),
                  seed=seed, padded=bool(pad))
    return {"users": n}


def attack_stage(
    cfg: PipelineConfig, in_sequences: str, attack: str, out_report: str, seed: int,
    population: int | None = None,
) -> dict:
    ds = read_sequences(in_sequences, k=cfg.k)
    if population is not None:
        ds = ds.subset(np.arange(min(population, len(ds))))
    report = measure_reid_risk(
        ds, cfg.api_config(), attack, cfg.queries, cfg.trials, seed,
        cfg.alpha, cfg.holdout_frac, jobs=cfg.jobs,
    )
    _write_json(out_report, report.to_dict())
    return report.to_dict()


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def validate_stage(
    cfg: PipelineConfig,
    in_a: str,
    out_dir: str,
    in_b: str | None = None,
    stats_dir: str | None = None,
    weeks: int | None = None,
) -> dict:
    """Writes error CDFs, stationarity tables and distinct-topic histograms."""
    os.makedirs(out_dir, exist_ok=True)
    V = cfg.taxonomy_size
    weeks = cfg.weeks if weeks is None else weeks
    a = read_sequences(in_a, k=cfg.k)
    b = read_sequences(in_b, k=cfg.k) if in_b else None
    summary: dict[str, Any] = {}

    if stats_dir is not None:
        targets = read_statistics(stats_dir)
        dist = statistic_errors(empirical_statistics(b if b is not None else a, V), targets,
                                cfg.rel_threshold)
        _write_csv(os.path.join(out_dir, "error_cdf.csv"), ["threshold", "fraction"],
                   zip(CDF_THRESHOLDS, dist.abs_cdf(CDF_THRESHOLDS)))
        _write_csv(os.path.join(out_dir, "rel_error_cdf.csv"), ["threshold", "fraction"],
                   zip(REL_THRESHOLDS, dist.rel_cdf(REL_THRESHOLDS)))
        edges, counts = error_histogram(dist.all_errors())
        _write_csv(os.path.join(out_dir, "error_hist.csv"), ["bin_low", "bin_high", "count"],
                   zip(edges[:-1], edges[1:], (int(c) for c in counts)))
        summary["abs_error_below_0.005"] = dist.fraction_abs_below(0.005)
        rel = dist.relative_errors()
        summary["rel_error_within_0.2"] = float(np.mean(rel <= 0.2)) if rel.size else None

    report = stationarity_report(a, V)
    for fam in ("single", "within", "across"):
        mat = getattr(report, fam)
        _write_csv(os.path.join(out_dir, f"stationarity_{fam}.csv"),
                   ["week"] + [f"w{j}" for j in range(mat.shape[0])],
                   ([i] + list(row) for i, row in enumerate(mat)))
    summary["stationarity_min"] = report.min_offdiagonal()

    h_a = distinct_topics_distribution(a, min(weeks, a.weeks))
    cols, hists = ["distinct", "fraction_a"], [h_a]
    if b is not None:
        h_b = distinct_topics_distribution(b, min(weeks, b.weeks))
        size = max(h_a.size, h_b.size)
        h_a, h_b = np.pad(h_a, (0, size - h_a.size)), np.pad(h_b, (0, size - h_b.size))
        cols.append("fraction_b")
        hists = [h_a, h_b]
        summary["distinct_topics_pearson"] = pearson(h_a, h_b)
    _write_csv(os.path.join(out_dir, "distinct_topics.csv"), cols,
               ([d] + [h[d] for h in hists] for d in range(hists[0].size)))
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


# --------------------------------------------------------------------------
# Full run


def _run(name: str, fn: Callable[[], Any], inputs, outputs, root, cfg, stages) -> Any:
    t0 = time.perf_counter()
    logger.info("stage %s", name)
    try:
        result = fn()
    except (DPBoundaryError, ConfigError):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, exc) from exc
    wall = None if cfg.deterministic else time.perf_counter() - t0
    info = result if isinstance(result, dict) else {}
    stages.append(StageRecord(name, _digests(inputs, root), _digests(outputs, root), wall, info))
    return result


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    """Runs all six stages into ``cfg.out_dir`` and writes ``manifest.json``.

    Outputs produced before a failing stage are kept on disk.
    """
    root = cfg.out_dir
    os.makedirs(root, exist_ok=True)
    P = lambda *parts: os.path.join(root, *parts)  # noqa: E731
    pop, traces, stats = P("population.jsonl"), P("traces.jsonl"), P("stats")
    model, log, synth = P("model.bin"), P("train_log.csv"), P("synthetic.jsonl")
    attack_dir, val_dir = P("attack"), P("validation")
    stages: list[StageRecord] = []

    _run("simulate", lambda: simulate_stage(cfg, pop, traces), [], [pop, pop + SIDECAR_SUFFIX, traces],
         root, cfg, stages)
    _run("extract-stats", lambda: {"kind": extract_stats_stage(cfg, pop, stats).provenance["kind"]},
         [pop], [stats], root, cfg, stages)
    # Behind the boundary: only the statistics directory and the checkpoint.
    _run("fit", lambda: fit_stage(cfg, stats, model, log, allow_non_private=cfg.no_noise),
         [stats], [model, log], root, cfg, stages)
    n_syn = cfg.users if cfg.synthetic_users is None else cfg.synthetic_users
    _run("sample", lambda: sample_stage(model, n_syn, cfg.stage_seed("sample"), synth, cfg.pad),
         [model], [synth, synth + SIDECAR_SUFFIX], root, cfg, stages)

    def attacks():
        os.makedirs(attack_dir, exist_ok=True)
        out = {}
        for j, attack in enumerate(cfg.attacks):
            seed = cfg.stage_seed("attack", j)
            for label, src in (("real", pop), ("synthetic", synth)):
                rep = attack_stage(cfg, src, attack, os.path.join(attack_dir, f"{label}_{attack}.json"), seed)
                out[f"{label}_{attack}"] = rep["mean"]
        return out

    _run("attack", attacks, [pop, synth], [attack_dir], root, cfg, stages)
    _run("validate", lambda: validate_stage(cfg, pop, val_dir, synth, stats), [pop, synth, stats],
         [val_dir], root, cfg, stages)
    # The output location is not part of the run's identity.
    snapshot = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    manifest = RunManifest(snapshot, stages)
    manifest.write(P("manifest.json"))
    return manifest
