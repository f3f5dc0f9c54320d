"""End-to-end orchestration: ingestion, judging, fitting, scoring, selection.

Every stage reads and writes only declared files under one output
directory, carries a manifest with the config hash and seed, and is
deterministic for a fixed seed (timestamps live only in manifest
sidecars).  One stage runs at a time per output directory, enforced by a
lockfile.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from tsrate import __version__ as TOOL_VERSION
from tsrate.bt import BTOptions, fit_bt
from tsrate.core import (
    ALL_CRITERIA,
    Block,
    CriterionKind,
    ScoreTable,
    SegmentationConfig,
    TimeSeriesSample,
    aggregate_sample_score,
    distribute_point_scores,
    fuse_criteria,
    segment,
)
from tsrate.features import encode
from tsrate.judge import (
    HeuristicJudge,
    JudgeConfig,
    JudgmentCache,
    JudgmentRecord,
    LLMJudge,
    OracleJudge,
    filter_judgments,
    judge_pair,
    sample_pairs,
)
from tsrate.llm import LLMClient
from tsrate.meta import AdaptConfig, MetaConfig, build_tasks, few_shot_adapt, meta_train
from tsrate.numutil import derive_seed
from tsrate.rater import (
    PairBatch,
    RaterWeights,
    TrainConfig,
    forward_many,
    pairs_from_judgments,
    pairwise_accuracy,
    train_single,
)
from tsrate.synthgen import (
    SynthConfig,
    TaggedBlock,
    corpus_blocks,
    gen_corpus,
    oracle_tags,
    validate_judge,
)

logger = logging.getLogger(__name__)

LOCKFILE = ".tsrate.lock"


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class PipelineConfig:
    """Effective settings for a run; JSON file fields with CLI overrides."""

    seed: int = 0
    out_dir: str = "out"
    dataset_path: str | None = None
    dataset_format: str = "jsonl"
    segmentation: SegmentationConfig = field(
        default_factory=lambda: SegmentationConfig(block_length=128)
    )
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    request_timeout: float = 30.0
    max_retries: int = 3
    pairs_per_criterion: int = 500
    bt: BTOptions = field(default_factory=BTOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    holdout_fraction: float = 0.2
    meta: MetaConfig = field(default_factory=MetaConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    rho: float = 0.5
    prune_steps: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("selection fraction rho must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        seed = int(doc.get("seed", 0))
        seg = doc.get("segmentation", {})
        judge_doc = dict(doc.get("judge", {}))
        endpoint = judge_doc.pop("endpoint", "https://api.openai.com/v1")
        model = judge_doc.pop("model", "gpt-4o-mini")
        request_timeout = float(judge_doc.pop("timeout", 30.0))
        max_retries = int(judge_doc.pop("max_retries", 3))
        judge_doc.setdefault("judge_kind", judge_doc.pop("kind", "heuristic"))
        tau = judge_doc.pop("tau", judge_doc.pop("confidence_threshold_tau", 0.5))
        train_doc = dict(doc.get("train", {}))
        holdout = float(train_doc.pop("holdout_fraction", 0.2))
        synth_doc = dict(doc.get("synth", {}))
        for key in ("slope_range", "freq_cycles", "amplitude_range"):
            if key in synth_doc:
                synth_doc[key] = tuple(synth_doc[key])
        dataset = doc.get("dataset", {})
        return cls(
            seed=seed,
            out_dir=str(doc.get("out_dir", "out")),
            dataset_path=dataset.get("path"),
            dataset_format=dataset.get("format", "jsonl"),
            segmentation=SegmentationConfig(
                block_length=int(seg.get("block_length", 128)),
                stride=seg.get("stride"),
            ),
            judge=JudgeConfig(confidence_threshold_tau=float(tau), **judge_doc),
            endpoint=endpoint,
            model=model,
            request_timeout=request_timeout,
            max_retries=max_retries,
            pairs_per_criterion=int(doc.get("pairs_per_criterion", 500)),
            bt=BTOptions(**doc.get("bt", {})),
            train=TrainConfig(seed=seed, **train_doc),
            holdout_fraction=holdout,
            meta=MetaConfig(seed=seed, **doc.get("meta", {})),
            adapt=AdaptConfig(**doc.get("adapt", {})),
            synth=SynthConfig(seed=seed, **synth_doc),
            rho=float(doc.get("selection", {}).get("rho", 0.5)),
            prune_steps=tuple(doc.get("prune_steps", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9))),
        )

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "PipelineConfig":
        doc = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            node = doc
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return cls.from_dict(doc)

    def to_canonical_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": {"path": self.dataset_path, "format": self.dataset_format},
            "segmentation": {
                "block_length": self.segmentation.block_length,
                "stride": self.segmentation.stride,
            },
            "judge": {
                "kind": self.judge.judge_kind,
                "repeats_m": self.judge.repeats_m,
                "swap_debias": self.judge.swap_debias,
                "tau": self.judge.confidence_threshold_tau,
                "max_series_points": self.judge.max_series_points,
                "request_concurrency": self.judge.request_concurrency,
                "endpoint": self.endpoint,
                "model": self.model,
            },
            "pairs_per_criterion": self.pairs_per_criterion,
            "bt": {
                "step_init": self.bt.step_init,
                "max_iterations": self.bt.max_iterations,
                "grad_tol": self.bt.grad_tol,
                "loglik_tol": self.bt.loglik_tol,
            },
            "train": {
                "learning_rate": self.train.learning_rate,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "holdout_fraction": self.holdout_fraction,
            },
            "meta": {
                "inner_lr_alpha": self.meta.inner_lr_alpha,
                "outer_lr_beta": self.meta.outer_lr_beta,
                "inner_steps": self.meta.inner_steps,
                "meta_batch_tasks": self.meta.meta_batch_tasks,
                "within_task_batch": self.meta.within_task_batch,
                "epochs": self.meta.epochs,
            },
            "adapt": {
                "shots": self.adapt.shots,
                "steps": self.adapt.steps,
                "lr": self.adapt.lr,
            },
            "synth": self.synth.to_dict(),
            "selection": {"rho": self.rho},
            "prune_steps": list(self.prune_steps),
        }

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_canonical_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def manifest(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": TOOL_VERSION,
        }


# ---------------------------------------------------------------------------
# File plumbing


def write_json(path, doc: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON line") from exc


def write_stage_manifest(out_dir: Path, stage: str, config: PipelineConfig, elapsed: float, outputs):
    doc = {
        **config.manifest(),
        "stage": stage,
        "elapsed_seconds": elapsed,
        "created_unix": time.time(),
        "outputs": sorted(str(o) for o in outputs),
    }
    write_json(out_dir / f"{stage}.manifest.json", doc)


def require_artifact(path: Path, producer: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(
            f"missing upstream artifact {path}; run the '{producer}' stage first"
        )
    return path


class StageLock:
    """One pipeline stage at a time per output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / LOCKFILE

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lockfile if that run is dead"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc_info):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


# ---------------------------------------------------------------------------
# Ingestion


def ingest(path, fmt: str) -> list[TimeSeriesSample]:
    """Load samples from a CSV or JSON-lines dataset file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if fmt == "jsonl":
        return _ingest_jsonl(path)
    if fmt == "csv":
        return _ingest_csv(path)
    raise ValueError(f"unsupported dataset format {fmt!r} (expected csv or jsonl)")


def _ingest_jsonl(path: Path) -> list[TimeSeriesSample]:
    samples = []
    seen = set()
    for lineno, doc in enumerate(read_jsonl(path), start=1):
        try:
            sample = TimeSeriesSample(
                id=str(doc["id"]),
                channels=doc["channels"],
                label=doc.get("label"),
                domain_tag=doc.get("domain_tag"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if sample.id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        samples.append(sample)
    if not samples:
        raise ValueError(f"{path}: no samples found")
    return samples


_LONG_COLUMNS = {"sample_id", "channel", "t", "value"}


def _ingest_csv(path: Path) -> list[TimeSeriesSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        rows = list(reader)
    names = [h.strip() for h in header]
    if set(names) == _LONG_COLUMNS:
        return _csv_long(path, names, rows)
    return _csv_wide(path, names, rows)


def _csv_long(path: Path, names: list[str], rows) -> list[TimeSeriesSample]:
    col = {name: names.index(name) for name in names}
    series: dict[str, dict[int, list[tuple[int, float]]]] = {}
    for rowno, row in enumerate(rows, start=2):
        try:
            sid = row[col["sample_id"]]
            channel = int(row[col["channel"]])
            t = int(row[col["t"]])
            value = float(row[col["value"]])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: row {rowno}: {exc}") from exc
        series.setdefault(sid, {}).setdefault(channel, []).append((t, value))
    samples = []
    for sid in sorted(series):
        by_channel = series[sid]
        channels = []
        for ch in sorted(by_channel):
            points = sorted(by_channel[ch])
            channels.append([v for _, v in points])
        try:
            samples.append(TimeSeriesSample(id=sid, channels=channels))
        except ValueError as exc:
            raise ValueError(f"{path}: sample {sid!r}: {exc}") from exc
    return samples


def _csv_wide(path: Path, names: list[str], rows) -> list[TimeSeriesSample]:
    has_id = names and names[0].lower() == "id"
    value_cols = list(range(1, len(names))) if has_id else list(range(len(names)))
    if not value_cols:
        raise ValueError(f"{path}: no value columns")
    sid = None
    columns: list[list[float]] = [[] for _ in value_cols]
    for rowno, row in enumerate(rows, start=2):
        if has_id:
            row_id = row[0]
            if sid is None:
                sid = row_id
            elif sid != row_id:
                raise ValueError(
                    f"{path}: row {rowno}: wide CSV holds one sample per file, "
                    f"saw ids {sid!r} and {row_id!r}"
                )
        for k, c in enumerate(value_cols):
            try:
                columns[k].append(float(row[c]))
            except (ValueError, IndexError) as exc:
                raise ValueError(
                    f"{path}: row {rowno}, column {names[c]!r}: {exc}"
                ) from exc
    if sid is None:
        sid = path.stem
    try:
        return [TimeSeriesSample(id=sid, channels=columns)]
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Selection and pruning


@dataclass
class SelectionResult:
    """Ranked sample scores and the selected top fraction."""

    ranking: list[tuple[str, float]]
    selected_ids: list[str]
    rho: float

    def to_dict(self, manifest: dict | None = None) -> dict:
        doc = {
            "rho": self.rho,
            "ranking": [[sid, float(s)] for sid, s in self.ranking],
            "selected_ids": list(self.selected_ids),
            "n_selected": len(self.selected_ids),
            "n_total": len(self.ranking),
        }
        if manifest:
            doc["manifest"] = manifest
        return doc


def _ranking(sample_scores: dict[str, float]) -> list[tuple[str, float]]:
    """Strict total order: score descending, then sample id ascending."""
    return sorted(sample_scores.items(), key=lambda kv: (-kv[1], kv[0]))


def _exact_count(fraction: float, n: int, mode: str) -> int:
    """ceil/floor of fraction*n evaluated exactly on the binary fraction."""
    product = Fraction(fraction) * n
    return math.ceil(product) if mode == "ceil" else math.floor(product)


def select(sample_scores: dict[str, float], rho: float) -> SelectionResult:
    """Keep the top ceil(rho * N) samples; ties break by ascending id."""
    if not sample_scores:
        raise ValueError("no sample scores to select from")
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    ranking = _ranking(sample_scores)
    k = _exact_count(rho, len(ranking), "ceil")
    return SelectionResult(
        ranking=ranking,
        selected_ids=[sid for sid, _ in ranking[:k]],
        rho=rho,
    )


def prune_schedule(
    sample_scores: dict[str, float],
    steps,
    direction: str = "best_first",
) -> dict:
    """Per-step retained/removed id sets for progressive pruning.

    ``best_first`` removes the floor(f*N) highest-scored samples at each
    fraction f (the degradation-curve protocol); ``worst_first`` removes
    from the bottom of the same ranking, which is the exact dual of
    :func:`select`.  Removal sets are nested across steps by construction.
    """
    if not sample_scores:
        raise ValueError("no sample scores to prune")
    steps = list(steps)
    if any(not 0.0 <= f < 1.0 for f in steps):
        raise ValueError("prune fractions must lie in [0, 1)")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("prune fractions must be strictly increasing")
    if direction not in ("best_first", "worst_first"):
        raise ValueError(f"unknown prune direction {direction!r}")
    ranking = _ranking(sample_scores)
    n = len(ranking)
    ids = [sid for sid, _ in ranking]
    schedule = []
    for f in steps:
        k = _exact_count(f, n, "floor")
        removed = ids[:k] if direction == "best_first" else ids[n - k :]
        retained = ids[k:] if direction == "best_first" else ids[: n - k]
        schedule.append(
            {
                "fraction": f,
                "n_removed": k,
                "removed_ids": sorted(removed),
                "retained_ids": sorted(retained),
            }
        )
    return {"direction": direction, "steps": schedule}


# ---------------------------------------------------------------------------
# Scoring helpers


def blocks_to_dicts(blocks) -> list[dict]:
    return [
        {
            "block_id": b.block_id,
            "sample_id": b.sample_id,
            "channel": b.channel,
            "start": b.start,
            "length": b.length,
            "values": [float(v) for v in b.values],
        }
        for b in blocks
    ]


def blocks_from_dicts(rows) -> list[Block]:
    return [
        Block(
            block_id=r["block_id"],
            sample_id=r["sample_id"],
            channel=int(r["channel"]),
            start=int(r["start"]),
            length=int(r["length"]),
            values=np.asarray(r["values"], dtype=np.float64),
        )
        for r in rows
    ]


def samples_from_corpus(tagged: list[TaggedBlock]) -> list[TimeSeriesSample]:
    """View corpus blocks as standalone single-channel samples."""
    return [
        TimeSeriesSample(id=tb.block.block_id, channels=[tb.block.values])
        for tb in tagged
    ]


def sample_scores_from_blocks(
    samples: list[TimeSeriesSample],
    blocks: list[Block],
    block_scores: dict[str, float],
) -> tuple[dict[str, float], dict]:
    """Block scores -> per-point scores -> per-sample means.

    Channel scores for the same (start, length) window are averaged first,
    then window scores distribute over time points and the point scores
    average into the sample score.  Returns (sample_scores, point_scores)
    where point_scores maps sample_id -> one score list (shared by all
    channels of the window grid).
    """
    by_sample: dict[str, dict[tuple[int, int], list[float]]] = {}
    for block in blocks:
        score = block_scores.get(block.block_id)
        if score is None:
            continue
        by_sample.setdefault(block.sample_id, {}).setdefault(
            (block.start, block.length), []
        ).append(score)

    sample_scores: dict[str, float] = {}
    point_scores: dict[str, list[float]] = {}
    for sample in samples:
        windows = by_sample.get(sample.id)
        if not windows:
            continue
        view = TimeSeriesSample(id=sample.id, channels=[np.zeros(sample.length)])
        pseudo_blocks = []
        pseudo_scores = {}
        for (start, length), channel_values in sorted(windows.items()):
            bid = f"{sample.id}@{start}+{length}"
            pseudo_blocks.append(
                Block(
                    block_id=bid,
                    sample_id=sample.id,
                    channel=0,
                    start=start,
                    length=length,
                    values=view.channels[0][start : start + length],
                )
            )
            pseudo_scores[bid] = float(np.mean(channel_values))
        per_point = distribute_point_scores(pseudo_scores, view, pseudo_blocks)[0]
        point_scores[sample.id] = [float(v) for v in per_point]
        sample_scores[sample.id] = aggregate_sample_score(per_point)
    return sample_scores, point_scores


# ---------------------------------------------------------------------------
# Stages


def _out(config: PipelineConfig) -> Path:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def stage_synth_gen(config: PipelineConfig) -> Path:
    """Generate the tagged synthetic corpus (corpus.jsonl + manifest)."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        corpus = gen_corpus(config.synth)
        tagged = corpus_blocks(corpus)
        corpus_path = out_dir / "corpus.jsonl"
        write_jsonl(corpus_path, (tb.to_dict() for tb in tagged))
        write_json(
            out_dir / "corpus_manifest.json",
            {
                **config.manifest(),
                "synth_config": config.synth.to_dict(),
                "n_blocks": len(tagged),
                "pairs_per_criterion": config.synth.pairs_per_criterion,
                "construct_families": {
                    "trend": "1-3 same-sign linear segments, slope and sign drawn per block",
                    "frequency": "unit sine at an integer cycle count",
                    "amplitude": "sine with linearly interpolated amplitude envelope",
                    "pattern": "2-3 sines at drawn cycles/phases plus a linear component",
                    "low_quality": "fresh construct from the same family plus Gaussian noise "
                    "at low_quality_noise_sigma times its own spread",
                },
            },
        )
        write_stage_manifest(out_dir, "synth-gen", config, time.perf_counter() - started, [corpus_path])
    return corpus_path


def load_corpus(out_dir: Path) -> list[TaggedBlock]:
    path = require_artifact(Path(out_dir) / "corpus.jsonl", "synth-gen")
    return [TaggedBlock.from_dict(doc) for doc in read_jsonl(path)]


def make_judge(config: PipelineConfig, tagged: list[TaggedBlock] | None = None):
    kind = config.judge.judge_kind
    if kind == "oracle":
        if not tagged:
            raise ValueError("the oracle judge needs a tagged corpus (run synth-gen)")
        return OracleJudge(oracle_tags(tagged))
    if kind == "heuristic":
        return HeuristicJudge()
    if kind == "llm":
        client = LLMClient(
            endpoint=config.endpoint,
            model=config.model,
            timeout=config.request_timeout,
            max_retries=config.max_retries,
        )
        return LLMJudge(client)
    raise ValueError(f"unknown judge kind {kind!r}")


def _judged_blocks(config: PipelineConfig, out_dir: Path):
    """The block set a judging run works over, plus samples and tags."""
    if config.dataset_path:
        samples = ingest(config.dataset_path, config.dataset_format)
        blocks = []
        for sample in samples:
            blocks.extend(segment(sample, config.segmentation))
        tagged = None
    else:
        tagged = load_corpus(out_dir)
        blocks = [tb.block for tb in tagged]
        samples = samples_from_corpus(tagged)
    return samples, blocks, tagged


def stage_judge(config: PipelineConfig, use_cache: bool = True) -> Path:
    """Sample pairs per criterion and judge them; writes judgments/blocks."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        _, blocks, tagged = _judged_blocks(config, out_dir)
        judge = make_judge(config, tagged)
        cache = JudgmentCache(out_dir / "judgments.cache.jsonl") if use_cache else None
        # Corpus blocks are constructed for one criterion each, so the pair
        # pool narrows per criterion; dataset blocks are judged on all four.
        pool_by_criterion = {c: blocks for c in ALL_CRITERIA}
        if tagged is not None:
            pool_by_criterion = {
                c: [tb.block for tb in tagged if tb.criterion is c] for c in ALL_CRITERIA
            }
        records: list[JudgmentRecord] = []
        for criterion in ALL_CRITERIA:
            pairs = sample_pairs(
                pool_by_criterion[criterion],
                config.pairs_per_criterion,
                derive_seed(config.seed, f"pairs:{criterion}"),
            )
            for a, b in pairs:
                records.append(judge_pair(judge, a, b, criterion, config.judge, cache))
        judgments_path = out_dir / "judgments.jsonl"
        write_jsonl(judgments_path, (r.to_dict() for r in records))
        blocks_path = out_dir / "blocks.jsonl"
        write_jsonl(blocks_path, blocks_to_dicts(blocks))
        write_stage_manifest(
            out_dir, "judge", config, time.perf_counter() - started,
            [judgments_path, blocks_path],
        )
    return judgments_path


def stage_validate_judge(config: PipelineConfig) -> Path:
    """Run the tagged-pair harness; writes per-criterion judge accuracy."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        tagged = load_corpus(out_dir)
        pairs_by_criterion: dict[CriterionKind, list] = {c: [] for c in ALL_CRITERIA}
        by_pair: dict[tuple, dict[str, TaggedBlock]] = {}
        for tb in tagged:
            key = (tb.criterion, tb.generator_params.get("pair_index"))
            by_pair.setdefault(key, {})[tb.quality_tag] = tb
        for (criterion, _idx), sides in sorted(by_pair.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            if "high" in sides and "low" in sides:
                pairs_by_criterion[criterion].append((sides["high"], sides["low"]))
        judge = make_judge(config, tagged)
        table = validate_judge(judge, pairs_by_criterion, config.judge)
        accuracy_path = out_dir / "judge_accuracy.json"
        write_json(
            accuracy_path,
            {"manifest": config.manifest(), "judge_id": judge.judge_id, "table": table},
        )
        write_stage_manifest(
            out_dir, "validate-judge", config, time.perf_counter() - started, [accuracy_path]
        )
    return accuracy_path


def load_judgments(out_dir: Path) -> list[JudgmentRecord]:
    path = require_artifact(Path(out_dir) / "judgments.jsonl", "judge")
    return [JudgmentRecord.from_dict(doc) for doc in read_jsonl(path)]


def load_blocks(out_dir: Path) -> list[Block]:
    path = require_artifact(Path(out_dir) / "blocks.jsonl", "judge")
    return blocks_from_dicts(read_jsonl(path))


def stage_fit_bt(config: PipelineConfig) -> Path:
    """Fit per-criterion Bradley-Terry scores and fuse them."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        records = load_judgments(out_dir)
        blocks = load_blocks(out_dir)
        all_block_ids = {b.block_id for b in blocks}
        tau = config.judge.confidence_threshold_tau
        per_criterion: dict[CriterionKind, dict[str, float]] = {}
        fit_docs = {}
        omitted = {}
        outputs = []
        for criterion in ALL_CRITERIA:
            relevant = [r for r in records if r.criterion is criterion]
            kept = filter_judgments(relevant, tau)
            if not kept:
                logger.warning("no judgments survive the filter for %s; criterion skipped", criterion)
                omitted[str(criterion)] = len(all_block_ids)
                continue
            fit = fit_bt(kept, config.bt)
            per_criterion[criterion] = fit.scores
            omitted[str(criterion)] = len(all_block_ids - set(fit.scores))
            fit_doc = fit.to_dict(criterion=str(criterion))
            fit_doc["n_judgments_total"] = len(relevant)
            fit_doc["n_judgments_kept"] = len(kept)
            fit_doc["n_components"] = len(fit.components)
            fit_doc["manifest"] = config.manifest()
            fit_path = out_dir / f"btfit_{criterion}.json"
            write_json(fit_path, fit_doc)
            fit_docs[str(criterion)] = fit_path
            outputs.append(fit_path)
        if not per_criterion:
            raise ValueError("no criterion produced a Bradley-Terry fit")
        # Fusion needs a shared block set: intersect the per-criterion keys.
        common = set.intersection(*(set(s) for s in per_criterion.values()))
        scores_path = out_dir / "score_table_bt.json"
        if common:
            trimmed = {c: {b: s[b] for b in common} for c, s in per_criterion.items()}
            table = fuse_criteria(ScoreTable(per_criterion=trimmed, provenance="bt"))
            doc = table.to_dict()
        else:
            # Disjoint criterion block sets (the synthetic corpus): no shared
            # blocks to fuse over, so each block gets the z-score within its
            # own criterion, stored apart from the spec'd fused column.
            logger.warning(
                "criterion fits share no blocks; writing per-criterion z-scores "
                "as fused_union instead of a fused column"
            )
            fused_union: dict[str, float] = {}
            for criterion, scores in per_criterion.items():
                single = fuse_criteria(
                    ScoreTable(per_criterion={criterion: scores}, provenance="bt")
                )
                fused_union.update(single.fused)
            table = ScoreTable(per_criterion=per_criterion, provenance="bt")
            doc = table.to_dict()
            doc["fused_union"] = {k: float(v) for k, v in sorted(fused_union.items())}
        doc["manifest"] = config.manifest()
        doc["omitted_blocks"] = omitted
        doc["n_common_blocks"] = len(common)
        write_json(scores_path, doc)
        outputs.append(scores_path)
        for criterion_name, n_omitted in sorted(omitted.items()):
            if n_omitted:
                logger.warning(
                    "%d blocks have no surviving judgment for %s and were omitted",
                    n_omitted,
                    criterion_name,
                )
        write_stage_manifest(out_dir, "fit-bt", config, time.perf_counter() - started, outputs)
    return scores_path


def _features_for(blocks: list[Block]) -> dict[str, np.ndarray]:
    return {b.block_id: encode(b) for b in blocks}


def stage_train_rater(config: PipelineConfig) -> dict:
    """Train one rater per criterion on filtered judgments; report held-out accuracy."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        records = load_judgments(out_dir)
        blocks = load_blocks(out_dir)
        features = _features_for(blocks)
        tau = config.judge.confidence_threshold_tau
        results = {}
        outputs = []
        for criterion in ALL_CRITERIA:
            kept = filter_judgments([r for r in records if r.criterion is criterion], tau)
            if not kept:
                logger.warning("no filtered judgments for %s; rater not trained", criterion)
                results[str(criterion)] = {"trained": False, "reason": "no filtered judgments"}
                continue
            batch = pairs_from_judgments(kept, features)
            rng = np.random.default_rng(derive_seed(config.seed, f"holdout:{criterion}"))
            order = rng.permutation(len(batch))
            n_holdout = max(1, int(round(config.holdout_fraction * len(batch))))
            holdout = batch.take(order[:n_holdout])
            train = batch.take(order[n_holdout:])
            weights, trace = train_single(train, config.train, criterion=criterion)
            accuracy = pairwise_accuracy(weights, holdout)
            weights_path = out_dir / f"rater_{criterion}.bin"
            weights.save(weights_path)
            outputs.append(weights_path)
            results[str(criterion)] = {
                "trained": True,
                "n_train_pairs": len(train),
                "n_holdout_pairs": len(holdout),
                "holdout_accuracy": accuracy,
                "loss_first_epoch": trace[0] if trace else None,
                "loss_last_epoch": trace[-1] if trace else None,
            }
        metrics_path = out_dir / "train_metrics.json"
        write_json(metrics_path, {"manifest": config.manifest(), "criteria": results})
        outputs.append(metrics_path)
        write_stage_manifest(out_dir, "train-rater", config, time.perf_counter() - started, outputs)
    return results


def stage_meta_train(config: PipelineConfig, task_manifest_path) -> dict:
    """Meta-train one rater per criterion from a task manifest.

    The manifest is JSON: {"tasks": [{"task_id", "judgments", "blocks"}]},
    with paths relative to the manifest file.
    """
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        manifest_path = Path(task_manifest_path)
        with open(manifest_path, encoding="utf-8") as fh:
            manifest_doc = json.load(fh)
        datasets = []
        for entry in manifest_doc["tasks"]:
            base = manifest_path.parent
            records = [
                JudgmentRecord.from_dict(doc)
                for doc in read_jsonl(base / entry["judgments"])
            ]
            blocks = blocks_from_dicts(read_jsonl(base / entry["blocks"]))
            datasets.append((entry["task_id"], records, _features_for(blocks)))
        tau = config.judge.confidence_threshold_tau
        results = {}
        outputs = []
        metrics_rows = []
        for criterion in ALL_CRITERIA:
            tasks = build_tasks(datasets, criterion, config.seed, tau)
            if not tasks:
                logger.warning("no usable meta-tasks for %s", criterion)
                results[str(criterion)] = {"trained": False, "reason": "no usable tasks"}
                continue
            weights = meta_train(
                tasks, config.meta, criterion=criterion, metrics_sink=metrics_rows.append
            )
            weights_path = out_dir / f"meta_rater_{criterion}.bin"
            weights.save(weights_path)
            outputs.append(weights_path)
            test_batch = PairBatch.concat([t.test for t in tasks])
            results[str(criterion)] = {
                "trained": True,
                "n_tasks": len(tasks),
                "test_accuracy": pairwise_accuracy(weights, test_batch),
            }
        metrics_path = out_dir / "meta_metrics.jsonl"
        write_jsonl(metrics_path, metrics_rows)
        summary_path = out_dir / "meta_summary.json"
        write_json(summary_path, {"manifest": config.manifest(), "criteria": results})
        outputs.extend([metrics_path, summary_path])
        write_stage_manifest(out_dir, "meta-train", config, time.perf_counter() - started, outputs)
    return results


def stage_adapt(config: PipelineConfig, criterion: CriterionKind) -> Path:
    """Few-shot adapt a meta-trained rater on this directory's judgments."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        weights_path = require_artifact(
            out_dir / f"meta_rater_{criterion}.bin", "meta-train"
        )
        weights = RaterWeights.load(weights_path)
        records = load_judgments(out_dir)
        blocks = load_blocks(out_dir)
        features = _features_for(blocks)
        tau = config.judge.confidence_threshold_tau
        kept = filter_judgments([r for r in records if r.criterion is criterion], tau)
        if not kept:
            raise ValueError(f"no filtered judgments for {criterion} to adapt on")
        batch = pairs_from_judgments(kept, features)
        rng = np.random.default_rng(derive_seed(config.seed, f"adapt:{criterion}"))
        order = rng.permutation(len(batch))
        shots = batch.take(order[: config.adapt.shots])
        rest = batch.take(order[config.adapt.shots :])
        adapted = few_shot_adapt(weights, shots, config.adapt)
        adapted_path = out_dir / f"adapted_rater_{criterion}.bin"
        adapted.save(adapted_path)
        report = {
            "criterion": str(criterion),
            "shots": len(shots),
            "eval_pairs": len(rest),
            "manifest": config.manifest(),
        }
        if len(rest) and (rest.p != 0.5).any():
            report["zero_shot_accuracy"] = pairwise_accuracy(weights, rest)
            report["adapted_accuracy"] = pairwise_accuracy(adapted, rest)
        report_path = out_dir / f"adapt_report_{criterion}.json"
        write_json(report_path, report)
        write_stage_manifest(
            out_dir, f"adapt-{criterion}", config, time.perf_counter() - started,
            [adapted_path, report_path],
        )
    return adapted_path


def stage_score(config: PipelineConfig, source: str) -> Path:
    """Produce block/point/sample scores from BT fits or trained raters."""
    if source not in ("bt", "rater"):
        raise ValueError("--source must be 'bt' or 'rater'")
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        samples, blocks, _tagged = _judged_blocks(config, out_dir)
        if source == "bt":
            table_path = require_artifact(out_dir / "score_table_bt.json", "fit-bt")
            with open(table_path, encoding="utf-8") as fh:
                table_doc = json.load(fh)
            fused = table_doc.get("fused") or table_doc.get("fused_union") or {}
            fused = {k: float(v) for k, v in fused.items()}
            scored_ids = set(fused)
            n_missing = sum(1 for b in blocks if b.block_id not in scored_ids)
            if n_missing:
                logger.warning(
                    "%d of %d blocks carry no BT score (never judged or filtered out)",
                    n_missing,
                    len(blocks),
                )
        else:
            features = _features_for(blocks)
            order = [b.block_id for b in blocks]
            matrix = np.stack([features[bid] for bid in order])
            per_criterion = {}
            for criterion in ALL_CRITERIA:
                weights_path = out_dir / f"rater_{criterion}.bin"
                if not weights_path.exists():
                    weights_path = out_dir / f"adapted_rater_{criterion}.bin"
                if not weights_path.exists():
                    weights_path = out_dir / f"meta_rater_{criterion}.bin"
                require_artifact(weights_path, "train-rater (or meta-train/adapt)")
                weights = RaterWeights.load(weights_path)
                scores = forward_many(weights, matrix)
                per_criterion[criterion] = {
                    bid: float(s) for bid, s in zip(order, scores)
                }
            table = fuse_criteria(ScoreTable(per_criterion=per_criterion, provenance="rater"))
            fused = table.fused
            table_out = out_dir / "score_table_rater.json"
            doc = table.to_dict()
            doc["manifest"] = config.manifest()
            write_json(table_out, doc)

        sample_scores, point_scores = sample_scores_from_blocks(samples, blocks, fused)
        if not sample_scores:
            raise ValueError("no sample received a score; judge/filter coverage is empty")
        points_path = out_dir / "point_scores.jsonl"
        write_jsonl(
            points_path,
            (
                {"sample_id": sid, "channel": "window-mean", "scores": scores}
                for sid, scores in sorted(point_scores.items())
            ),
        )
        samples_path = out_dir / "sample_scores.json"
        write_json(
            samples_path,
            {
                "manifest": config.manifest(),
                "source": source,
                "scores": {k: float(v) for k, v in sorted(sample_scores.items())},
            },
        )
        outputs = [points_path, samples_path]
        if source == "rater":
            outputs.append(table_out)
        write_stage_manifest(
            out_dir, "score", config, time.perf_counter() - started, outputs
        )
    return samples_path


def load_sample_scores(out_dir: Path) -> dict[str, float]:
    path = require_artifact(Path(out_dir) / "sample_scores.json", "score")
    with open(path, encoding="utf-8") as fh:
        return {k: float(v) for k, v in json.load(fh)["scores"].items()}


def stage_select(config: PipelineConfig) -> Path:
    """Rank samples and keep the top fraction rho."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        scores = load_sample_scores(out_dir)
        result = select(scores, config.rho)
        selection_path = out_dir / "selection.json"
        write_json(selection_path, result.to_dict(manifest=config.manifest()))
        write_stage_manifest(
            out_dir, "select", config, time.perf_counter() - started, [selection_path]
        )
    return selection_path


def stage_prune_curve(config: PipelineConfig, direction: str = "best_first") -> Path:
    """Export the progressive-removal schedule for external retraining."""
    out_dir = _out(config)
    started = time.perf_counter()
    with StageLock(out_dir):
        scores = load_sample_scores(out_dir)
        schedule = prune_schedule(scores, config.prune_steps, direction=direction)
        schedule["manifest"] = config.manifest()
        schedule_path = out_dir / "prune_schedule.json"
        write_json(schedule_path, schedule)
        write_stage_manifest(
            out_dir, "prune-curve", config, time.perf_counter() - started, [schedule_path]
        )
    return schedule_path
