"""Experiment orchestration.

Parses the YAML experiment document, materializes datasets (from disk or the
planted-pattern generator), builds vocabularies and the model for the chosen
variant, trains, evaluates, and writes artifacts (history CSV, key=value
metrics, checkpoint blocks).  Also hosts the expert-count sweep and the MoE
forward-time scaling benchmark.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import yaml

from .backbone import BackboneConfig
from .data import InteractionData, InteractionSequence, split_leave_one_out, load_interactions
from .errors import ConfigurationError
from .evaluation import MetricsReport, evaluate_model, popularity_ranks, rank_metrics
from .filtering import TAU_RANGE, FilterConfig
from .model import Recommender, TokenExpert, VARIANTS
from .moe import GateNetwork, aggregate_experts
from .seeding import derive_seed, torch_generator
from .training import TrainConfig, TrainResult, train_two_rounds, save_checkpoint, write_history
from .consensus import save_consensus
from .vocab import VocabEmbedding, load_vocab, random_vocab, synth_vocab

logger = logging.getLogger(__name__)


@dataclass
class SyntheticSpec:
    """Planted-pattern generator settings: clustered items, Markov cluster walk."""

    n_users: int = 2000
    n_items: int = 200
    n_clusters: int = 10
    seq_len: int = 10
    next_cluster_prob: float = 0.8
    seed: int = 7


@dataclass
class DatasetSpec:
    path: str | None = None
    min_core: int = 5
    synthetic: SyntheticSpec | None = None


@dataclass
class VocabSpec:
    source: str = "synthetic-clustered"
    path: str | None = None
    vocab_size: int = 400
    dim: int = 48
    n_clusters: int = 10
    spread: float = 0.1
    seed: int = 0
    scale: float = 0.02
    name: str | None = None


@dataclass
class ModelSpec:
    alpha: float = 0.2
    reprogram_heads: int = 4
    precision: str = "float32"


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    vocabularies: list[VocabSpec] = field(default_factory=list)
    filter: FilterConfig = field(default_factory=FilterConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    eval_k: int = 20
    variant: str = "full"

    def torch_dtype(self) -> torch.dtype:
        if self.model.precision == "float32":
            return torch.float32
        if self.model.precision == "float64":
            return torch.float64
        raise ConfigurationError(
            f"precision must be float32 or float64, got {self.model.precision!r}"
        )


def _build_section(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(payload) - valid
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict, base_dir: str = ".") -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from parsed YAML."""
    if not isinstance(payload, dict):
        raise ConfigurationError("the experiment document must be a mapping")
    known = {"dataset", "vocabularies", "filter", "backbone", "train", "model", "eval", "variant"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level sections: {sorted(unknown)}")

    dataset_payload = dict(payload.get("dataset", {}))
    synthetic = dataset_payload.pop("synthetic", None)
    dataset = _build_section(DatasetSpec, dataset_payload, "dataset")
    if synthetic is not None:
        dataset.synthetic = _build_section(SyntheticSpec, synthetic, "dataset.synthetic")
    if dataset.path is not None:
        dataset.path = os.path.join(base_dir, dataset.path)
        if not os.path.exists(dataset.path):
            raise ConfigurationError(f"dataset path does not exist: {dataset.path}")
    if dataset.path is None and dataset.synthetic is None:
        raise ConfigurationError("dataset needs either a path or a synthetic block")

    vocab_specs = []
    for i, spec in enumerate(payload.get("vocabularies", [])):
        vocab = _build_section(VocabSpec, spec, f"vocabularies[{i}]")
        if vocab.source == "file":
            if vocab.path is None:
                raise ConfigurationError(f"vocabularies[{i}]: file source needs a path")
            vocab.path = os.path.join(base_dir, vocab.path)
            if not os.path.exists(vocab.path):
                raise ConfigurationError(f"vocabulary path does not exist: {vocab.path}")
        elif vocab.source not in ("synthetic-clustered", "synthetic-random"):
            raise ConfigurationError(
                f"vocabularies[{i}]: unknown source {vocab.source!r}"
            )
        vocab_specs.append(vocab)

    filter_cfg = _build_section(FilterConfig, payload.get("filter", {}), "filter")
    if not TAU_RANGE[0] <= filter_cfg.tau <= TAU_RANGE[1]:
        clamped = min(max(filter_cfg.tau, TAU_RANGE[0]), TAU_RANGE[1])
        logger.warning("tau %.4g outside %s; clamping to %.4g", filter_cfg.tau, TAU_RANGE, clamped)
        filter_cfg = replace(filter_cfg, tau=clamped)
    backbone = _build_section(BackboneConfig, payload.get("backbone", {}), "backbone")
    train_payload = dict(payload.get("train", {}))
    model = _build_section(ModelSpec, payload.get("model", {}), "model")

    eval_payload = payload.get("eval", {})
    if not isinstance(eval_payload, dict) or set(eval_payload) - {"k"}:
        raise ConfigurationError("the eval section accepts only the key 'k'")
    eval_k = int(eval_payload.get("k", 20))
    train_payload.setdefault("eval_k", eval_k)
    train = _build_section(TrainConfig, train_payload, "train")

    variant = payload.get("variant", "full")
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant != "backbone_only" and not vocab_specs:
        raise ConfigurationError(f"variant {variant!r} needs at least one vocabulary")
    return ExperimentConfig(
        dataset=dataset, vocabularies=vocab_specs, filter=filter_cfg,
        backbone=backbone, train=train, model=model, eval_k=eval_k, variant=variant,
    )


def load_experiment_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        payload = yaml.safe_load(fh)
    return config_from_dict(payload or {}, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Planted-pattern synthetic data

def item_cluster(item: int, n_items: int, n_clusters: int) -> int:
    """Cluster of a 1-based item ID; items are split into contiguous blocks."""
    return (item - 1) * n_clusters // n_items


def generate_planted_sequences(spec: SyntheticSpec) -> InteractionData:
    """Cluster-structured sequences from a Markov walk over item clusters.

    Each user starts in a uniform cluster and at every step picks a uniform
    item from the current cluster, then moves to the successor cluster with
    probability ``next_cluster_prob`` (uniform otherwise).
    """
    if spec.n_items % spec.n_clusters != 0:
        raise ConfigurationError(
            f"n_items={spec.n_items} must divide evenly into {spec.n_clusters} clusters"
        )
    rng = np.random.default_rng(derive_seed("planted", spec.seed))
    per_cluster = spec.n_items // spec.n_clusters
    sequences = []
    for user in range(1, spec.n_users + 1):
        cluster = int(rng.integers(spec.n_clusters))
        items = []
        for _ in range(spec.seq_len):
            items.append(int(cluster * per_cluster + 1 + rng.integers(per_cluster)))
            if rng.random() < spec.next_cluster_prob:
                cluster = (cluster + 1) % spec.n_clusters
            else:
                cluster = int(rng.integers(spec.n_clusters))
        sequences.append(InteractionSequence(user_id=user, items=items))
    return InteractionData(sequences=sequences, n_items=spec.n_items)


def resolve_dataset(spec: DatasetSpec) -> InteractionData:
    if spec.synthetic is not None:
        return generate_planted_sequences(spec.synthetic)
    return load_interactions(spec.path, min_core=spec.min_core)


def build_vocabulary(spec: VocabSpec, index: int) -> VocabEmbedding:
    if spec.source == "file":
        vocab = load_vocab(spec.path)
        if spec.name:
            vocab.name = spec.name
        return vocab
    name = spec.name or f"{spec.source}-{index}"
    if spec.source == "synthetic-clustered":
        return synth_vocab(
            spec.vocab_size, spec.dim, spec.n_clusters, spec.spread, spec.seed, name
        )
    return random_vocab(spec.vocab_size, spec.dim, spec.seed, spec.scale, name)


def build_vocabularies(cfg: ExperimentConfig) -> list[VocabEmbedding]:
    """Vocabularies for the experiment variant.

    ``llm_re`` keeps every vocabulary's shape but replaces its content with
    unstructured Gaussian noise, matching the random-embedding control.
    """
    vocabs = [build_vocabulary(spec, i) for i, spec in enumerate(cfg.vocabularies)]
    if cfg.variant == "llm_re":
        vocabs = [
            random_vocab(
                v.vocab_size, v.dim,
                seed=derive_seed("llm_re", cfg.train.seed, i),
                name=f"random-{v.name}",
            )
            for i, v in enumerate(vocabs)
        ]
    return vocabs


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: MetricsReport
    result: TrainResult

    @property
    def model(self) -> Recommender:
        return self.result.model


def write_metrics(path: str | os.PathLike, values: dict) -> None:
    """Write metrics as plain ``key=value`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value}\n")


def read_metrics(path: str | os.PathLike) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, _, value = line.partition("=")
                values[key] = value
    return values


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | os.PathLike | None = None,
    data: InteractionData | None = None,
) -> ExperimentResult:
    """Train and evaluate one variant; optionally write artifacts to ``out_dir``."""
    data = data if data is not None else resolve_dataset(cfg.dataset)
    train, holdout = split_leave_one_out(data.sequences)
    vocabs = build_vocabularies(cfg) if cfg.variant != "backbone_only" else []
    model = Recommender(
        n_items=data.n_items,
        vocabularies=vocabs,
        backbone_cfg=cfg.backbone,
        filter_cfg=cfg.filter,
        reprogram_heads=cfg.model.reprogram_heads,
        alpha=cfg.model.alpha,
        variant=cfg.variant,
        seed=cfg.train.seed,
        dtype=cfg.torch_dtype(),
    )
    result = train_two_rounds(model, train, holdout, data.n_items, cfg.train)
    report = evaluate_model(model, holdout, cfg.eval_k)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_history(os.path.join(out_dir, "history.csv"), result.history, cfg.eval_k)
        values = {
            "variant": cfg.variant,
            "seed": cfg.train.seed,
            "k": cfg.eval_k,
            f"hr@{cfg.eval_k}": repr(report.hr),
            f"ndcg@{cfg.eval_k}": repr(report.ndcg),
            "n_users": report.n_users,
            "final_loss": repr(result.history[-1].loss) if result.history else "",
            "epochs": len(result.history),
        }
        if result.fisher:
            for score in result.fisher:
                values[f"fisher.{score.index}.{score.name}"] = repr(score.value)
        write_metrics(os.path.join(out_dir, "metrics.txt"), values)
        save_checkpoint(os.path.join(out_dir, "checkpoint"), model)
        if model.sc is not None:
            save_consensus(os.path.join(out_dir, "consensus"), model.sc)
    return ExperimentResult(config=cfg, report=report, result=result)


def popularity_report(data: InteractionData, k: int) -> MetricsReport:
    """Popularity-baseline metrics on the same split as :func:`run_experiment`."""
    train, holdout = split_leave_one_out(data.sequences)
    ranks = popularity_ranks(train, holdout, data.n_items)
    return rank_metrics(ranks, k)


def sweep_experts(
    cfg: ExperimentConfig, max_experts: int, out_dir: str | os.PathLike | None = None
) -> list[tuple[int, MetricsReport]]:
    """Re-run the experiment with 1..max_experts vocabularies.

    When the config lists fewer vocabulary specs than requested, synthetic
    specs are recycled with shifted seeds; file-backed specs cannot be
    multiplied that way.
    """
    base_specs = cfg.vocabularies
    if not base_specs:
        raise ConfigurationError("sweep-experts needs at least one vocabulary spec")
    data = resolve_dataset(cfg.dataset)
    rows: list[tuple[int, MetricsReport]] = []
    for m in range(1, max_experts + 1):
        specs = []
        for i in range(m):
            spec = base_specs[i % len(base_specs)]
            if i >= len(base_specs):
                if spec.source == "file":
                    raise ConfigurationError(
                        "cannot extend file-backed vocabularies beyond the configured list"
                    )
                spec = replace(
                    spec, seed=spec.seed + 1000 * (i // len(base_specs)),
                    name=f"{spec.name or spec.source}-{i}",
                )
            specs.append(spec)
        sub_cfg = replace(cfg, vocabularies=specs)
        outcome = run_experiment(sub_cfg, data=data)
        rows.append((m, outcome.report))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"n_experts,hr@{cfg.eval_k},ndcg@{cfg.eval_k}\n")
            for m, report in rows:
                fh.write(f"{m},{report.hr!r},{report.ndcg!r}\n")
    return rows


# ---------------------------------------------------------------------------
# MoE forward-time benchmark

@dataclass
class BenchRow:
    n_experts: int
    median_ms: float
    fit_residual: float = 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow]
    slope_ms: float
    intercept_ms: float
    r_squared: float

    def ratio(self) -> float:
        first = self.rows[0].median_ms
        last = self.rows[-1].median_ms
        return last / first if first > 0 else math.inf


def moe_forward_time(
    n_experts: int,
    batch: int = 4,
    seq_len: int = 64,
    d_emb: int = 64,
    d_llm: int = 512,
    vocab_size: int = 1024,
    top_k: int = 256,
    repetitions: int = 5,
    seed: int = 0,
) -> float:
    """Median wall time (ms) of one gated multi-expert forward pass."""
    dtype = torch.float32
    vocabs = [
        synth_vocab(vocab_size, d_llm, n_clusters=8, spread=0.5, seed=derive_seed(seed, i))
        for i in range(n_experts)
    ]
    experts = [
        TokenExpert(v, d_emb, heads=4, seed=derive_seed(seed, "expert", i), dtype=dtype)
        for i, v in enumerate(vocabs)
    ]
    gate = GateNetwork(n_experts, d_emb, seq_len, seed=derive_seed(seed, "gate"), dtype=dtype)
    gen = torch_generator("bench", seed)
    embeddings = torch.randn(batch, seq_len, d_emb, generator=gen, dtype=dtype)
    valid = torch.ones(batch, seq_len, dtype=torch.bool)
    cfg = FilterConfig(top_k=top_k, tau=0.7, train_mode=False)

    def forward() -> torch.Tensor:
        outputs = [expert(embeddings, valid, cfg, 0) for expert in experts]
        return aggregate_experts(gate(embeddings), outputs)

    times = []
    with torch.no_grad():
        forward()  # warmup
        for _ in range(repetitions):
            start = time.perf_counter()
            forward()
            times.append((time.perf_counter() - start) * 1000.0)
    times.sort()
    mid = len(times) // 2
    return times[mid] if len(times) % 2 else 0.5 * (times[mid - 1] + times[mid])


def benchmark_moe_scaling(
    n_experts_list: list[int] | None = None,
    repetitions: int = 5,
    out_path: str | os.PathLike | None = None,
    **shape_kwargs,
) -> BenchReport:
    """Time the MoE forward across expert counts and fit a line.

    Single-threaded for stable medians; returns per-count medians, the linear
    fit, and its R^2.
    """
    n_experts_list = n_experts_list or [1, 2, 3, 4, 5, 6]
    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        rows = [
            BenchRow(n_experts=n, median_ms=moe_forward_time(n, repetitions=repetitions, **shape_kwargs))
            for n in n_experts_list
        ]
    finally:
        torch.set_num_threads(previous_threads)
    xs = np.array([r.n_experts for r in rows], dtype=np.float64)
    ys = np.array([r.median_ms for r in rows], dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(((ys - predicted) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    for row, pred in zip(rows, predicted):
        row.fit_residual = row.median_ms - float(pred)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("n_experts,median_ms,fit_residual\n")
            for row in rows:
                fh.write(f"{row.n_experts},{row.median_ms!r},{row.fit_residual!r}\n")
    return BenchReport(rows=rows, slope_ms=float(slope), intercept_ms=float(intercept), r_squared=r_squared)
