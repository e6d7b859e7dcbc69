"""End-to-end experiment orchestration.

One seed experiment = train the fine-tuning baseline, freeze its tuned
encoder, re-extract and cache features, build the bonafide retrieval
store, train the retrieval-augmented model, and score the eval split.
The ablation grid and the temporal-compression sweep reuse each seed's
baseline and feature cache.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import metrics, model, vecstore
from .corpus import LABEL_BONAFIDE, ManifestRecord
from .encoder import CacheIndex, EncoderConfig, extract_and_cache
from .model import FeatureLookup, TrainHyper
from .vecstore import StoreSet, speaker_consistency

ABLATION_VARIANTS = ("full", "no_rad", "no_extra_db", "just_difference")
TAU_SWEEP = (5, 10, 20)

EXPERIMENT_DB_SPLITS = frozenset({"train", "retrieval_extra"})


@dataclass
class SeedOutcome:
    seed: int
    baseline_ckpt: Path
    baseline_eer: float
    rad_ckpt: Path
    rad_eer: float
    tuned_cfg: EncoderConfig
    cache: CacheIndex
    store: StoreSet
    eval_scores_path: Path


def config_hash(items: dict) -> str:
    text = "\n".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_run_manifest(out_dir, items: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(items)
    (out_dir / "config_hash.txt").write_text(digest + "\n", encoding="utf-8")
    lines = [f"{k}={items[k]}" for k in sorted(items)] + [f"config_hash={digest}"]
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _score_and_write(scores, path) -> float:
    metrics.write_scores(path, scores)
    return metrics.pooled_eer(scores).eer


def run_seed_experiment(
    workdir,
    records: list[ManifestRecord],
    manifest_dir,
    base_cfg: EncoderConfig,
    hyper: TrainHyper,
    seed: int,
    *,
    mel_store: dict | None = None,
) -> SeedOutcome:
    """Baseline then retrieval-augmented training for one seed."""
    workdir = Path(workdir)
    hyper = replace(hyper, seed=seed)
    eval_records = [r for r in records if r.split == "eval"]

    baseline = model.train_model(
        "baseline",
        records,
        manifest_dir,
        base_cfg,
        hyper,
        workdir / "checkpoints",
        run_name=f"baseline_seed{seed}",
        mel_store=mel_store,
    )
    baseline_scores = model.score_dataset(
        "baseline",
        baseline.checkpoint_path,
        eval_records,
        manifest_dir,
        encoder_cfg=base_cfg,
    )
    baseline_eer = _score_and_write(
        baseline_scores, workdir / "scores" / f"baseline_seed{seed}.tsv"
    )

    tuned_cfg = model.tuned_encoder_from_checkpoint(baseline.checkpoint_path, base_cfg)
    cache = extract_and_cache(
        records, manifest_dir, tuned_cfg, hyper.tau, workdir / f"cache_seed{seed}"
    )
    store, _ = vecstore.build_stores(
        records, cache, bonafide_only=True, splits=EXPERIMENT_DB_SPLITS
    )

    rad = model.train_model(
        "radmfa",
        records,
        manifest_dir,
        tuned_cfg,
        hyper,
        workdir / "checkpoints",
        store=store,
        cache=cache,
        run_name=f"radmfa_seed{seed}",
    )
    rad_scores = model.score_dataset(
        "radmfa",
        rad.checkpoint_path,
        eval_records,
        manifest_dir,
        store=store,
        cache=cache,
    )
    scores_path = workdir / "scores" / f"radmfa_seed{seed}.tsv"
    rad_eer = _score_and_write(rad_scores, scores_path)

    return SeedOutcome(
        seed=seed,
        baseline_ckpt=baseline.checkpoint_path,
        baseline_eer=baseline_eer,
        rad_ckpt=rad.checkpoint_path,
        rad_eer=rad_eer,
        tuned_cfg=tuned_cfg,
        cache=cache,
        store=store,
        eval_scores_path=scores_path,
    )


def run_variant(
    workdir,
    records: list[ManifestRecord],
    manifest_dir,
    outcome: SeedOutcome,
    hyper: TrainHyper,
    variant: str,
) -> float:
    """Train/score one ablation variant reusing a seed's tuned features."""
    workdir = Path(workdir)
    hyper = replace(hyper, seed=outcome.seed)
    eval_records = [r for r in records if r.split == "eval"]
    if variant == "full":
        return outcome.rad_eer
    if variant == "no_rad":
        return outcome.baseline_eer
    if variant == "no_extra_db":
        store, _ = vecstore.build_stores(
            records, outcome.cache, bonafide_only=True, splits={"train"}
        )
        kind = "radmfa"
    elif variant == "just_difference":
        store = outcome.store
        kind = "just_difference"
    else:
        raise ValueError(f"unknown variant {variant!r}")
    result = model.train_model(
        kind,
        records,
        manifest_dir,
        outcome.tuned_cfg,
        hyper,
        workdir / "checkpoints",
        store=store,
        cache=outcome.cache,
        run_name=f"{variant}_seed{outcome.seed}",
    )
    scores = model.score_dataset(
        kind,
        result.checkpoint_path,
        eval_records,
        manifest_dir,
        store=store,
        cache=outcome.cache,
    )
    return _score_and_write(scores, workdir / "scores" / f"{variant}_seed{outcome.seed}.tsv")


def ablation_grid(
    workdir,
    records: list[ManifestRecord],
    manifest_dir,
    base_cfg: EncoderConfig,
    hyper: TrainHyper,
    seeds,
    *,
    variants=ABLATION_VARIANTS,
    taus=TAU_SWEEP,
) -> tuple[list[tuple[str, int, float]], list[tuple[int, int, float]]]:
    """Run the full variant grid plus the compression sweep.

    Returns (ablation rows, sweep rows); also writes ablation.csv and
    tau_sweep.csv under workdir.
    """
    workdir = Path(workdir)
    mel_store: dict = {}
    ablation_rows: list[tuple[str, int, float]] = []
    sweep_rows: list[tuple[int, int, float]] = []
    for seed in seeds:
        outcome = run_seed_experiment(
            workdir, records, manifest_dir, base_cfg, hyper, seed, mel_store=mel_store
        )
        for variant in variants:
            eer = run_variant(workdir, records, manifest_dir, outcome, hyper, variant)
            ablation_rows.append((variant, seed, eer))
        for tau in taus:
            eer = score_at_tau(workdir, records, manifest_dir, outcome, tau)
            sweep_rows.append((tau, seed, eer))

    lines = ["variant,seed,pooled_eer"]
    lines += [f"{v},{s},{e:.9g}" for v, s, e in ablation_rows]
    (workdir / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    lines = ["tau,seed,pooled_eer"]
    lines += [f"{t},{s},{e:.9g}" for t, s, e in sweep_rows]
    (workdir / "tau_sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ablation_rows, sweep_rows


def score_at_tau(
    workdir,
    records: list[ManifestRecord],
    manifest_dir,
    outcome: SeedOutcome,
    tau: int,
) -> float:
    """Score a trained model on features compressed at a different rate.

    The pooling layers are length-agnostic, so the checkpoint trained at
    the default compression scores features of any block length; retrieval
    is unchanged because embeddings do not depend on the compression.
    """
    workdir = Path(workdir)
    eval_records = [r for r in records if r.split == "eval"]
    cache = extract_and_cache(
        records,
        manifest_dir,
        outcome.tuned_cfg,
        tau,
        workdir / f"cache_seed{outcome.seed}_tau{tau}",
    )
    store, _ = vecstore.build_stores(
        records, cache, bonafide_only=True, splits=EXPERIMENT_DB_SPLITS
    )
    scores = model.score_dataset(
        "radmfa",
        outcome.rad_ckpt,
        eval_records,
        manifest_dir,
        store=store,
        cache=cache,
    )
    return _score_and_write(
        scores, workdir / "scores" / f"radmfa_seed{outcome.seed}_tau{tau}.tsv"
    )


@dataclass
class RetrievalReport:
    n_queries: int
    chance_rate: float
    per_layer_median: list[float]
    per_layer_mean_similarity: list[float]
    rows: list[tuple[str, int, list[float | None]]]  # (utt, n_layers, fractions)


def retrieval_report(
    store: StoreSet,
    cache: CacheIndex,
    records: list[ManifestRecord],
    *,
    k: int = 10,
    n_queries: int = 50,
    seed: int = 0,
    query_split: str = "eval",
) -> RetrievalReport:
    """Quantify how often each layer retrieves the query's own speaker."""
    lookup = FeatureLookup(cache)
    candidates = [
        r for r in records if r.split == query_split and r.label == LABEL_BONAFIDE
    ]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 701)))
    order = rng.permutation(len(candidates))[:n_queries]
    queries = [candidates[i] for i in order]
    fractions: list[list[float | None]] = [[] for _ in range(store.n_layers)]
    sims: list[list[float]] = [[] for _ in range(store.n_layers)]
    rows = []
    for record in queries:
        result = store.query_topk(lookup.embedding(record.utt_id), k, exclude={record.utt_id})
        per_layer = speaker_consistency(result, record.speaker_id)
        rows.append((record.utt_id, store.n_layers, per_layer))
        for layer, frac in enumerate(per_layer):
            if frac is not None:
                fractions[layer].append(frac)
            sims[layer].extend(h.similarity for h in result.hits[layer])
    chance = 1.0 / max(1, len(set(store.speaker_ids)))
    return RetrievalReport(
        n_queries=len(queries),
        chance_rate=chance,
        per_layer_median=[float(np.median(f)) if f else float("nan") for f in fractions],
        per_layer_mean_similarity=[float(np.mean(s)) if s else float("nan") for s in sims],
        rows=rows,
    )


def write_retrieval_report(path, report: RetrievalReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["layer,median_same_speaker,mean_similarity,chance_rate"]
    for layer, (med, sim) in enumerate(
        zip(report.per_layer_median, report.per_layer_mean_similarity)
    ):
        lines.append(f"{layer},{med:.9g},{sim:.9g},{report.chance_rate:.9g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
