"""Detection models: the attentive-fusion classifier, the trainable-encoder
baseline over it, and the retrieval-augmented variant.

The fusion classifier (``mfa_forward``) pools an (B, L, T, F) feature stack
over time per layer, projects each layer position, and pools over layers,
yielding a 4F representation per batch row.

The retrieval-augmented variant runs the query and its K retrieved
references through the same fusion module, pools the reference-minus-query
differences over the K axis, and classifies the pooled differences
concatenated with the query representation. The ``just_difference``
variant drops the query branch at the head.

Scores are logit(bonafide) - logit(spoof); higher means more bonafide.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .corpus import LABEL_BONAFIDE, ManifestRecord, load_segment
from .encoder import CacheIndex, EncoderConfig, encoder_fingerprint, layer_mixer, mel_frames
from .errors import ConfigurationError, IncompatibilityError, InvalidInputError
from .metrics import ScoreRecord, pooled_eer
from .vecstore import QueryResult, StoreSet

CLASS_SPOOF = 0
CLASS_BONAFIDE = 1

MODEL_KINDS = ("baseline", "radmfa", "just_difference")


# --- parameter containers ---------------------------------------------------


@dataclass
class MfaParams:
    time_pools: list[nn.AspParams]  # per layer, F -> 2F
    merge_w: nn.Tensor  # (2F, 2F), shared across layer positions
    merge_b: nn.Tensor
    layer_pool: nn.AspParams  # 2F -> 4F

    @property
    def n_layers(self) -> int:
        return len(self.time_pools)

    @property
    def feat_dim(self) -> int:
        return self.time_pools[0].attn_w.data.shape[0]

    def tensors(self, prefix: str = "mfa") -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        for l, pool in enumerate(self.time_pools):
            out.update(pool.tensors(f"{prefix}.time_pool.{l}"))
        out[f"{prefix}.merge_w"] = self.merge_w
        out[f"{prefix}.merge_b"] = self.merge_b
        out.update(self.layer_pool.tensors(f"{prefix}.layer_pool"))
        return out


@dataclass
class BaselineParams:
    scales: list[nn.Tensor]  # per layer, (F,)
    shifts: list[nn.Tensor]
    mfa: MfaParams
    head_w: nn.Tensor  # (4F, 2)
    head_b: nn.Tensor

    def tensors(self) -> dict[str, nn.Tensor]:
        out = {}
        for l, (scale, shift) in enumerate(zip(self.scales, self.shifts)):
            out[f"encoder.scale.{l}"] = scale
            out[f"encoder.shift.{l}"] = shift
        out.update(self.mfa.tensors())
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out


@dataclass
class RadMfaParams:
    mfa: MfaParams  # shared between query and references
    sample_pool: nn.AspParams  # 4F -> 8F over the K axis
    head_w: nn.Tensor  # (12F, 2), or (8F, 2) for just_difference
    head_b: nn.Tensor
    just_difference: bool = False

    def tensors(self) -> dict[str, nn.Tensor]:
        out = self.mfa.tensors()
        out.update(self.sample_pool.tensors("sample_pool"))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out


def _asp_from_tensors(tensors: dict[str, nn.Tensor], prefix: str) -> nn.AspParams:
    return nn.AspParams(
        attn_w=tensors[f"{prefix}.attn_w"],
        attn_b=tensors[f"{prefix}.attn_b"],
        score_w=tensors[f"{prefix}.score_w"],
        score_b=tensors[f"{prefix}.score_b"],
    )


def mfa_from_tensors(
    n_layers: int, tensors: dict[str, nn.Tensor], prefix: str = "mfa"
) -> MfaParams:
    """Rebuild an MfaParams container around existing tensors (see tensors())."""
    return MfaParams(
        time_pools=[
            _asp_from_tensors(tensors, f"{prefix}.time_pool.{l}") for l in range(n_layers)
        ],
        merge_w=tensors[f"{prefix}.merge_w"],
        merge_b=tensors[f"{prefix}.merge_b"],
        layer_pool=_asp_from_tensors(tensors, f"{prefix}.layer_pool"),
    )


def radmfa_from_tensors(
    n_layers: int, tensors: dict[str, nn.Tensor], just_difference: bool = False
) -> RadMfaParams:
    return RadMfaParams(
        mfa=mfa_from_tensors(n_layers, tensors),
        sample_pool=_asp_from_tensors(tensors, "sample_pool"),
        head_w=tensors["head_w"],
        head_b=tensors["head_b"],
        just_difference=just_difference,
    )


def init_mfa(n_layers: int, feat_dim: int, rng: np.random.Generator) -> MfaParams:
    return MfaParams(
        time_pools=[nn.init_asp(feat_dim, rng) for _ in range(n_layers)],
        merge_w=nn.parameter(nn.glorot(rng, 2 * feat_dim, 2 * feat_dim)),
        merge_b=nn.parameter(np.zeros(2 * feat_dim)),
        layer_pool=nn.init_asp(2 * feat_dim, rng),
    )


def init_baseline(n_layers: int, feat_dim: int, rng: np.random.Generator) -> BaselineParams:
    return BaselineParams(
        scales=[nn.parameter(np.ones(feat_dim)) for _ in range(n_layers)],
        shifts=[nn.parameter(np.zeros(feat_dim)) for _ in range(n_layers)],
        mfa=init_mfa(n_layers, feat_dim, rng),
        head_w=nn.parameter(nn.glorot(rng, 4 * feat_dim, 2)),
        head_b=nn.parameter(np.zeros(2)),
    )


def init_radmfa(
    n_layers: int, feat_dim: int, rng: np.random.Generator, just_difference: bool = False
) -> RadMfaParams:
    head_in = (8 if just_difference else 12) * feat_dim
    return RadMfaParams(
        mfa=init_mfa(n_layers, feat_dim, rng),
        sample_pool=nn.init_asp(4 * feat_dim, rng),
        head_w=nn.parameter(nn.glorot(rng, head_in, 2)),
        head_b=nn.parameter(np.zeros(2)),
        just_difference=just_difference,
    )


# --- forward passes ----------------------------------------------------------


def mfa_forward(features, params: MfaParams) -> nn.Tensor:
    """(B, L, T, F) -> (B, 4F)."""
    x = features if isinstance(features, nn.Tensor) else nn.constant(features)
    if x.data.ndim != 4:
        raise InvalidInputError(f"expected (B, L, T, F), got shape {x.data.shape}")
    n_layers = x.data.shape[1]
    if n_layers != params.n_layers or x.data.shape[3] != params.feat_dim:
        raise InvalidInputError(
            f"feature stack {x.data.shape} does not match params "
            f"(L={params.n_layers}, F={params.feat_dim})"
        )
    pooled = [
        nn.asp(nn.index_axis(x, l, axis=1), params.time_pools[l]) for l in range(n_layers)
    ]
    stacked = nn.stack(pooled, axis=1)  # (B, L, 2F)
    merged = nn.affine(stacked, params.merge_w, params.merge_b)
    return nn.asp(merged, params.layer_pool)  # (B, 4F)


def radmfa_forward(query_feat, ref_feats, params: RadMfaParams) -> nn.Tensor:
    """Query (1, L, T, F) with references (K, L, T, F) -> logits (1, 2)."""
    query = query_feat if isinstance(query_feat, nn.Tensor) else nn.constant(query_feat)
    refs = ref_feats if isinstance(ref_feats, nn.Tensor) else nn.constant(ref_feats)
    if query.data.shape[0] != 1:
        raise InvalidInputError("query batch must be 1")
    k = refs.data.shape[0]
    if k < 1:
        raise InvalidInputError("retrieval returned no references")
    if refs.data.shape[1:] != query.data.shape[1:]:
        raise InvalidInputError(
            f"reference shape {refs.data.shape} incompatible with query {query.data.shape}"
        )
    # one shared fusion pass keeps query and reference rows numerically
    # identical when their features are identical (exact zero difference)
    combined = nn.concat([query, refs], axis=0)  # (1+K, L, T, F)
    reprs = mfa_forward(combined, params.mfa)  # (1+K, 4F)
    query_repr = nn.narrow(reprs, axis=0, start=0, length=1)  # (1, 4F)
    ref_reprs = nn.narrow(reprs, axis=0, start=1, length=k)  # (K, 4F)
    diffs = nn.sub(ref_reprs, query_repr)  # (K, 4F)
    diffs = nn.reshape(diffs, (1, k, diffs.data.shape[-1]))
    pooled_diff = nn.asp(diffs, params.sample_pool)  # (1, 8F)
    head_in = pooled_diff if params.just_difference else nn.concat(
        [pooled_diff, query_repr], axis=-1
    )
    return nn.affine(head_in, params.head_w, params.head_b)


def just_difference_forward(query_feat, ref_feats, params: RadMfaParams) -> nn.Tensor:
    """Ablation head: classify the pooled differences alone (8F -> 2)."""
    if not params.just_difference:
        raise ConfigurationError("params were not built with just_difference=True")
    return radmfa_forward(query_feat, ref_feats, params)


def _radmfa_forward_batch(queries: np.ndarray, refs: np.ndarray, params: RadMfaParams) -> nn.Tensor:
    """Batched equivalent of radmfa_forward.

    queries is (B, L, T, F), refs is (B, K, L, T, F); one shared fusion pass
    over the B*(1+K) rows, then per-query difference pooling. Returns (B, 2).
    """
    n_queries, k = refs.shape[0], refs.shape[1]
    rows = np.concatenate([queries[:, None], refs], axis=1)  # (B, 1+K, L, T, F)
    flat = nn.constant(rows.reshape((n_queries * (1 + k),) + rows.shape[2:]))
    reprs = mfa_forward(flat, params.mfa)  # (B*(1+K), 4F)
    grouped = nn.reshape(reprs, (n_queries, 1 + k, reprs.data.shape[-1]))
    query_repr = nn.narrow(grouped, axis=1, start=0, length=1)  # (B, 1, 4F)
    ref_reprs = nn.narrow(grouped, axis=1, start=1, length=k)  # (B, K, 4F)
    diffs = nn.sub(ref_reprs, query_repr)
    pooled_diff = nn.asp(diffs, params.sample_pool)  # (B, 8F)
    flat_query = nn.reshape(query_repr, (n_queries, reprs.data.shape[-1]))
    head_in = pooled_diff if params.just_difference else nn.concat(
        [pooled_diff, flat_query], axis=-1
    )
    return nn.affine(head_in, params.head_w, params.head_b)


def encoder_cascade(
    mels: np.ndarray, params: BaselineParams, encoder_cfg: EncoderConfig
) -> nn.Tensor:
    """Differentiable cascade from batched log-mel (B, T', F) to (B, L, T', F)."""
    h = nn.constant(mels)
    h = nn.add(nn.mul(h, params.scales[0]), params.shifts[0])
    layers = [h]
    for l in range(1, encoder_cfg.n_layers):
        mixer = nn.constant(layer_mixer(encoder_cfg.seed, l, encoder_cfg.feat_dim).T)
        h = nn.tanh(nn.affine(layers[-1], mixer))
        h = nn.add(nn.mul(h, params.scales[l]), params.shifts[l])
        layers.append(h)
    return nn.stack(layers, axis=1)


def _baseline_forward_mel(
    mels: np.ndarray, params: BaselineParams, encoder_cfg: EncoderConfig, tau: int
) -> nn.Tensor:
    stack = encoder_cascade(mels, params, encoder_cfg)
    short = nn.block_mean(stack, tau, axis=2)
    repr_ = mfa_forward(short, params.mfa)
    return nn.affine(repr_, params.head_w, params.head_b)


def baseline_forward(segments, params: BaselineParams, encoder_cfg: EncoderConfig, tau: int) -> nn.Tensor:
    """Segments -> logits (B, 2) through the trainable encoder stack."""
    if encoder_cfg.kind != "pseudo_trainable":
        raise ConfigurationError("baseline needs encoder kind pseudo_trainable")
    mels = np.stack([mel_frames(s.samples, encoder_cfg.feat_dim) for s in segments])
    return _baseline_forward_mel(mels, params, encoder_cfg, tau)


# --- reference assembly -------------------------------------------------------


class FeatureLookup:
    """Memoized access to cached short features and embeddings by utt_id."""

    def __init__(self, cache: CacheIndex):
        self.cache = cache
        self._short: dict[str, np.ndarray] = {}
        self._embed: dict[str, np.ndarray] = {}

    def short(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._short:
            self._short[utt_id] = self.cache.load_short(utt_id).values.astype(np.float32)
        return self._short[utt_id]

    def embedding(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._embed:
            self._embed[utt_id] = self.cache.load_embedding(utt_id).values.astype(np.float64)
        return self._embed[utt_id]


def assemble_references(result: QueryResult, lookup: FeatureLookup, k: int) -> np.ndarray:
    """Stack (K, L, T, F) where layer l of reference k is layer-l's rank-k hit."""
    n_layers = len(result.hits)
    k_eff = min([k] + [len(hits) for hits in result.hits])
    if k_eff < 1:
        raise InvalidInputError("retrieval returned no references")
    refs = []
    for rank in range(k_eff):
        layers = [
            lookup.short(result.hits[l][rank].segment_ref)[l] for l in range(n_layers)
        ]
        refs.append(np.stack(layers, axis=0))
    return np.stack(refs, axis=0)


def retrieve_references(
    utt_id: str, store: StoreSet, lookup: FeatureLookup, k: int
) -> np.ndarray:
    """Top-k references for one cached query, always excluding the query itself."""
    result = store.query_topk(lookup.embedding(utt_id), k, exclude={utt_id})
    return assemble_references(result, lookup, k)


# --- training ----------------------------------------------------------------


@dataclass
class TrainHyper:
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    k_refs: int = 10
    tau: int = 10


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    best_dev_eer: float
    best_epoch: int
    meta: dict[str, str]


def _labels(records: list[ManifestRecord]) -> np.ndarray:
    return np.array(
        [CLASS_BONAFIDE if r.label == LABEL_BONAFIDE else CLASS_SPOOF for r in records]
    )


def _scores_from_logits(records, logits: np.ndarray) -> list[ScoreRecord]:
    return [
        ScoreRecord(r.utt_id, float(z[CLASS_BONAFIDE] - z[CLASS_SPOOF]), r.label)
        for r, z in zip(records, logits)
    ]


class _BaselineRunner:
    def __init__(self, manifest_dir, encoder_cfg, hyper, mel_store=None):
        if encoder_cfg.kind != "pseudo_trainable":
            raise ConfigurationError("baseline training needs kind pseudo_trainable")
        self.encoder_cfg = encoder_cfg
        self.hyper = hyper
        self.mel_store = mel_store if mel_store is not None else {}
        self.manifest_dir = manifest_dir
        rng = np.random.default_rng(np.random.SeedSequence((hyper.seed, 501)))
        self.params = init_baseline(encoder_cfg.n_layers, encoder_cfg.feat_dim, rng)
        self.param_set = nn.ParamSet(self.params.tensors())

    def _mel(self, record) -> np.ndarray:
        if record.utt_id not in self.mel_store:
            segment = load_segment(self.manifest_dir, record)
            self.mel_store[record.utt_id] = mel_frames(
                segment.samples, self.encoder_cfg.feat_dim
            )
        return self.mel_store[record.utt_id]

    def logits(self, batch_records) -> nn.Tensor:
        mels = np.stack([self._mel(r) for r in batch_records])
        return _baseline_forward_mel(mels, self.params, self.encoder_cfg, self.hyper.tau)

    def tuned_encoder(self) -> EncoderConfig:
        scales = np.stack([t.data for t in self.params.scales])
        shifts = np.stack([t.data for t in self.params.shifts])
        return self.encoder_cfg.with_tuning(scales, shifts)


class _RadRunner:
    def __init__(self, store, cache, hyper, just_difference):
        if store is None or cache is None:
            raise ConfigurationError("retrieval-augmented training needs a store and a cache")
        if store.fingerprint != cache.fingerprint:
            raise IncompatibilityError("store and cache were built from different encoders")
        self.hyper = hyper
        self.lookup = FeatureLookup(cache)
        self.store = store
        rng = np.random.default_rng(np.random.SeedSequence((hyper.seed, 502)))
        self.params = init_radmfa(
            cache.n_layers, cache.feat_dim, rng, just_difference=just_difference
        )
        self.param_set = nn.ParamSet(self.params.tensors())
        self._queries: dict[str, np.ndarray] = {}
        self._refs: dict[str, np.ndarray] = {}

    def _materialize(self, record) -> None:
        if record.utt_id in self._queries:
            return
        self._queries[record.utt_id] = self.lookup.short(record.utt_id)
        self._refs[record.utt_id] = retrieve_references(
            record.utt_id, self.store, self.lookup, self.hyper.k_refs
        )

    def logits(self, batch_records) -> nn.Tensor:
        for record in batch_records:
            self._materialize(record)
        queries = np.stack([self._queries[r.utt_id] for r in batch_records]).astype(np.float64)
        refs = np.stack([self._refs[r.utt_id] for r in batch_records]).astype(np.float64)
        return _radmfa_forward_batch(queries, refs, self.params)


def _eval_eer(runner, records, batch_size) -> float:
    logits = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        logits.append(runner.logits(batch).data)
    scores = _scores_from_logits(records, np.concatenate(logits, axis=0))
    return pooled_eer(scores).eer


def train_model(
    kind: str,
    records: list[ManifestRecord],
    manifest_dir,
    encoder_cfg: EncoderConfig,
    hyper: TrainHyper,
    out_dir,
    *,
    store: StoreSet | None = None,
    cache: CacheIndex | None = None,
    run_name: str = "model",
    mel_store: dict | None = None,
) -> TrainResult:
    """Deterministic training loop with per-epoch dev EER and best-checkpoint
    selection. Retrieval during training always excludes the query's own id.
    """
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    train_records = [r for r in records if r.split == "train"]
    dev_records = [r for r in records if r.split == "dev"]
    if not train_records or not dev_records:
        raise ConfigurationError("need non-empty train and dev splits")

    if kind == "baseline":
        runner = _BaselineRunner(manifest_dir, encoder_cfg, hyper, mel_store)
    else:
        runner = _RadRunner(store, cache, hyper, kind == "just_difference")

    shuffle_rng = np.random.default_rng(np.random.SeedSequence((hyper.seed, 503)))
    log_lines = []
    best = None  # (eer, epoch, arrays)
    for epoch in range(1, hyper.epochs + 1):
        order = shuffle_rng.permutation(len(train_records))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train_records[i] for i in order[start : start + hyper.batch_size]]
            runner.param_set.zero_grad()
            logits = runner.logits(batch)
            loss = nn.softmax_xent(logits, _labels(batch))
            loss.backward()
            runner.param_set.adam_step(hyper.lr)
            epoch_loss += float(loss.data) * len(batch)
        epoch_loss /= len(train_records)
        dev_eer = _eval_eer(runner, dev_records, hyper.batch_size)
        log_lines.append(f"{epoch}\t{epoch_loss:.9g}\t{dev_eer:.9g}")
        if best is None or dev_eer < best[0]:
            best = (dev_eer, epoch, runner.param_set.clone_arrays())

    best_eer, best_epoch, best_arrays = best
    runner.param_set.load_arrays(best_arrays)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": kind,
        "n_layers": str(encoder_cfg.n_layers),
        "feat_dim": str(encoder_cfg.feat_dim),
        "tau": str(hyper.tau),
        "k_refs": str(hyper.k_refs),
        "seed": str(hyper.seed),
        "best_epoch": str(best_epoch),
        "fingerprint": cache.fingerprint if cache is not None else encoder_fingerprint(encoder_cfg),
        "encoder_seed": str(encoder_cfg.seed),
    }
    checkpoint_path = out_dir / f"{run_name}.ckpt"
    nn.save_checkpoint(checkpoint_path, best_arrays, meta)
    log_path = out_dir / f"{run_name}.log"
    log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        best_dev_eer=best_eer,
        best_epoch=best_epoch,
        meta=meta,
    )


# --- scoring -------------------------------------------------------------------


def tuned_encoder_from_checkpoint(checkpoint_path, base_cfg: EncoderConfig) -> EncoderConfig:
    """Reconstruct the tuned encoder the baseline checkpoint trained."""
    arrays, meta = nn.load_checkpoint(checkpoint_path)
    if meta["kind"] != "baseline":
        raise IncompatibilityError("only baseline checkpoints carry encoder tuning")
    n_layers = int(meta["n_layers"])
    scales = np.stack([arrays[f"encoder.scale.{l}"] for l in range(n_layers)])
    shifts = np.stack([arrays[f"encoder.shift.{l}"] for l in range(n_layers)])
    return base_cfg.with_tuning(scales, shifts)


def _rebuild_baseline(arrays: dict[str, np.ndarray], n_layers: int, feat_dim: int) -> BaselineParams:
    rng = np.random.default_rng(0)
    params = init_baseline(n_layers, feat_dim, rng)
    nn.ParamSet(params.tensors()).load_arrays(arrays)
    return params


def _rebuild_radmfa(
    arrays: dict[str, np.ndarray], n_layers: int, feat_dim: int, just_difference: bool
) -> RadMfaParams:
    rng = np.random.default_rng(0)
    params = init_radmfa(n_layers, feat_dim, rng, just_difference=just_difference)
    nn.ParamSet(params.tensors()).load_arrays(arrays)
    return params


def score_dataset(
    kind: str,
    checkpoint_path,
    records: list[ManifestRecord],
    manifest_dir,
    *,
    encoder_cfg: EncoderConfig | None = None,
    store: StoreSet | None = None,
    cache: CacheIndex | None = None,
    k_refs: int | None = None,
    batch_size: int = 32,
) -> list[ScoreRecord]:
    """Score records with a trained checkpoint; deterministic."""
    arrays, meta = nn.load_checkpoint(checkpoint_path)
    if meta["kind"] != kind:
        raise IncompatibilityError(f"checkpoint is kind {meta['kind']}, requested {kind}")
    n_layers, feat_dim = int(meta["n_layers"]), int(meta["feat_dim"])
    tau = int(meta["tau"])
    k = k_refs if k_refs is not None else int(meta["k_refs"])

    if kind == "baseline":
        if encoder_cfg is None:
            encoder_cfg = EncoderConfig(
                kind="pseudo_trainable",
                n_layers=n_layers,
                feat_dim=feat_dim,
                seed=int(meta["encoder_seed"]),
            )
        elif (
            int(meta["encoder_seed"]) != encoder_cfg.seed
            or n_layers != encoder_cfg.n_layers
            or feat_dim != encoder_cfg.feat_dim
        ):
            raise IncompatibilityError(
                "checkpoint encoder geometry does not match the configured encoder"
            )
        params = _rebuild_baseline(arrays, n_layers, feat_dim)
        all_logits = []
        for start in range(0, len(records), batch_size):
            batch = records[start : start + batch_size]
            segments = [load_segment(manifest_dir, r) for r in batch]
            mels = np.stack([mel_frames(s.samples, feat_dim) for s in segments])
            all_logits.append(_baseline_forward_mel(mels, params, encoder_cfg, tau).data)
        return _scores_from_logits(records, np.concatenate(all_logits, axis=0))

    if store is None or cache is None:
        raise ConfigurationError("retrieval-augmented scoring needs a store and a cache")
    if meta["fingerprint"] != cache.fingerprint:
        raise IncompatibilityError(
            "checkpoint was trained on features from a different encoder"
        )
    params = _rebuild_radmfa(arrays, n_layers, feat_dim, kind == "just_difference")
    lookup = FeatureLookup(cache)
    all_logits = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        queries = np.stack([lookup.short(r.utt_id) for r in batch]).astype(np.float64)
        refs = np.stack(
            [retrieve_references(r.utt_id, store, lookup, k) for r in batch]
        ).astype(np.float64)
        all_logits.append(_radmfa_forward_batch(queries, refs, params).data)
    return _scores_from_logits(records, np.concatenate(all_logits, axis=0))
