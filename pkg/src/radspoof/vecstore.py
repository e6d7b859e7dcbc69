"""Per-layer vector databases over bonafide embeddings with exact top-K search.

One flat store per encoder layer, all sharing the same record list in
insertion order. Search is an exact cosine scan: similarities are ranked
descending with ties broken by ascending insertion index, so results are
total-ordered and reproducible. Zero-norm vectors are never retrieved.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import LABEL_BONAFIDE, ManifestRecord
from .encoder import CacheIndex
from .errors import FormatError, IncompatibilityError, QueryError, StoreBuildError

DEFAULT_DB_SPLITS = frozenset({"train", "dev", "retrieval_extra"})

_LAYER_MAGIC = b"RADV"
_LAYER_HEADER = struct.Struct("<4sHII")


@dataclass
class RetrievalHit:
    layer: int
    rank: int  # 1-based
    similarity: float
    segment_ref: str
    speaker_id: str
    short_feature_path: str


@dataclass
class QueryResult:
    hits: list[list[RetrievalHit]]  # per layer
    truncated: bool


@dataclass
class BuildReport:
    n_inserted: int = 0
    n_skipped_label: int = 0
    n_skipped_split: int = 0


@dataclass
class StoreSet:
    n_layers: int
    feat_dim: int
    tau: int
    fingerprint: str
    built_at: str
    utt_ids: list[str]
    speaker_ids: list[str]
    short_paths: list[str]
    vectors: list[np.ndarray]  # per layer, (N, F) float32
    _norms: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._norms:
            self._norms = [
                np.linalg.norm(v.astype(np.float64), axis=1) for v in self.vectors
            ]

    @property
    def count(self) -> int:
        return len(self.utt_ids)

    def query_topk(self, query: np.ndarray, k: int, exclude=frozenset()) -> QueryResult:
        """Exact per-layer cosine top-k.

        query is (L, F); layer l is searched only against store l. Excluded
        utt_ids and zero-norm records never appear. Returns fewer than k
        hits per layer (and truncated=True) when candidates run out.
        """
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.n_layers, self.feat_dim):
            raise QueryError(
                f"query shape {query.shape} != ({self.n_layers}, {self.feat_dim})"
            )
        if k < 1:
            raise QueryError("k must be >= 1")
        exclude = set(exclude)
        keep = np.array([u not in exclude for u in self.utt_ids], dtype=bool)
        per_layer: list[list[RetrievalHit]] = []
        truncated = False
        for layer in range(self.n_layers):
            q = query[layer]
            q_norm = np.linalg.norm(q)
            norms = self._norms[layer]
            mask = keep & (norms > 0.0)
            candidates = np.nonzero(mask)[0]
            hits: list[RetrievalHit] = []
            if candidates.size:
                vectors = self.vectors[layer][candidates].astype(np.float64)
                if q_norm > 0.0:
                    sims = (vectors @ q) / (norms[candidates] * q_norm)
                else:
                    sims = np.zeros(candidates.size)
                order = np.lexsort((candidates, -sims))[: min(k, candidates.size)]
                for rank, pos in enumerate(order, start=1):
                    idx = int(candidates[pos])
                    hits.append(
                        RetrievalHit(
                            layer=layer,
                            rank=rank,
                            similarity=float(sims[pos]),
                            segment_ref=self.utt_ids[idx],
                            speaker_id=self.speaker_ids[idx],
                            short_feature_path=self.short_paths[idx],
                        )
                    )
            if len(hits) < k:
                truncated = True
            per_layer.append(hits)
        return QueryResult(hits=per_layer, truncated=truncated)


def build_stores(
    records: list[ManifestRecord],
    cache: CacheIndex,
    *,
    bonafide_only: bool = True,
    splits=DEFAULT_DB_SPLITS,
) -> tuple[StoreSet, BuildReport]:
    """Insert each selected record's per-layer embedding rows.

    The default filter keeps bonafide records from train/dev/retrieval_extra;
    spoofed records under the bonafide-only filter are skipped and counted.
    """
    splits = set(splits)
    report = BuildReport()
    utt_ids: list[str] = []
    speaker_ids: list[str] = []
    short_paths: list[str] = []
    rows: list[np.ndarray] = []
    for record in records:
        if record.split not in splits:
            report.n_skipped_split += 1
            continue
        if bonafide_only and record.label != LABEL_BONAFIDE:
            report.n_skipped_label += 1
            continue
        if record.utt_id not in cache.entries:
            raise StoreBuildError(f"no cached features for {record.utt_id!r}")
        embedding = cache.load_embedding(record.utt_id)
        rows.append(embedding.values.astype(np.float32))
        utt_ids.append(record.utt_id)
        speaker_ids.append(record.speaker_id)
        short_paths.append(str(cache.short_path(record.utt_id)))
        report.n_inserted += 1

    if rows:
        stacked = np.stack(rows, axis=0)  # (N, L, F)
        vectors = [np.ascontiguousarray(stacked[:, l, :]) for l in range(cache.n_layers)]
    else:
        vectors = [
            np.zeros((0, cache.feat_dim), dtype=np.float32) for _ in range(cache.n_layers)
        ]
    store = StoreSet(
        n_layers=cache.n_layers,
        feat_dim=cache.feat_dim,
        tau=cache.tau,
        fingerprint=cache.fingerprint,
        built_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
        utt_ids=utt_ids,
        speaker_ids=speaker_ids,
        short_paths=short_paths,
        vectors=vectors,
    )
    return store, report


def speaker_consistency(result: QueryResult, query_speaker: str) -> list[float | None]:
    """Per-layer fraction of hits from the query's speaker; None when empty."""
    fractions: list[float | None] = []
    for hits in result.hits:
        if not hits:
            fractions.append(None)
        else:
            same = sum(1 for h in hits if h.speaker_id == query_speaker)
            fractions.append(same / len(hits))
    return fractions


def persist_stores(store: StoreSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = (
        f"n_layers={store.n_layers}\nfeat_dim={store.feat_dim}\ntau={store.tau}\n"
        f"fingerprint={store.fingerprint}\nbuilt_at={store.built_at}\ncount={store.count}\n"
    )
    (directory / "meta.txt").write_text(meta, encoding="utf-8")
    lines = [
        f"{i}\t{u}\t{s}\t{p}"
        for i, (u, s, p) in enumerate(zip(store.utt_ids, store.speaker_ids, store.short_paths))
    ]
    (directory / "records.tsv").write_text(
        ("\n".join(lines) + "\n") if lines else "", encoding="utf-8"
    )
    for layer, vectors in enumerate(store.vectors):
        raw = np.ascontiguousarray(vectors, dtype="<f4").tobytes()
        header = _LAYER_HEADER.pack(_LAYER_MAGIC, 1, vectors.shape[0], vectors.shape[1])
        payload = header + raw + struct.pack("<I", zlib.crc32(raw))
        (directory / f"layer{layer:02d}.vec").write_bytes(payload)


def _read_layer_file(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < _LAYER_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, dim = _LAYER_HEADER.unpack_from(blob)
    if magic != _LAYER_MAGIC or version != 1:
        raise FormatError(f"{path}: bad magic or version")
    body = blob[_LAYER_HEADER.size:]
    if len(body) != n * dim * 4 + 4:
        raise FormatError(f"{path}: payload length mismatch")
    raw, (crc,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(raw) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()


def load_stores(directory, expected_fingerprint: str | None = None) -> StoreSet:
    """Load a persisted StoreSet; optionally enforce the encoder fingerprint."""
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise FileNotFoundError(f"no store at {directory}")
    meta = dict(line.split("=", 1) for line in meta_path.read_text().splitlines() if line)
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise IncompatibilityError(
            f"store fingerprint {meta['fingerprint']} != expected {expected_fingerprint}"
        )
    n_layers = int(meta["n_layers"])
    utt_ids, speaker_ids, short_paths = [], [], []
    records_text = (directory / "records.tsv").read_text(encoding="utf-8")
    for line in records_text.splitlines():
        if line:
            _, utt, speaker, path = line.split("\t")
            utt_ids.append(utt)
            speaker_ids.append(speaker)
            short_paths.append(path)
    vectors = [_read_layer_file(directory / f"layer{l:02d}.vec") for l in range(n_layers)]
    for v in vectors:
        if v.shape[0] != len(utt_ids):
            raise FormatError(f"{directory}: layer count {v.shape[0]} != records {len(utt_ids)}")
    return StoreSet(
        n_layers=n_layers,
        feat_dim=int(meta["feat_dim"]),
        tau=int(meta["tau"]),
        fingerprint=meta["fingerprint"],
        built_at=meta["built_at"],
        utt_ids=utt_ids,
        speaker_ids=speaker_ids,
        short_paths=short_paths,
        vectors=vectors,
    )
