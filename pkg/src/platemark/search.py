"""Similar-plate search over latent feature vectors, plus the run-to-run
consistency measurement used to evaluate how stable those vectors are.

The index is an exact linear scan over unit-normalized feature vectors with
cosine distance; at the corpus sizes involved this is fast, trivially correct,
and easy to cross-check against a brute-force oracle.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, replace

import numpy as np

from platemark.dataset import SplitDataset, sample_plate
from platemark.model import Model, ModelConfig, PersistenceError, model_fingerprint
from platemark.plates import Plate, encode_plate
from platemark.training import RunRecord, TrainConfig, derive_seed, mann_whitney, train

INDEX_MAGIC = b"PMIX"
INDEX_VERSION = 1


@dataclass
class LatentIndex:
    fingerprint: bytes  # sha-256 of the owning model's weights
    plates: list[str]  # canonical plate strings, unique
    vectors: np.ndarray  # (n, F) float32, unit L2 rows

    def __post_init__(self):
        if len(self.plates) != self.vectors.shape[0]:
            raise ValueError("one vector per plate required")
        self._positions = {p: i for i, p in enumerate(self.plates)}
        if len(self._positions) != len(self.plates):
            raise ValueError("duplicate plate in index")
        self._rank = np.empty(len(self.plates), dtype=np.int64)
        for rank, idx in enumerate(sorted(range(len(self.plates)), key=lambda i: self.plates[i])):
            self._rank[idx] = rank
        # distances run in float64 on exactly-unit rows; the float32 matrix is
        # what persists
        as64 = self.vectors.astype(np.float64)
        self._unit64 = as64 / np.linalg.norm(as64, axis=1, keepdims=True)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def position(self, canonical: str) -> int | None:
        return self._positions.get(canonical)


def embed_plates(model: Model, plates: list[Plate], aux_reference: np.ndarray | None = None,
                 chunk: int = 1024) -> np.ndarray:
    """Unit-normalized feature vectors for `plates` under a fixed reference
    market input (the latent features themselves do not depend on it)."""
    if aux_reference is None:
        aux_reference = np.zeros(7)
    tokens = np.stack([encode_plate(p) for p in plates])
    feats = np.empty((len(plates), model.config.feature_dim))
    for lo in range(0, len(plates), chunk):
        hi = lo + chunk
        aux = np.repeat(aux_reference[None, :], tokens[lo:hi].shape[0], axis=0)
        feats[lo:hi] = model.forward(tokens[lo:hi], aux, train=False).features
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms < 1e-12):
        raise FloatingPointError("zero-norm feature vector cannot be unit-normalized")
    return feats / norms[:, None]


def build_index(model: Model, plates: list[Plate], aux_reference: np.ndarray | None = None) -> LatentIndex:
    """Index the plate universe; rebuilding with the same model reproduces
    every vector bit-for-bit."""
    canonical = [p.canonical() for p in plates]
    if len(set(canonical)) != len(canonical):
        raise ValueError("duplicate plate in universe")
    unit = embed_plates(model, plates, aux_reference)
    return LatentIndex(
        fingerprint=model_fingerprint(model),
        plates=canonical,
        vectors=unit.astype(np.float32),
    )


def query_vector(index: LatentIndex, vector: np.ndarray, k: int, exclude: str | None = None):
    """k nearest entries by cosine distance, ascending; exact ties break by
    canonical plate order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    unit = np.asarray(vector, dtype=np.float64)
    unit = unit / np.linalg.norm(unit)
    dist = 1.0 - index._unit64 @ unit
    mask = np.ones(dist.shape[0], dtype=bool)
    if exclude is not None:
        pos = index.position(exclude)
        if pos is not None:
            mask[pos] = False
    cand = np.flatnonzero(mask)
    if cand.size < k:
        warnings.warn(f"k={k} exceeds the {cand.size} available entries; returning all")
    order = np.lexsort((index._rank[cand], dist[cand]))
    picked = cand[order][:k]
    return [(index.plates[i], float(dist[i])) for i in picked]


def query(index: LatentIndex, plate: Plate, k: int, model: Model | None = None,
          aux_reference: np.ndarray | None = None):
    """Nearest neighbors of a plate; the plate itself never appears in the
    results. Plates outside the index need the model to embed them."""
    canonical = plate.canonical()
    pos = index.position(canonical)
    if pos is not None:
        vec = index._unit64[pos]
    elif model is not None:
        vec = embed_plates(model, [plate], aux_reference)[0]
    else:
        raise ValueError(f"plate {canonical} not in index and no model given")
    return query_vector(index, vec, k, exclude=canonical)


# ---------------------------------------------------------------------------
# Consistency across training runs
# ---------------------------------------------------------------------------


def consistency(results_per_run: list[list[str]]) -> float:
    """Fraction of top-k results shared by every run: |intersection| / k."""
    if len(results_per_run) < 2:
        raise ValueError("need at least two runs")
    sizes = {len(r) for r in results_per_run}
    if len(sizes) != 1:
        raise ValueError("runs must use the same k")
    k = sizes.pop()
    shared = set(results_per_run[0])
    for run in results_per_run[1:]:
        shared &= set(run)
    return len(shared) / k


@dataclass
class ConsistencyReport:
    with_aux: bool
    fractions: np.ndarray  # (n_queries,) per-query consistency
    median: float
    run_records: list[RunRecord]


def consistency_experiment(
    model_cfg: ModelConfig,
    data: SplitDataset,
    train_cfg: TrainConfig,
    runs: int = 3,
    n_queries: int = 1000,
    k: int = 10,
    with_aux: bool = True,
    universe: list[Plate] | None = None,
    seed: int = 0,
) -> ConsistencyReport:
    """Train `runs` independent models and measure search-result overlap.

    `with_aux=False` keeps the characteristic head (and so the parameter
    count) but trains all 32 of its outputs toward the log price instead.
    Queries are freshly sampled plates absent from the data.
    """
    if runs < 2:
        raise ValueError("consistency needs at least two runs")
    aux_mode = "features" if with_aux else "price"
    base_cfg = replace(model_cfg, aux_targets=aux_mode)

    known = {e.plate.canonical() for split in ("train", "valid", "test") for e in data.split(split)}
    if universe is None:
        seen = {}
        for split in ("train", "valid", "test"):
            for e in data.split(split):
                seen.setdefault(e.plate.canonical(), e.plate)
        universe = [seen[key] for key in sorted(seen)]

    rng = np.random.default_rng(seed)
    queries: list[Plate] = []
    picked = set()
    while len(queries) < n_queries:
        plate = sample_plate(rng)
        name = plate.canonical()
        if name in known or name in picked:
            continue
        picked.add(name)
        queries.append(plate)

    per_run_results: list[list[list[str]]] = []
    records = []
    for run in range(runs):
        run_seed = derive_seed(seed, 1 if with_aux else 0, run)
        model = Model(replace(base_cfg, seed=run_seed))
        model, record = train(model, data, replace(train_cfg, seed=run_seed))
        records.append(record)
        index = build_index(model, universe)
        run_results = []
        for plate in queries:
            hits = query(index, plate, k, model=model)
            run_results.append([name for name, _ in hits])
        per_run_results.append(run_results)

    fractions = np.array(
        [consistency([per_run_results[r][q] for r in range(runs)]) for q in range(n_queries)]
    )
    return ConsistencyReport(
        with_aux=with_aux,
        fractions=fractions,
        median=float(np.median(fractions)),
        run_records=records,
    )


def consistency_comparison(model_cfg, data, train_cfg, runs=3, n_queries=1000, k=10, seed=0):
    """Both variants plus the rank test between their per-query fractions."""
    with_aux = consistency_experiment(
        model_cfg, data, train_cfg, runs, n_queries, k, with_aux=True, seed=seed
    )
    without = consistency_experiment(
        model_cfg, data, train_cfg, runs, n_queries, k, with_aux=False, seed=seed
    )
    z, p = mann_whitney(with_aux.fractions, without.fractions)
    return with_aux, without, z, p


# ---------------------------------------------------------------------------
# Persistence: PMIX container
# ---------------------------------------------------------------------------


def save_index(index: LatentIndex, path) -> None:
    payload = bytearray()
    payload += INDEX_MAGIC
    payload += struct.pack("<B", INDEX_VERSION)
    payload += index.fingerprint
    payload += struct.pack("<II", len(index.plates), index.dim)
    for name, row in zip(index.plates, index.vectors):
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded)) + encoded
        payload += row.astype("<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(payload)


def load_index(path) -> LatentIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 49 or blob[:4] != INDEX_MAGIC:
        raise PersistenceError("bad index magic bytes")
    if zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
        raise PersistenceError("index checksum mismatch")
    if blob[4] != INDEX_VERSION:
        raise PersistenceError(f"unsupported index version {blob[4]}")
    pos = 5
    fingerprint = blob[pos : pos + 32]
    pos += 32
    count, dim = struct.unpack_from("<II", blob, pos)
    pos += 8
    plates = []
    vectors = np.empty((count, dim), dtype=np.float32)
    end = len(blob) - 4
    for i in range(count):
        if pos + 4 > end:
            raise PersistenceError("truncated index file")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + name_len + 4 * dim > end:
            raise PersistenceError("truncated index file")
        plates.append(blob[pos : pos + name_len].decode("utf-8"))
        pos += name_len
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
    if pos != end:
        raise PersistenceError("trailing bytes in index file")
    return LatentIndex(fingerprint=fingerprint, plates=plates, vectors=vectors)
