"""Representation probes: k-means units, PNMI, RFS, MRS and layer orthogonality."""

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch

from .errors import DataError


@dataclass
class SimilarityStats:
    mean: float
    std: float
    per_frame: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def n_frames(self) -> int:
        return int(self.per_frame.size)

    @classmethod
    def from_frames(cls, per_frame) -> "SimilarityStats":
        per_frame = np.concatenate([np.ravel(p) for p in per_frame]) if isinstance(per_frame, list) \
            else np.ravel(per_frame)
        if per_frame.size == 0:
            raise DataError("no frames to aggregate")
        return cls(float(per_frame.mean()), float(per_frame.std()), per_frame)

    def report(self, metric: str, config: Optional[dict] = None) -> dict:
        return {
            "metric": metric,
            "mean": self.mean,
            "std": self.std,
            "n_frames": self.n_frames,
            "config_hash": config_hash(config or {}),
        }


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise DataError("expected a single utterance [T, D]")
        x = x[0]
    return x


def frame_cosine(a, b) -> np.ndarray:
    a, b = _as_numpy(a), _as_numpy(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DataError("zero-norm frame in cosine similarity")
    return np.sum(a * b, axis=-1) / (na * nb)


# --- k-means -----------------------------------------------------------------

@dataclass
class Codebook:
    centroids: np.ndarray
    inertia_history: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def assign(self, x) -> np.ndarray:
        return _nearest(_as_numpy(x), self.centroids)[0]

    def inertia(self, x) -> float:
        return float(_nearest(_as_numpy(x), self.centroids)[1].sum())


def _nearest(x, centroids, chunk=4096):
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    c2 = np.sum(centroids ** 2, axis=1)
    for s in range(0, len(x), chunk):
        xs = x[s:s + chunk]
        d = np.sum(xs ** 2, axis=1, keepdims=True) - 2 * xs @ centroids.T + c2
        labels[s:s + chunk] = np.argmin(d, axis=1)
        dists[s:s + chunk] = np.maximum(d[np.arange(len(xs)), labels[s:s + chunk]], 0.0)
    return labels, dists


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k; remaining picks are duplicates
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans_fit(features, k: int, rng: Optional[np.random.Generator] = None,
               max_iters: int = 100, tol: float = 1e-6) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    ``features`` is an [N, D] array or a list of per-utterance [T, D] arrays.
    Empty clusters are re-seeded at the point farthest from its centroid.
    """
    if isinstance(features, (list, tuple)):
        x = np.concatenate([_as_numpy(f) for f in features])
    else:
        x = _as_numpy(features)
    if k < 2:
        raise DataError("k must be >= 2")
    if len(x) < k:
        raise DataError(f"{len(x)} frames is fewer than k={k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    centroids = _kmeans_pp(x, k, rng)
    history = []
    for _ in range(max_iters):
        labels, dists = _nearest(x, centroids)
        history.append(float(dists.sum()))
        new = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, x)
        empty = counts == 0
        new[~empty] /= counts[~empty, None]
        new[empty] = centroids[empty]
        for j in np.flatnonzero(empty):
            far = int(np.argmax(dists))
            new[j] = x[far]
            dists[far] = 0.0
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    history.append(float(_nearest(x, centroids)[1].sum()))
    return Codebook(centroids, history)


# --- PNMI --------------------------------------------------------------------

def contingency_table(phones: Sequence, units: Sequence, n_phones: Optional[int] = None,
                      n_units: Optional[int] = None) -> np.ndarray:
    """Counts of (phone, unit) co-occurrences; inputs are per-frame int sequences."""
    phones = np.concatenate([np.ravel(p) for p in phones]) if _is_nested(phones) else np.ravel(phones)
    units = np.concatenate([np.ravel(u) for u in units]) if _is_nested(units) else np.ravel(units)
    if phones.shape != units.shape:
        raise DataError(f"{phones.size} phone labels vs {units.size} unit labels")
    n_phones = n_phones or int(phones.max()) + 1
    n_units = n_units or int(units.max()) + 1
    table = np.zeros((n_phones, n_units), dtype=np.int64)
    np.add.at(table, (phones.astype(np.int64), units.astype(np.int64)), 1)
    return table


def _is_nested(x):
    return isinstance(x, (list, tuple)) and len(x) > 0 and np.ndim(x[0]) > 0


def pnmi(table) -> float:
    """I(phone; unit) / H(phone) from a [n_phones, n_units] count table (natural log)."""
    counts = np.asarray(table, dtype=np.float64)
    if counts.ndim != 2 or np.any(counts < 0):
        raise DataError("contingency table must be a non-negative 2-D array")
    total = counts.sum()
    if total < 1:
        raise DataError("empty contingency table")
    p = counts / total
    p_phone = p.sum(axis=1)
    p_unit = p.sum(axis=0)
    if np.count_nonzero(p_phone) < 2:
        raise DataError("phone entropy is zero; need at least two distinct phones")
    nz = p > 0
    outer = np.outer(p_phone, p_unit)
    mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))
    h_phone = float(-np.sum(p_phone[p_phone > 0] * np.log(p_phone[p_phone > 0])))
    return min(max(mi / h_phone, 0.0), 1.0)


# --- cosine probes -----------------------------------------------------------

def rfs(model_out, teacher_out) -> SimilarityStats:
    """Frame-wise cosine between a model's and the teacher's clean-speech features.

    Accepts one [T, D] pair or parallel lists of them (frame-weighted pooling).
    """
    if isinstance(model_out, (list, tuple)):
        return SimilarityStats.from_frames(
            [frame_cosine(m, t) for m, t in zip(model_out, teacher_out, strict=True)])
    return SimilarityStats.from_frames(frame_cosine(model_out, teacher_out))


def layer_orthogonality(acts, layer_a: int, layer_b: int) -> SimilarityStats:
    """Cosine between two layers of the same forward pass(es)."""
    acts_list = acts if isinstance(acts, (list, tuple)) else [acts]
    frames = []
    for a in acts_list:
        n = len(a.layers) - 1
        for idx in (layer_a, layer_b):
            if not 0 <= idx <= n:
                raise DataError(f"layer {idx} outside 0..{n}")
        la, lb = a.layers[layer_a], a.layers[layer_b]
        for i in range(la.shape[0]):
            frames.append(frame_cosine(la[i], lb[i]))
    return SimilarityStats.from_frames(frames)


def masked_similarity(masked_out, clean_out, mask) -> np.ndarray:
    """Per-frame cosine restricted to masked frames."""
    masked_out, clean_out = _as_numpy(masked_out), _as_numpy(clean_out)
    idx = mask.masked_frame_indices if hasattr(mask, "masked_frame_indices") else np.asarray(mask)
    if len(idx) == 0:
        raise DataError("empty mask: masked reconstruction score is undefined")
    return frame_cosine(masked_out[idx], clean_out[idx])


@torch.no_grad()
def mrs(encoder, clean, mask, layer: Optional[int] = None) -> SimilarityStats:
    """Masked reconstruction score of ``encoder`` on clean waveform(s).

    The clean input is encoded with and without mask embeddings on the CNN
    output; final-layer frames at the masked indices are compared.
    ``clean``/``mask`` may be parallel lists for several utterances.
    """
    if isinstance(clean, (list, tuple)):
        return SimilarityStats.from_frames(
            [mrs(encoder, c, m, layer).per_frame for c, m in zip(clean, mask, strict=True)])
    if len(mask) == 0:
        raise DataError("empty mask: masked reconstruction score is undefined")
    wav = torch.as_tensor(np.asarray(clean), dtype=torch.float32)
    layer = encoder.cfg.n_layers if layer is None else layer
    was_training = encoder.training
    encoder.eval()
    try:
        ref = encoder(wav).layers[layer]
        out = encoder(wav, mask=mask).layers[layer]
    finally:
        encoder.train(was_training)
    return SimilarityStats.from_frames(masked_similarity(out, ref, mask))


# --- synthetic alignments for tests and demos ----------------------------------

def synthetic_alignment(n_frames: int, n_phones: int, rng: np.random.Generator,
                        min_dur: int = 2, max_dur: int = 8) -> np.ndarray:
    """Piecewise-constant frame-level phone ids with random segment durations."""
    out = np.empty(n_frames, dtype=np.int64)
    pos = 0
    while pos < n_frames:
        dur = int(rng.integers(min_dur, max_dur + 1))
        out[pos:pos + dur] = rng.integers(n_phones)
        pos += dur
    return out


def read_alignments(path: str) -> dict:
    """Alignment manifest: JSON lines ``{"id": ..., "phones": [int, ...]}`` at 50 Hz.

    An optional first line ``{"phone_names": [...]}`` carries the id table.
    """
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "phone_names" in row and "id" not in row:
                out["__phone_names__"] = row["phone_names"]
                continue
            out[row["id"]] = np.asarray(row["phones"], dtype=np.int64)
    return out
