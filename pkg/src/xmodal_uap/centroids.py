"""Per-identity per-modality feature centroids and negative selection.

Centroids are arithmetic means of clean embeddings, computed once from the
unperturbed dataset and kept fixed for the whole attack. Grayscale centroids
come from grayscaled Visible images. Means are intentionally not re-projected
onto the unit sphere: the attack loss measures plain L2 distances in the
ambient feature space.
"""

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import SeededRng
from .embedder import EmbedderParams, forward_batch
from .errors import LookupFailure, SelectionError
from .serialization import (
    bytes_to_floats,
    floats_to_bytes,
    read_artifact,
    write_artifact,
)
from .synthdata import Dataset, Modality, grayscale


class NegativeStrategy(Enum):
    FARTHEST = "farthest"
    NEAREST = "nearest"
    RANDOM = "random"


@dataclass
class CentroidTable:
    entries: dict  # (identity_id, Modality) -> feature vector (float64)
    model_fingerprint: str
    dataset_fingerprint: str

    def get(self, identity_id: int, modality: Modality) -> np.ndarray:
        key = (identity_id, modality)
        if key not in self.entries:
            raise LookupFailure(
                f"no centroid for identity {identity_id} in modality "
                f"{modality.value}"
            )
        return self.entries[key]

    def identities(self, modality: Modality):
        return sorted(i for (i, m) in self.entries if m is modality)


def compute_centroids(p: EmbedderParams, ds: Dataset) -> CentroidTable:
    """Mean clean embedding per (identity, modality), plus Grayscale entries
    derived from every Visible record."""
    groups = {}
    for rec in ds.records:
        feat, _ = forward_batch(p, rec.pixels.reshape(1, -1))
        groups.setdefault((rec.identity_id, rec.modality), []).append(feat[0])
        if rec.modality is Modality.VISIBLE:
            gfeat, _ = forward_batch(p, grayscale(rec).pixels.reshape(1, -1))
            groups.setdefault((rec.identity_id, Modality.GRAYSCALE), []).append(
                gfeat[0]
            )
    entries = {}
    for key, feats in groups.items():
        if not feats:
            warnings.warn(f"empty centroid group {key}, skipped")
            continue
        entries[key] = np.mean(feats, axis=0)
    return CentroidTable(
        entries=entries,
        model_fingerprint=p.fingerprint(),
        dataset_fingerprint=ds.fingerprint(),
    )


def positive_centroid(t: CentroidTable, identity_id: int,
                      modality: Modality) -> np.ndarray:
    """Centroid of the anchor's own identity in the given modality."""
    return t.get(identity_id, modality)


def negative_centroid(t: CentroidTable, anchor_feature: np.ndarray,
                      anchor_id: int, modality: Modality,
                      strategy: NegativeStrategy = NegativeStrategy.FARTHEST,
                      rng: SeededRng = None) -> np.ndarray:
    """Pick another identity's centroid in `modality` relative to the anchor.

    Farthest maximizes L2 distance to the anchor feature, Nearest minimizes
    it, Random draws uniformly (needs rng). Ties break toward the smallest
    identity id.
    """
    candidates = [i for i in t.identities(modality) if i != anchor_id]
    if not candidates:
        raise SelectionError(
            f"no identity other than {anchor_id} has a centroid in "
            f"modality {modality.value}"
        )
    anchor = np.asarray(anchor_feature, dtype=np.float64)
    if strategy is NegativeStrategy.RANDOM:
        if rng is None:
            raise SelectionError("Random negative strategy needs an rng")
        return t.get(candidates[int(rng.integers(0, len(candidates)))], modality)
    dists = np.array(
        [np.linalg.norm(t.get(i, modality) - anchor) for i in candidates]
    )
    # argmax/argmin return the first extreme; candidates are sorted by id,
    # so ties already resolve to the smallest identity.
    if strategy is NegativeStrategy.FARTHEST:
        pick = int(np.argmax(dists))
    else:
        pick = int(np.argmin(dists))
    return t.get(candidates[pick], modality)


def save_centroids(t: CentroidTable, path: str, extra_header: dict = None) -> None:
    keys = sorted(t.entries, key=lambda k: (k[0], k[1].value))
    dim = len(next(iter(t.entries.values()))) if keys else 0
    blob = b"".join(floats_to_bytes(t.entries[k]) for k in keys)
    header = {
        "model_fingerprint": t.model_fingerprint,
        "dataset_fingerprint": t.dataset_fingerprint,
        "feature_dim": dim,
        "entries": ";".join(f"{k[0]},{k[1].value}" for k in keys),
    }
    header.update(extra_header or {})
    write_artifact(path, "centroids", header, blob)


def load_centroids(path: str) -> CentroidTable:
    header, blob = read_artifact(path, "centroids")
    dim = int(header["feature_dim"])
    keys = []
    if header.get("entries"):
        by_value = {m.value: m for m in Modality}
        for item in header["entries"].split(";"):
            ident, modality = item.split(",")
            keys.append((int(ident), by_value[modality]))
    floats = bytes_to_floats(blob, dim * len(keys))
    entries = {
        key: floats[i * dim:(i + 1) * dim] for i, key in enumerate(keys)
    }
    return CentroidTable(
        entries=entries,
        model_fingerprint=header.get("model_fingerprint", ""),
        dataset_fingerprint=header.get("dataset_fingerprint", ""),
    )
