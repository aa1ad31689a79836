"""Cross-modality retrieval metrics: CMC (rank-k) and mAP.

Two implementations of the same contract live here. `evaluate` is the fast
vectorized path used by the pipeline; `brute_force_report` recomputes every
ranking with naive per-query loops and must agree with `evaluate` exactly.
Both rank galleries by ascending L2 feature distance (compared as squared
distances in double precision) with ties broken by gallery index, and both
average per-query AP with exactly-rounded summation so the report does not
depend on query order.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .embedder import EmbedderParams, forward, forward_batch
from .errors import ArgumentError, EvaluationError
from .synthdata import ImageRecord

CMC_RANKS = (1, 10, 20)


@dataclass
class RankingResult:
    query_identity: int
    gallery_order: np.ndarray   # gallery indices, best match first
    distances: np.ndarray       # squared L2 distances in gallery_order


@dataclass
class EvalReport:
    direction: str
    rank1: float
    rank10: float
    rank20: float
    mean_ap: float
    num_queries: int
    num_gallery: int
    perturbation_fingerprint: str = "clean"

    def as_mapping(self) -> dict:
        return {
            "direction": self.direction,
            "rank1": self.rank1,
            "rank10": self.rank10,
            "rank20": self.rank20,
            "mAP": self.mean_ap,
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
            "perturbation": self.perturbation_fingerprint,
        }


def rank_gallery(p: EmbedderParams, query: ImageRecord,
                 gallery: list) -> RankingResult:
    """Rank one gallery against one query by ascending feature distance."""
    if not gallery:
        raise ArgumentError("gallery must be nonempty")
    qf = forward(p, query.pixels)
    gf, _ = forward_batch(
        p, np.stack([g.pixels.reshape(-1) for g in gallery])
    )
    d2 = ((gf - qf[None, :]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return RankingResult(
        query_identity=query.identity_id,
        gallery_order=order,
        distances=d2[order],
    )


def _apply_to_rows(rows: np.ndarray, pert) -> np.ndarray:
    return np.clip(rows + pert.eta.reshape(-1)[None, :], 0.0, 255.0)


def _average_precision(hit_ranks) -> float:
    """AP = mean over the i-th positive (1-based) of i / rank_i."""
    ap = 0.0
    for i, rank in enumerate(hit_ranks, start=1):
        ap += i / rank
    return ap / len(hit_ranks)


def _check_coverage(queries, gallery):
    gallery_ids = {g.identity_id for g in gallery}
    for q in queries:
        if q.identity_id not in gallery_ids:
            raise EvaluationError(
                f"query identity {q.identity_id} has no gallery record"
            )


def evaluate(p: EmbedderParams, queries: list, gallery: list,
             pert=None, direction: str = "") -> EvalReport:
    """Vectorized CMC/mAP over all queries.

    If a perturbation is given it is added to every query (never to the
    gallery) with pixel-range clipping before embedding.
    """
    if not queries or not gallery:
        raise ArgumentError("queries and gallery must both be nonempty")
    _check_coverage(queries, gallery)
    q_rows = np.stack([q.pixels.reshape(-1) for q in queries])
    if pert is not None:
        if pert.eta.size != q_rows.shape[1]:
            raise ArgumentError(
                f"perturbation has {pert.eta.size} elements, query images "
                f"have {q_rows.shape[1]}"
            )
        q_rows = _apply_to_rows(q_rows, pert)
    qf, _ = forward_batch(p, q_rows)
    gf, _ = forward_batch(p, np.stack([g.pixels.reshape(-1) for g in gallery]))
    qid = np.array([q.identity_id for q in queries])
    gid = np.array([g.identity_id for g in gallery])

    d2 = ((qf[:, None, :] - gf[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    ranked_ids = gid[order]
    match = ranked_ids == qid[:, None]

    hits = {k: 0 for k in CMC_RANKS}
    aps = []
    for row in range(len(queries)):
        positives = np.where(match[row])[0]
        for k in CMC_RANKS:
            if positives.size and positives[0] < k:
                hits[k] += 1
        aps.append(_average_precision([int(pos) + 1 for pos in positives]))
    n = len(queries)
    return EvalReport(
        direction=direction,
        rank1=100.0 * hits[1] / n,
        rank10=100.0 * hits[10] / n,
        rank20=100.0 * hits[20] / n,
        mean_ap=100.0 * math.fsum(aps) / n,
        num_queries=n,
        num_gallery=len(gallery),
        perturbation_fingerprint=(
            "clean" if pert is None else pert.fingerprint()
        ),
    )


def brute_force_report(p: EmbedderParams, queries: list, gallery: list,
                       pert=None, direction: str = "") -> EvalReport:
    """Independent oracle: naive loops, one query at a time.

    Shares no ranking code with `evaluate`; uses the same tie rule (stable
    sort by gallery index) and double-precision squared distances.
    """
    if not queries or not gallery:
        raise ArgumentError("queries and gallery must both be nonempty")
    _check_coverage(queries, gallery)
    gallery_feats = []
    for g in gallery:
        gallery_feats.append(forward(p, g.pixels))
    hits = {k: 0 for k in CMC_RANKS}
    aps = []
    for q in queries:
        pixels = q.pixels
        if pert is not None:
            if pert.eta.shape != pixels.shape:
                raise ArgumentError(
                    f"perturbation shape {pert.eta.shape} does not match "
                    f"query shape {pixels.shape}"
                )
            pixels = np.minimum(np.maximum(pixels + pert.eta, 0.0), 255.0)
        qf = forward(p, pixels)
        scored = []
        for idx, gf in enumerate(gallery_feats):
            diff = gf - qf
            scored.append((float(diff @ diff), idx))
        scored.sort()  # (distance, gallery index): ties resolve by index
        hit_ranks = []
        for rank, (_, idx) in enumerate(scored, start=1):
            if gallery[idx].identity_id == q.identity_id:
                hit_ranks.append(rank)
        for k in CMC_RANKS:
            if hit_ranks and hit_ranks[0] <= k:
                hits[k] += 1
        aps.append(_average_precision(hit_ranks))
    n = len(queries)
    return EvalReport(
        direction=direction,
        rank1=100.0 * hits[1] / n,
        rank10=100.0 * hits[10] / n,
        rank20=100.0 * hits[20] / n,
        mean_ap=100.0 * math.fsum(aps) / n,
        num_queries=n,
        num_gallery=len(gallery),
        perturbation_fingerprint=(
            "clean" if pert is None else pert.fingerprint()
        ),
    )


def compare(clean: EvalReport, attacked: EvalReport) -> dict:
    """Absolute and relative metric drops between a clean and attacked run."""
    if clean.direction != attacked.direction:
        raise ArgumentError(
            f"direction mismatch: {clean.direction} vs {attacked.direction}"
        )
    if clean.num_gallery != attacked.num_gallery:
        raise ArgumentError(
            f"gallery size mismatch: {clean.num_gallery} vs "
            f"{attacked.num_gallery}"
        )
    out = {}
    for metric in ("rank1", "rank10", "rank20", "mean_ap"):
        before = getattr(clean, metric)
        after = getattr(attacked, metric)
        out[f"{metric}_drop"] = before - after
        out[f"{metric}_rel_drop"] = (
            (before - after) / before if before > 0 else 0.0
        )
    return out


# ---------------------------------------------------------------------------
# Report files: CSV for plotting plus a key-value text mirror.

CSV_COLUMNS = ("method", "direction", "rank1", "rank10", "rank20", "mAP",
               "epsilon", "seed")


def report_row(method: str, report: EvalReport, epsilon, seed) -> dict:
    return {
        "method": method,
        "direction": report.direction,
        "rank1": f"{report.rank1:.6f}",
        "rank10": f"{report.rank10:.6f}",
        "rank20": f"{report.rank20:.6f}",
        "mAP": f"{report.mean_ap:.6f}",
        "epsilon": epsilon,
        "seed": seed,
    }


def write_report_csv(path: str, rows: list, config_hash: str = "") -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="ascii") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp, path)


def read_report_csv(path: str) -> list:
    with open(path, "r", newline="", encoding="ascii") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_report_text(path: str, rows: list, config_hash: str = "",
                      extra: dict = None) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("#xmodal-report v1\n")
        if config_hash:
            fh.write(f"config_hash: {config_hash}\n")
        for key, value in (extra or {}).items():
            fh.write(f"{key}: {value}\n")
        for i, row in enumerate(rows):
            for col in CSV_COLUMNS:
                fh.write(f"row{i}.{col}: {row[col]}\n")
    os.replace(tmp, path)
