"""Small hand-differentiated embedding network and its benign training loop.

Architecture (fixed): flatten -> linear(in->128) -> ReLU -> linear(128->32)
-> L2-normalize, with pixels scaled to [0, 1] (divide by 255) before the
first layer. Parameters are stored as float32 so checkpoints round-trip
bit-exactly; all forward/backward arithmetic runs in float64 so gradient
checks are limited by the math, not the storage precision.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import SeededRng
from .errors import ArgumentError, StorageError
from .serialization import (
    bytes_to_floats,
    fingerprint_bytes,
    floats_to_bytes,
    read_artifact,
    write_artifact,
)

HIDDEN_DIM = 128
EMBEDDING_DIM = 32
NORM_FLOOR = 1e-12


@dataclass
class EmbedderParams:
    w1: np.ndarray  # (hidden, in) float32
    b1: np.ndarray  # (hidden,) float32
    w2: np.ndarray  # (out, hidden) float32
    b2: np.ndarray  # (out,) float32
    input_shape: tuple
    train_losses: list = field(default=None, repr=False, compare=False)

    @property
    def embedding_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    def blob(self) -> bytes:
        return b"".join(
            floats_to_bytes(a) for a in (self.w1, self.b1, self.w2, self.b2)
        )

    def fingerprint(self) -> str:
        shape_tag = ",".join(str(s) for s in self.input_shape)
        return fingerprint_bytes(self.blob() + shape_tag.encode("ascii"))


def init_params(input_shape: tuple, seed: int,
                hidden_dim: int = HIDDEN_DIM,
                embedding_dim: int = EMBEDDING_DIM) -> EmbedderParams:
    """Gaussian fan-in init, float32, biases zero."""
    rng = SeededRng(seed).split("embedder-init")
    return _init_from(rng, input_shape, hidden_dim, embedding_dim)


def _init_from(rng: SeededRng, input_shape, hidden_dim, embedding_dim):
    din = int(np.prod(input_shape))
    w1 = (rng.normal(size=(hidden_dim, din)) / np.sqrt(din)).astype(np.float32)
    b1 = np.zeros(hidden_dim, dtype=np.float32)
    w2 = (rng.normal(size=(embedding_dim, hidden_dim)) / np.sqrt(hidden_dim)).astype(
        np.float32
    )
    b2 = np.zeros(embedding_dim, dtype=np.float32)
    return EmbedderParams(w1, b1, w2, b2, tuple(input_shape))


def forward_batch(p: EmbedderParams, x_rows: np.ndarray):
    """Embed a (B, din) batch of flattened images on the 0..255 scale.

    Returns (features (B, out) with unit rows, cache for the backward pass).
    """
    x = np.asarray(x_rows, dtype=np.float64) / 255.0
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise ArgumentError(
            f"expected a (B, {p.input_dim}) batch, got shape {x.shape}"
        )
    z1 = x @ p.w1.T.astype(np.float64) + p.b1.astype(np.float64)
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ p.w2.T.astype(np.float64) + p.b2.astype(np.float64)
    norms = np.maximum(np.linalg.norm(z2, axis=1), NORM_FLOOR)
    y = z2 / norms[:, None]
    return y, (x, z1, a1, z2, norms, y)


def forward(p: EmbedderParams, img: np.ndarray) -> np.ndarray:
    """Embed one (C, H, W) image into a unit-norm feature vector."""
    img = np.asarray(img)
    if img.shape != tuple(p.input_shape):
        raise ArgumentError(
            f"image shape {img.shape} does not match model input "
            f"shape {tuple(p.input_shape)}"
        )
    y, _ = forward_batch(p, img.reshape(1, -1))
    return y[0]


def backward_params(p: EmbedderParams, cache, d_y: np.ndarray):
    """Gradients of <d_y, forward(x)> w.r.t. parameters."""
    x, z1, a1, _z2, norms, y = cache
    dz2 = (d_y - (d_y * y).sum(axis=1, keepdims=True) * y) / norms[:, None]
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ p.w2.astype(np.float64)
    dz1 = da1 * (z1 > 0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return dw1, db1, dw2, db2


def input_gradient_batch(p: EmbedderParams, cache, d_y: np.ndarray) -> np.ndarray:
    """Gradients of <d_y, forward(x)> w.r.t. the raw 0..255 pixel rows."""
    x, z1, _a1, _z2, norms, y = cache
    dz2 = (d_y - (d_y * y).sum(axis=1, keepdims=True) * y) / norms[:, None]
    da1 = dz2 @ p.w2.astype(np.float64)
    dz1 = da1 * (z1 > 0)
    dx = dz1 @ p.w1.astype(np.float64)
    return dx / 255.0


def input_gradient(p: EmbedderParams, img: np.ndarray,
                   upstream: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of <upstream, forward(p, img)> w.r.t. img."""
    img = np.asarray(img)
    if img.shape != tuple(p.input_shape):
        raise ArgumentError(
            f"image shape {img.shape} does not match model input "
            f"shape {tuple(p.input_shape)}"
        )
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (p.embedding_dim,):
        raise ArgumentError(
            f"upstream cotangent must have shape ({p.embedding_dim},), "
            f"got {upstream.shape}"
        )
    _, cache = forward_batch(p, img.reshape(1, -1))
    dx = input_gradient_batch(p, cache, upstream.reshape(1, -1))
    return dx[0].reshape(p.input_shape)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_identities: int = 16    # P of the P*K sampler
    images_per_identity: int = 4  # K of the P*K sampler
    learning_rate: float = 0.05
    margin: float = 0.3
    seed: int = 1

    def validate(self) -> None:
        if self.batch_identities < 2 or self.images_per_identity < 2:
            raise ArgumentError("P and K must both be >= 2 so triplets exist")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")

    def as_mapping(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_identities": self.batch_identities,
            "images_per_identity": self.images_per_identity,
            "learning_rate": self.learning_rate,
            "margin": self.margin,
            "seed": self.seed,
        }


def train(ds, cfg: TrainConfig) -> EmbedderParams:
    """Train the embedder with a cross-modality batch-hard triplet loss.

    In each P*K batch, every image of one modality serves as an anchor, its
    hardest (most distant) same-identity image of the other modality as the
    positive, and the hardest (closest) other-identity image of the other
    modality as the negative. Plain gradient descent; deterministic in
    cfg.seed. The returned params carry the per-epoch mean losses in
    .train_losses.
    """
    from .synthdata import Modality  # local import to avoid a module cycle

    cfg.validate()
    rng = SeededRng(cfg.seed).split("train")
    p = _init_from(rng, ds.image_shape, HIDDEN_DIM, EMBEDDING_DIM)

    ids = sorted({r.identity_id for r in ds.records})
    vis = {i: [] for i in ids}
    ir = {i: [] for i in ids}
    for r in ds.records:
        if r.modality is Modality.VISIBLE:
            vis[r.identity_id].append(r.pixels.reshape(-1))
        elif r.modality is Modality.INFRARED:
            ir[r.identity_id].append(r.pixels.reshape(-1))
    k = cfg.images_per_identity
    if len(ids) < cfg.batch_identities or any(
        len(vis[i]) < k or len(ir[i]) < k for i in ids
    ):
        raise ArgumentError(
            f"dataset cannot supply P={cfg.batch_identities} identities "
            f"with K={k} images per modality"
        )

    lr = cfg.learning_rate
    margin = cfg.margin
    losses = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(ids))
        epoch_losses = []
        for start in range(0, len(ids) - cfg.batch_identities + 1,
                           cfg.batch_identities):
            batch_ids = [ids[t] for t in order[start:start + cfg.batch_identities]]
            xv, xi, labels = [], [], []
            for i in batch_ids:
                for s in rng.gen.choice(len(vis[i]), size=k, replace=False):
                    xv.append(vis[i][s])
                for s in rng.gen.choice(len(ir[i]), size=k, replace=False):
                    xi.append(ir[i][s])
                labels += [i] * k
            labels = np.array(labels)
            batch = len(labels)
            y, cache = forward_batch(p, np.vstack([np.array(xv), np.array(xi)]))
            yv, yi = y[:batch], y[batch:]
            dist = np.linalg.norm(yv[:, None, :] - yi[None, :, :], axis=2)
            same = labels[:, None] == labels[None, :]
            d_y = np.zeros_like(y)
            total = 0.0
            count = 0
            for a in range(batch):  # visible anchors
                pos_idx = np.where(same[a])[0]
                neg_idx = np.where(~same[a])[0]
                jp = pos_idx[np.argmax(dist[a, pos_idx])]
                jn = neg_idx[np.argmin(dist[a, neg_idx])]
                hinge = dist[a, jp] - dist[a, jn] + margin
                if hinge > 0:
                    total += hinge
                    gp = (yv[a] - yi[jp]) / max(dist[a, jp], NORM_FLOOR)
                    gn = (yv[a] - yi[jn]) / max(dist[a, jn], NORM_FLOOR)
                    d_y[a] += gp - gn
                    d_y[batch + jp] += -gp
                    d_y[batch + jn] += gn
                count += 1
            for a in range(batch):  # infrared anchors
                pos_idx = np.where(same[:, a])[0]
                neg_idx = np.where(~same[:, a])[0]
                jp = pos_idx[np.argmax(dist[pos_idx, a])]
                jn = neg_idx[np.argmin(dist[neg_idx, a])]
                hinge = dist[jp, a] - dist[jn, a] + margin
                if hinge > 0:
                    total += hinge
                    gp = (yi[a] - yv[jp]) / max(dist[jp, a], NORM_FLOOR)
                    gn = (yi[a] - yv[jn]) / max(dist[jn, a], NORM_FLOOR)
                    d_y[batch + a] += gp - gn
                    d_y[jp] += -gp
                    d_y[jn] += gn
                count += 1
            d_y /= count
            dw1, db1, dw2, db2 = backward_params(p, cache, d_y)
            # Update in float64, store back to the float32 grid.
            p.w1 = (p.w1.astype(np.float64) - lr * dw1).astype(np.float32)
            p.b1 = (p.b1.astype(np.float64) - lr * db1).astype(np.float32)
            p.w2 = (p.w2.astype(np.float64) - lr * dw2).astype(np.float32)
            p.b2 = (p.b2.astype(np.float64) - lr * db2).astype(np.float32)
            epoch_losses.append(total / count)
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    p.train_losses = losses
    return p


def save_checkpoint(p: EmbedderParams, path: str, extra_header: dict = None) -> None:
    header = {
        "architecture": "flatten-linear-relu-linear-l2norm",
        "input_shape": ",".join(str(s) for s in p.input_shape),
        "hidden_dim": p.hidden_dim,
        "embedding_dim": p.embedding_dim,
        "fingerprint": p.fingerprint(),
    }
    header.update(extra_header or {})
    write_artifact(path, "checkpoint", header, p.blob())


def load_checkpoint(path: str) -> EmbedderParams:
    header, blob = read_artifact(path, "checkpoint")
    try:
        input_shape = tuple(int(s) for s in header["input_shape"].split(","))
        hidden = int(header["hidden_dim"])
        out = int(header["embedding_dim"])
    except (KeyError, ValueError) as exc:
        raise StorageError(f"{path}: bad checkpoint header ({exc})") from exc
    din = int(np.prod(input_shape))
    counts = [hidden * din, hidden, out * hidden, out]
    if len(blob) != 4 * sum(counts):
        raise StorageError(
            f"{path}: parameter blob holds {len(blob)} bytes, "
            f"expected {4 * sum(counts)}"
        )
    arrays = []
    offset = 0
    for count in counts:
        arrays.append(
            bytes_to_floats(blob[offset:offset + 4 * count], count, offset)
        )
        offset += 4 * count
    p = EmbedderParams(
        w1=arrays[0].reshape(hidden, din).astype(np.float32),
        b1=arrays[1].astype(np.float32),
        w2=arrays[2].reshape(out, hidden).astype(np.float32),
        b2=arrays[3].astype(np.float32),
        input_shape=input_shape,
    )
    declared = header.get("fingerprint")
    if declared is not None and declared != p.fingerprint():
        raise StorageError(
            f"{path}: checkpoint fingerprint mismatch: header says {declared}, "
            f"parameters hash to {p.fingerprint()}"
        )
    return p
