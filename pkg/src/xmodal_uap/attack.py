"""Universal perturbation learners and per-image baseline attacks.

The universal attack trains one image-shaped noise tensor eta, bounded in
infinity norm by epsilon on the 0..255 pixel scale, to defeat retrieval for
every query at once. Learning alternates visible and infrared mini-batches
each epoch, carrying the momentum state from the visible update into the
infrared update of the same batch (the cross-modality chaining), with random
grayscale replacement bridging the modality gap. The stepwise baseline runs
the same machinery but finishes all visible epochs before starting infrared,
resets momentum between the phases, and never uses grayscale augmentation.

Sign convention: the loss hinge rewards queries whose features sit close to
a wrong-identity centroid and far from their own; the attacker therefore
DESCENDS this loss. A config flag flips to ascent for comparison runs.
"""

from dataclasses import dataclass

import numpy as np

from .centroids import CentroidTable, NegativeStrategy, negative_centroid
from .core import SeededRng, clip_elementwise, l1_norm, sign_elementwise
from .embedder import EmbedderParams, forward_batch, input_gradient_batch
from .errors import ArgumentError, AttackError, LookupFailure, StorageError
from .serialization import (
    bytes_to_floats,
    fingerprint_bytes,
    floats_to_bytes,
    read_artifact,
    write_artifact,
)
from .synthdata import Dataset, ImageRecord, Modality, gray_value

GRAD_FLOOR = 1e-12

# Eq-style cyclic modality assignment: anchor modality -> (positive centroid
# modality, negative centroid modality).
POSITIVE_MODALITY = {
    Modality.VISIBLE: Modality.INFRARED,
    Modality.INFRARED: Modality.GRAYSCALE,
    Modality.GRAYSCALE: Modality.VISIBLE,
}
NEGATIVE_MODALITY = {
    Modality.VISIBLE: Modality.GRAYSCALE,
    Modality.INFRARED: Modality.VISIBLE,
    Modality.GRAYSCALE: Modality.INFRARED,
}


@dataclass
class Perturbation:
    eta: np.ndarray  # same shape as dataset images, float64
    epsilon: float

    def check_bound(self) -> None:
        if np.max(np.abs(self.eta)) > self.epsilon:
            raise AttackError(
                f"perturbation exceeds bound: |eta|_inf = "
                f"{np.max(np.abs(self.eta))} > {self.epsilon}"
            )

    def fingerprint(self) -> str:
        return fingerprint_bytes(
            floats_to_bytes(self.eta) + repr(float(self.epsilon)).encode("ascii")
        )


@dataclass
class MomentumState:
    delta: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "MomentumState":
        return cls(delta=np.zeros(shape, dtype=np.float64))


@dataclass
class AttackConfig:
    epsilon: float = 8.0
    step_size: float = None     # alpha; defaults to epsilon / 12
    momentum: float = 1.0       # theta
    margin: float = 0.5         # rho
    iter_epoch: int = 20
    batch_size: int = 32
    gray_prob: float = 0.2
    negative_strategy: NegativeStrategy = NegativeStrategy.FARTHEST
    clip_to_pixel_range: bool = True
    descent: bool = True
    seed: int = 5

    @property
    def alpha(self) -> float:
        return self.epsilon / 12.0 if self.step_size is None else self.step_size

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ArgumentError("epsilon must be positive")
        if not 0 < self.alpha <= self.epsilon:
            raise ArgumentError("step size must satisfy 0 < alpha <= epsilon")
        if self.momentum < 0:
            raise ArgumentError("momentum must be >= 0")
        if self.margin < 0:
            raise ArgumentError("margin must be >= 0")
        if self.batch_size < 1:
            raise ArgumentError("batch size must be >= 1")
        if self.iter_epoch < 0:
            raise ArgumentError("iter_epoch must be >= 0")
        if not 0.0 <= self.gray_prob <= 1.0:
            raise ArgumentError("grayscale probability must lie in [0, 1]")

    def as_mapping(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "step_size": self.alpha,
            "momentum": self.momentum,
            "margin": self.margin,
            "iter_epoch": self.iter_epoch,
            "batch_size": self.batch_size,
            "gray_prob": self.gray_prob,
            "negative_strategy": self.negative_strategy.value,
            "clip_to_pixel_range": self.clip_to_pixel_range,
            "descent": self.descent,
            "seed": self.seed,
        }


def attack_triplet_loss(f_adv, pos, neg, margin: float):
    """Mean hinge max(|neg_i - f_i| - |pos_i - f_i| + margin, 0) and its
    gradients w.r.t. each f_i (subgradient 0 at the kink)."""
    f_adv = np.asarray(f_adv, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if not (f_adv.shape == pos.shape == neg.shape) or f_adv.ndim != 2:
        raise ArgumentError(
            f"feature/pos/neg shapes disagree: {f_adv.shape}, {pos.shape}, "
            f"{neg.shape}"
        )
    batch = f_adv.shape[0]
    if batch < 1:
        raise ArgumentError("attack_triplet_loss needs at least one sample")
    d_neg = np.linalg.norm(neg - f_adv, axis=1)
    d_pos = np.linalg.norm(pos - f_adv, axis=1)
    hinge = d_neg - d_pos + margin
    active = hinge > 0
    loss = float(np.maximum(hinge, 0.0).mean())
    grad_neg_term = (f_adv - neg) / np.maximum(d_neg, GRAD_FLOOR)[:, None]
    grad_pos_term = (f_adv - pos) / np.maximum(d_pos, GRAD_FLOOR)[:, None]
    cotangents = np.zeros_like(f_adv)
    cotangents[active] = (grad_neg_term[active] - grad_pos_term[active]) / batch
    return loss, cotangents


def mi_sgd_step(pert: Perturbation, state: MomentumState,
                grad_eta: np.ndarray, cfg: AttackConfig):
    """One momentum sign step: accumulate the L1-normalized gradient into the
    momentum, move eta by alpha along its sign, clip to the epsilon ball."""
    grad_eta = np.asarray(grad_eta, dtype=np.float64)
    if grad_eta.shape != pert.eta.shape or state.delta.shape != pert.eta.shape:
        raise ArgumentError(
            f"shape mismatch in mi_sgd_step: eta {pert.eta.shape}, "
            f"grad {grad_eta.shape}, momentum {state.delta.shape}"
        )
    norm = l1_norm(grad_eta)
    if norm < GRAD_FLOOR:
        direction = np.zeros_like(grad_eta)
    else:
        direction = grad_eta / norm
        if cfg.descent:
            direction = -direction
    new_delta = cfg.momentum * state.delta + direction
    new_eta = clip_elementwise(
        pert.eta + cfg.alpha * sign_elementwise(new_delta),
        -cfg.epsilon, cfg.epsilon,
    )
    return Perturbation(new_eta, cfg.epsilon), MomentumState(new_delta)


def _centroid_matrices(table: CentroidTable, ds: Dataset):
    ids = sorted({r.identity_id for r in ds.records})
    mats = {}
    for modality in Modality:
        try:
            mats[modality] = np.stack([table.get(i, modality) for i in ids])
        except LookupFailure as exc:
            raise AttackError(str(exc)) from exc
    index_of = {ident: pos for pos, ident in enumerate(ids)}
    return mats, index_of


def _phase_update(p, rows, labels, modalities, pert, state, cfg, mats, index_of,
                  table, rng_negative):
    """One mini-batch update of eta: embed perturbed rows, form the centroid
    triplet loss, backprop to the shared eta (sum over the batch), step."""
    x = np.stack(rows)
    x_adv = x + pert.eta.reshape(-1)[None, :]
    if cfg.clip_to_pixel_range:
        x_adv = np.clip(x_adv, 0.0, 255.0)
    y_adv, cache = forward_batch(p, x_adv)
    y_clean, _ = forward_batch(p, x)

    pos = np.zeros_like(y_adv)
    neg = np.zeros_like(y_adv)
    for t in range(len(rows)):
        pos_mod = POSITIVE_MODALITY[modalities[t]]
        neg_mod = NEGATIVE_MODALITY[modalities[t]]
        try:
            pos[t] = mats[pos_mod][index_of[labels[t]]]
        except KeyError as exc:
            raise AttackError(
                f"no centroid for identity {labels[t]} in modality "
                f"{pos_mod.value}"
            ) from exc
        if cfg.negative_strategy is NegativeStrategy.FARTHEST:
            cm = mats[neg_mod]
            dd = ((cm - y_clean[t]) ** 2).sum(axis=1)
            dd[index_of[labels[t]]] = -1.0
            neg[t] = cm[int(np.argmax(dd))]
        else:
            neg[t] = negative_centroid(
                table, y_clean[t], labels[t], neg_mod,
                cfg.negative_strategy, rng_negative,
            )
    loss, cotangents = attack_triplet_loss(y_adv, pos, neg, cfg.margin)
    grad_rows = input_gradient_batch(p, cache, cotangents)
    grad_eta = grad_rows.sum(axis=0).reshape(pert.eta.shape)
    pert, state = mi_sgd_step(pert, state, grad_eta, cfg)
    return pert, state, loss


def _pools(ds: Dataset):
    vis = [r for r in ds.records if r.modality is Modality.VISIBLE]
    ir = [r for r in ds.records if r.modality is Modality.INFRARED]
    return vis, ir


def _check_sources(p: EmbedderParams, ds: Dataset, table: CentroidTable):
    if tuple(p.input_shape) != tuple(ds.image_shape):
        raise ArgumentError(
            f"model input shape {tuple(p.input_shape)} does not match "
            f"dataset image shape {tuple(ds.image_shape)}"
        )
    if table.model_fingerprint and table.model_fingerprint != p.fingerprint():
        raise AttackError(
            f"centroid table was built for model {table.model_fingerprint}, "
            f"got model {p.fingerprint()}"
        )
    if (table.dataset_fingerprint
            and table.dataset_fingerprint != ds.fingerprint()):
        raise AttackError(
            f"centroid table was built for dataset "
            f"{table.dataset_fingerprint}, got dataset {ds.fingerprint()}"
        )


def _init_perturbation(rng: SeededRng, shape, cfg: AttackConfig) -> Perturbation:
    # Uniform noise in [0, 1) per element, clipped into the epsilon ball
    # (only binding when epsilon < 1).
    eta = clip_elementwise(
        rng.random(int(np.prod(shape))).reshape(shape),
        -cfg.epsilon, cfg.epsilon,
    )
    return Perturbation(eta, cfg.epsilon)


def _batches(rng: SeededRng, pool, count, size):
    idx = rng.permutation(len(pool))
    return [
        [pool[t] for t in idx[b * size:(b + 1) * size]] for b in range(count)
    ]


def _maybe_grayscale(aug_rng: SeededRng, gray_prob: float, rec: ImageRecord):
    """Bernoulli grayscale replacement; consumes no draws when disabled."""
    if gray_prob > 0 and aug_rng.random() < gray_prob:
        v = gray_value(rec.pixels)
        return np.stack([v, v, v]).reshape(-1), Modality.GRAYSCALE
    return rec.pixels.reshape(-1), rec.modality


def cmps_learn(p: EmbedderParams, ds: Dataset, table: CentroidTable,
               cfg: AttackConfig, instrument=None) -> Perturbation:
    """Learn the universal perturbation with alternating modality updates.

    Per epoch, visible and infrared pools are shuffled into batch_size
    mini-batches; each batch index runs a visible update followed by an
    infrared update that starts from the visible update's momentum state.
    `instrument`, if given, is called after every update with a dict holding
    epoch, batch, phase, loss, and copies of the momentum entering and
    leaving the update (white-box hook for the chaining invariant).
    """
    cfg.validate()
    _check_sources(p, ds, table)
    mats, index_of = _centroid_matrices(table, ds)
    root = SeededRng(cfg.seed)
    init_rng = root.split("attack-init")
    batch_rng = root.split("attack-batches")
    aug_rng = root.split("attack-grayscale")
    neg_rng = root.split("attack-negatives")

    pert = _init_perturbation(init_rng, ds.image_shape, cfg)
    state = MomentumState.zeros(ds.image_shape)
    vis, ir = _pools(ds)
    per_epoch = min(len(vis), len(ir)) // cfg.batch_size
    if per_epoch < 1 and cfg.iter_epoch > 0:
        raise AttackError(
            f"batch size {cfg.batch_size} exceeds modality pool "
            f"({len(vis)} visible, {len(ir)} infrared)"
        )
    for epoch in range(cfg.iter_epoch):
        vis_batches = _batches(batch_rng, vis, per_epoch, cfg.batch_size)
        ir_batches = _batches(batch_rng, ir, per_epoch, cfg.batch_size)
        for b in range(per_epoch):
            for phase_name, batch in (("visible", vis_batches[b]),
                                      ("infrared", ir_batches[b])):
                rows, labels, mods = [], [], []
                for rec in batch:
                    row, modality = _maybe_grayscale(aug_rng, cfg.gray_prob, rec)
                    rows.append(row)
                    labels.append(rec.identity_id)
                    mods.append(modality)
                delta_in = state.delta.copy() if instrument else None
                pert, state, loss = _phase_update(
                    p, rows, labels, mods, pert, state, cfg, mats, index_of,
                    table, neg_rng,
                )
                if instrument:
                    instrument({
                        "epoch": epoch, "batch": b, "phase": phase_name,
                        "loss": loss, "delta_in": delta_in,
                        "delta_out": state.delta.copy(),
                    })
    pert.check_bound()
    return pert


def stepwise_uap(p: EmbedderParams, ds: Dataset, table: CentroidTable,
                 cfg: AttackConfig, instrument=None) -> Perturbation:
    """Stepwise baseline: iter_epoch epochs on visible batches only, then
    iter_epoch epochs on infrared batches only. Momentum resets to zero
    between the phases; no grayscale augmentation."""
    cfg.validate()
    _check_sources(p, ds, table)
    mats, index_of = _centroid_matrices(table, ds)
    root = SeededRng(cfg.seed)
    init_rng = root.split("attack-init")
    batch_rng = root.split("attack-batches")
    neg_rng = root.split("attack-negatives")

    pert = _init_perturbation(init_rng, ds.image_shape, cfg)
    vis, ir = _pools(ds)
    per_epoch = min(len(vis), len(ir)) // cfg.batch_size
    if per_epoch < 1 and cfg.iter_epoch > 0:
        raise AttackError(
            f"batch size {cfg.batch_size} exceeds modality pool "
            f"({len(vis)} visible, {len(ir)} infrared)"
        )
    for phase_name, pool in (("visible", vis), ("infrared", ir)):
        state = MomentumState.zeros(ds.image_shape)
        for epoch in range(cfg.iter_epoch):
            for b, batch in enumerate(
                _batches(batch_rng, pool, per_epoch, cfg.batch_size)
            ):
                rows = [rec.pixels.reshape(-1) for rec in batch]
                labels = [rec.identity_id for rec in batch]
                mods = [rec.modality for rec in batch]
                delta_in = state.delta.copy() if instrument else None
                pert, state, loss = _phase_update(
                    p, rows, labels, mods, pert, state, cfg, mats, index_of,
                    table, neg_rng,
                )
                if instrument:
                    instrument({
                        "epoch": epoch, "batch": b, "phase": phase_name,
                        "loss": loss, "delta_in": delta_in,
                        "delta_out": state.delta.copy(),
                    })
    pert.check_bound()
    return pert


def apply(pert: Perturbation, img: ImageRecord,
          clip_to_pixel_range: bool = True) -> ImageRecord:
    """Add the universal perturbation to one image, preserving labels."""
    if pert.eta.shape != img.pixels.shape:
        raise ArgumentError(
            f"perturbation shape {pert.eta.shape} does not match image "
            f"shape {img.pixels.shape}"
        )
    pixels = img.pixels + pert.eta
    if clip_to_pixel_range:
        pixels = np.clip(pixels, 0.0, 255.0)
    return ImageRecord(img.identity_id, img.modality, img.camera_id, pixels)


# ---------------------------------------------------------------------------
# Per-image baselines. All share one single-sample loss/gradient helper and
# differ only in their stepping rule. They perturb individual queries and
# never touch the universal eta path.

def _single_loss_grad(p, table, mats, index_of, pixels, identity, modality,
                      cfg, clean_feature):
    y, cache = forward_batch(p, pixels.reshape(1, -1))
    pos_mod = POSITIVE_MODALITY[modality]
    neg_mod = NEGATIVE_MODALITY[modality]
    try:
        pos = mats[pos_mod][index_of[identity]][None, :]
    except KeyError as exc:
        raise AttackError(
            f"no centroid for identity {identity} in modality {pos_mod.value}"
        ) from exc
    cm = mats[neg_mod]
    dd = ((cm - clean_feature) ** 2).sum(axis=1)
    dd[index_of[identity]] = -1.0
    neg = cm[int(np.argmax(dd))][None, :]
    loss, cot = attack_triplet_loss(y, pos, neg, cfg.margin)
    grad = input_gradient_batch(p, cache, cot)[0].reshape(pixels.shape)
    return loss, grad


def _baseline_setup(p, ds, table, img, cfg):
    cfg.validate()
    _check_sources(p, ds, table)
    if img.pixels.shape != tuple(p.input_shape):
        raise ArgumentError(
            f"image shape {img.pixels.shape} does not match model input "
            f"shape {tuple(p.input_shape)}"
        )
    mats, index_of = _centroid_matrices(table, ds)
    clean_feature, _ = forward_batch(p, img.pixels.reshape(1, -1))
    return mats, index_of, clean_feature[0]


def fgsm(p: EmbedderParams, img: ImageRecord, ds: Dataset,
         table: CentroidTable, cfg: AttackConfig) -> ImageRecord:
    """Single sign step of size epsilon from the clean image."""
    mats, index_of, clean = _baseline_setup(p, ds, table, img, cfg)
    _, grad = _single_loss_grad(
        p, table, mats, index_of, img.pixels, img.identity_id, img.modality,
        cfg, clean,
    )
    step = cfg.epsilon * sign_elementwise(grad)
    pixels = img.pixels - step if cfg.descent else img.pixels + step
    if cfg.clip_to_pixel_range:
        pixels = np.clip(pixels, 0.0, 255.0)
    return ImageRecord(img.identity_id, img.modality, img.camera_id, pixels)


def _iterative_baseline(p, img, ds, table, cfg, steps, use_momentum):
    mats, index_of, clean = _baseline_setup(p, ds, table, img, cfg)
    if steps < 1:
        raise ArgumentError("steps must be >= 1")
    pixels = img.pixels.copy()
    momentum = np.zeros_like(pixels)
    for _ in range(steps):
        _, grad = _single_loss_grad(
            p, table, mats, index_of, pixels, img.identity_id, img.modality,
            cfg, clean,
        )
        if use_momentum:
            norm = l1_norm(grad)
            momentum = cfg.momentum * momentum + (
                grad / norm if norm >= GRAD_FLOOR else 0.0
            )
            direction = momentum
        else:
            direction = grad
        step = cfg.alpha * sign_elementwise(direction)
        pixels = pixels - step if cfg.descent else pixels + step
        # Project back onto the epsilon ball around the original image,
        # then into pixel range.
        pixels = np.clip(pixels, img.pixels - cfg.epsilon,
                         img.pixels + cfg.epsilon)
        if cfg.clip_to_pixel_range:
            pixels = np.clip(pixels, 0.0, 255.0)
    return ImageRecord(img.identity_id, img.modality, img.camera_id, pixels)


def pgd(p: EmbedderParams, img: ImageRecord, ds: Dataset,
        table: CentroidTable, cfg: AttackConfig, steps: int = 10) -> ImageRecord:
    """Iterative sign steps of size alpha with epsilon-ball projection."""
    return _iterative_baseline(p, img, ds, table, cfg, steps, use_momentum=False)


def mfgsm(p: EmbedderParams, img: ImageRecord, ds: Dataset,
          table: CentroidTable, cfg: AttackConfig, steps: int = 10) -> ImageRecord:
    """Momentum-accumulated iterative FGSM with L1-normalized gradients."""
    return _iterative_baseline(p, img, ds, table, cfg, steps, use_momentum=True)


# ---------------------------------------------------------------------------
# Perturbation file IO: the contract between the attack stage and the
# evaluation/transfer stages.

def save_perturbation(pert: Perturbation, path: str, config_hash: str = "",
                      seed: int = 0, model_fingerprint: str = "",
                      dataset_fingerprint: str = "", method: str = "") -> None:
    header = {
        "epsilon": repr(float(pert.epsilon)),
        "shape": ",".join(str(s) for s in pert.eta.shape),
        "config_hash": config_hash,
        "seed": seed,
        "method": method,
        "model_fingerprint": model_fingerprint,
        "dataset_fingerprint": dataset_fingerprint,
        "fingerprint": pert.fingerprint(),
    }
    write_artifact(path, "perturbation", header, floats_to_bytes(pert.eta))


def load_perturbation(path: str):
    """Read a perturbation file; returns (Perturbation, header dict).

    Values are re-clipped to the epsilon ball on load: the file stores
    float32, and rounding of an in-bound float64 value can overshoot the
    bound by half an ulp when epsilon itself is not float32-representable.
    """
    header, blob = read_artifact(path, "perturbation")
    try:
        epsilon = float(header["epsilon"])
        shape = tuple(int(s) for s in header["shape"].split(","))
    except (KeyError, ValueError) as exc:
        raise StorageError(f"{path}: bad perturbation header ({exc})") from exc
    eta = bytes_to_floats(blob, int(np.prod(shape))).reshape(shape)
    overshoot = np.max(np.abs(eta)) - epsilon
    if overshoot > 1e-5:
        raise StorageError(
            f"{path}: stored perturbation violates its own bound by "
            f"{overshoot}"
        )
    pert = Perturbation(clip_elementwise(eta, -epsilon, epsilon), epsilon)
    return pert, header
