"""Synthetic cross-modality identity dataset.

Each identity is a point in a small latent appearance space. Visible images
render the latent as signed color block patterns plus a global color cast;
infrared images render a nonlinear monochrome map of the same latent,
blended with the grayscale of the visible rendering so that modality_gap=0
degenerates to "infrared equals grayscale(visible)". Within-identity
variation comes from latent jitter plus white sensor noise, both scaled by
intra_identity_noise. Pixels are quantized to float32 so datasets round-trip
bit-exactly through the on-disk format.
"""

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import SeededRng, check_pixel_tensor
from .errors import ArgumentError, DatasetError, StorageError
from .serialization import fingerprint_bytes, floats_to_bytes

# Renderer constants. These are internals of the synthetic world, not part of
# the SynthConfig surface; they are tuned so a briefly trained embedder gets
# high clean cross-modality rank-1 while universal perturbations stay potent.
BLOCK_AMP = 30.0        # signed amplitude of the per-block patterns
GLOBAL_AMP = 18.0       # amplitude of the global (whole-image) color cast
LATENT_DIM = 6
LATENT_RANGE = 1.0      # identity latents drawn uniform in [-range, +range]
JITTER_PER_NOISE = 0.11 / 3.0   # latent jitter std per unit of pixel noise
IR_NOISE_RATIO = 5.0 / 3.0      # infrared sensor noise relative to visible
IR_CONTRAST = 1.4       # infrared nonlinearity output gain
IR_SLOPE = 1.2          # infrared nonlinearity input slope
BLOCK_GRID = (4, 3)     # block rows x cols across the image

GRAY_R = 0.299
GRAY_G = 0.587
GRAY_B = 0.114


class Modality(Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"
    GRAYSCALE = "grayscale"


class Direction(Enum):
    VISIBLE_TO_INFRARED = "v2i"
    INFRARED_TO_VISIBLE = "i2v"

    @property
    def query_modality(self) -> Modality:
        if self is Direction.VISIBLE_TO_INFRARED:
            return Modality.VISIBLE
        return Modality.INFRARED

    @property
    def gallery_modality(self) -> Modality:
        if self is Direction.VISIBLE_TO_INFRARED:
            return Modality.INFRARED
        return Modality.VISIBLE


@dataclass
class ImageRecord:
    identity_id: int
    modality: Modality
    camera_id: int
    pixels: np.ndarray  # (3, H, W) float64 holding float32-representable values


@dataclass
class SynthConfig:
    num_identities: int = 64
    images_per_identity_per_modality: int = 8
    height: int = 24
    width: int = 12
    intra_identity_noise: float = 3.0  # pixel-unit std-dev of sensor noise
    modality_gap: float = 0.3          # 0 = infrared equals gray(visible)
    seed: int = 7

    def validate(self) -> None:
        if self.num_identities < 1 or self.images_per_identity_per_modality < 1:
            raise ArgumentError("identity and image counts must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ArgumentError(
                f"zero-area image shape ({self.height}x{self.width})"
            )
        if self.intra_identity_noise < 0:
            raise ArgumentError("intra_identity_noise must be >= 0")
        if not 0.0 <= self.modality_gap <= 1.0:
            raise ArgumentError("modality_gap must lie in [0, 1]")

    def as_mapping(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "images_per_identity_per_modality": self.images_per_identity_per_modality,
            "height": self.height,
            "width": self.width,
            "intra_identity_noise": self.intra_identity_noise,
            "modality_gap": self.modality_gap,
            "seed": self.seed,
        }


@dataclass
class Dataset:
    records: list
    num_identities: int
    images_per_identity_per_modality: int
    image_shape: tuple
    config: SynthConfig = field(default=None, repr=False)

    def by_modality(self, modality: Modality) -> list:
        return [r for r in self.records if r.modality is modality]

    def fingerprint(self) -> str:
        blob = b"".join(floats_to_bytes(r.pixels) for r in self.records)
        meta = ";".join(
            f"{r.identity_id},{r.modality.value},{r.camera_id}" for r in self.records
        )
        return fingerprint_bytes(blob + meta.encode("ascii"))


def _quantize(pixels: np.ndarray) -> np.ndarray:
    """Round pixel values to float32 grid, kept as float64 for the math."""
    return pixels.astype(np.float32).astype(np.float64)


def gray_value(pixels: np.ndarray) -> np.ndarray:
    """Luma plane 0.299 R + 0.587 G + 0.114 B of a (3, H, W) array.

    Written as B + 0.299 (R - B) + 0.587 (G - B), which is algebraically the
    same weighted sum but returns channel-equal inputs exactly unchanged, so
    the transform is exactly idempotent.
    """
    r, g, b = pixels[0], pixels[1], pixels[2]
    return b + GRAY_R * (r - b) + GRAY_G * (g - b)


def grayscale(img: ImageRecord) -> ImageRecord:
    """Grayscale an image record: luma replicated into all three channels."""
    pixels = check_pixel_tensor(img.pixels, "image pixels")
    if pixels.shape[0] != 3:
        raise ArgumentError(f"grayscale needs 3 channels, got {pixels.shape[0]}")
    v = gray_value(pixels)
    return ImageRecord(
        identity_id=img.identity_id,
        modality=Modality.GRAYSCALE,
        camera_id=img.camera_id,
        pixels=np.stack([v, v, v]),
    )


def _block_basis(height: int, width: int):
    """Indicator tensors of a BLOCK_GRID partition of the image."""
    rows, cols = BLOCK_GRID
    bh = max(1, height // rows)
    bw = max(1, width // cols)
    basis = []
    for r in range(rows):
        for c in range(cols):
            m = np.zeros((height, width))
            r0, c0 = r * bh, c * bw
            if r0 >= height or c0 >= width:
                continue
            r1 = height if r == rows - 1 else min(height, r0 + bh)
            c1 = width if c == cols - 1 else min(width, c0 + bw)
            m[r0:r1, c0:c1] = 1.0
            basis.append(m)
    return np.stack(basis)


def _renderer_tables(num_blocks: int):
    """Fixed (seed-independent) mixing tables of the synthetic world."""
    # Per-block signed channel weights: a bit pattern over channels, with
    # three interleaved contrast scales so blocks are not interchangeable.
    wk = np.zeros((num_blocks, 3))
    scales = [0.8, 1.0, 1.2]
    for k in range(num_blocks):
        for ch in range(3):
            wk[k, ch] = 1.0 if ((k >> ch) & 1) == 0 else -1.0
        wk[k] *= scales[k % 3]
    # Block <- latent mixing matrix, a deterministic incoherent cosine design.
    bmix = np.zeros((num_blocks, LATENT_DIM))
    for a in range(num_blocks):
        for b in range(LATENT_DIM):
            bmix[a, b] = np.cos(
                2 * np.pi * (a * b / (num_blocks * 1.7) + 0.31 * a + 0.17 * b) + 0.5
            )
    bmix /= np.linalg.norm(bmix, axis=1, keepdims=True)
    # Per-block infrared gains, kept away from zero so every block survives
    # the monochrome projection.
    uk = np.cos(2 * np.pi * np.arange(num_blocks) * 0.37 + 1.3)
    uk = np.where(np.abs(uk) < 0.35, 0.35 * np.sign(uk + 1e-9), uk)
    # Global color cast directions per channel, and the infrared global gain.
    gcast = np.zeros((3, LATENT_DIM))
    for c in range(3):
        for k in range(LATENT_DIM):
            gcast[c, k] = np.cos(2 * np.pi * (c / 3 + k * 0.29) + 0.2)
    gcast /= np.linalg.norm(gcast, axis=1, keepdims=True)
    g_ir = np.cos(2 * np.pi * np.arange(LATENT_DIM) * 0.17 + 0.9)
    g_ir /= np.linalg.norm(g_ir)
    return wk, bmix, uk, gcast, g_ir


def _render_visible(z, basis, wk, bmix, gcast):
    coef = bmix @ z
    pattern = np.einsum("k,kc,khw->chw", coef, wk, basis)
    cast = (gcast @ z)[:, None, None]
    return np.clip(127.5 + BLOCK_AMP * pattern + GLOBAL_AMP * cast, 0, 255), coef


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Deterministically render the synthetic identities in both modalities."""
    cfg.validate()
    rng = SeededRng(cfg.seed).split("synthdata")
    height, width = cfg.height, cfg.width
    basis = _block_basis(height, width)
    nblocks = basis.shape[0]
    wk, bmix, uk, gcast, g_ir = _renderer_tables(nblocks)
    jitter = JITTER_PER_NOISE * cfg.intra_identity_noise
    ir_noise = IR_NOISE_RATIO * cfg.intra_identity_noise
    gap = cfg.modality_gap

    latents = rng.uniform(-LATENT_RANGE, LATENT_RANGE,
                          size=(cfg.num_identities, LATENT_DIM))
    records = []
    for ident in range(cfg.num_identities):
        for j in range(cfg.images_per_identity_per_modality):
            z = latents[ident] + jitter * rng.normal(size=LATENT_DIM)
            vis, _ = _render_visible(z, basis, wk, bmix, gcast)
            noisy = np.clip(
                vis + cfg.intra_identity_noise * rng.normal(size=(3, height, width)),
                0, 255,
            )
            records.append(ImageRecord(ident, Modality.VISIBLE, j % 2, _quantize(noisy)))
        for j in range(cfg.images_per_identity_per_modality):
            z = latents[ident] + jitter * rng.normal(size=LATENT_DIM)
            vis, coef = _render_visible(z, basis, wk, bmix, gcast)
            # Infrared core: saturating monochrome response with its own
            # per-block gains and global gain.
            t = np.einsum("k,khw->hw", uk * coef, basis)
            core = np.clip(
                127.5 + IR_CONTRAST * BLOCK_AMP * np.tanh(IR_SLOPE * t)
                + GLOBAL_AMP * float(g_ir @ z),
                0, 255,
            )
            mono = np.clip(
                (1.0 - gap) * gray_value(vis) + gap * core
                + ir_noise * rng.normal(size=(height, width)),
                0, 255,
            )
            records.append(
                ImageRecord(ident, Modality.INFRARED, 2,
                            _quantize(np.stack([mono, mono, mono])))
            )
    return Dataset(
        records=records,
        num_identities=cfg.num_identities,
        images_per_identity_per_modality=cfg.images_per_identity_per_modality,
        image_shape=(3, height, width),
        config=cfg,
    )


def split_query_gallery(ds: Dataset, direction: Direction):
    """Partition records into (queries, gallery) for one query direction."""
    queries = ds.by_modality(direction.query_modality)
    gallery = ds.by_modality(direction.gallery_modality)
    if not queries or not gallery:
        raise DatasetError(
            f"dataset lacks records for direction {direction.value}: "
            f"{len(queries)} queries, {len(gallery)} gallery"
        )
    return queries, gallery


# ---------------------------------------------------------------------------
# On-disk format: text manifest + companion raw file of little-endian float32
# pixels, images concatenated in manifest order, channel-major.

MANIFEST_MAGIC = "#xmodal-dataset v1"


def save_dataset(ds: Dataset, manifest_path: str, extra_header: dict = None) -> None:
    raw_path = os.path.splitext(manifest_path)[0] + ".f32"
    blob = b"".join(floats_to_bytes(r.pixels) for r in ds.records)
    cfg = ds.config if ds.config is not None else SynthConfig(
        num_identities=ds.num_identities,
        images_per_identity_per_modality=ds.images_per_identity_per_modality,
        height=ds.image_shape[1],
        width=ds.image_shape[2],
    )
    image_bytes = 4 * int(np.prod(ds.image_shape))
    lines = [MANIFEST_MAGIC, f"raw_file: {os.path.basename(raw_path)}"]
    for key, value in (extra_header or {}).items():
        lines.append(f"{key}: {value}")
    for key, value in cfg.as_mapping().items():
        lines.append(f"{key}: {value}")
    lines.append(f"num_records: {len(ds.records)}")
    lines.append(f"fingerprint: {ds.fingerprint()}")
    lines.append("records:")
    for idx, rec in enumerate(ds.records):
        lines.append(
            f"{idx} {rec.identity_id} {rec.modality.value} "
            f"{rec.camera_id} {idx * image_bytes}"
        )
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)
    tmp_raw = raw_path + ".tmp"
    with open(tmp_raw, "wb") as fh:
        fh.write(blob)
    os.replace(tmp_raw, raw_path)


def load_dataset(manifest_path: str) -> Dataset:
    if not os.path.exists(manifest_path):
        raise StorageError(f"no such file: {manifest_path}")
    with open(manifest_path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise StorageError(f"{manifest_path}: not a dataset manifest")
    keys = {}
    rows = []
    in_records = False
    for lineno, line in enumerate(lines[1:], start=2):
        if in_records:
            parts = line.split()
            if len(parts) != 5:
                raise StorageError(
                    f"{manifest_path}: bad record row at line {lineno}: {line!r}"
                )
            rows.append(parts)
        elif line == "records:":
            in_records = True
        else:
            if ": " not in line:
                raise StorageError(
                    f"{manifest_path}: malformed header line {lineno}: {line!r}"
                )
            key, value = line.split(": ", 1)
            keys[key] = value
    try:
        cfg = SynthConfig(
            num_identities=int(keys["num_identities"]),
            images_per_identity_per_modality=int(
                keys["images_per_identity_per_modality"]
            ),
            height=int(keys["height"]),
            width=int(keys["width"]),
            intra_identity_noise=float(keys["intra_identity_noise"]),
            modality_gap=float(keys["modality_gap"]),
            seed=int(keys["seed"]),
        )
        num_records = int(keys["num_records"])
        declared_fp = keys["fingerprint"]
        raw_file = keys["raw_file"]
    except KeyError as exc:
        raise StorageError(f"{manifest_path}: missing manifest key {exc}") from exc
    if len(rows) != num_records:
        raise StorageError(
            f"{manifest_path}: declared {num_records} records, found {len(rows)}"
        )
    raw_path = os.path.join(os.path.dirname(manifest_path) or ".", raw_file)
    if not os.path.exists(raw_path):
        raise StorageError(f"missing raw pixel file: {raw_path}")
    with open(raw_path, "rb") as fh:
        blob = fh.read()
    shape = (3, cfg.height, cfg.width)
    image_bytes = 4 * int(np.prod(shape))
    if len(blob) != image_bytes * num_records:
        raise StorageError(
            f"{raw_path}: expected {image_bytes * num_records} bytes, "
            f"got {len(blob)}"
        )
    modality_by_value = {m.value: m for m in Modality}
    records = []
    for parts in rows:
        idx, ident, modality, camera, offset = parts
        offset = int(offset)
        if offset != int(idx) * image_bytes:
            raise StorageError(
                f"{manifest_path}: record {idx} offset {offset} does not match "
                f"expected {int(idx) * image_bytes}"
            )
        pixels = (
            np.frombuffer(blob[offset:offset + image_bytes], dtype="<f4")
            .astype(np.float64)
            .reshape(shape)
        )
        records.append(
            ImageRecord(int(ident), modality_by_value[modality], int(camera), pixels)
        )
    ds = Dataset(
        records=records,
        num_identities=cfg.num_identities,
        images_per_identity_per_modality=cfg.images_per_identity_per_modality,
        image_shape=shape,
        config=cfg,
    )
    actual_fp = ds.fingerprint()
    if actual_fp != declared_fp:
        raise StorageError(
            f"{manifest_path}: dataset fingerprint mismatch: manifest says "
            f"{declared_fp}, pixels hash to {actual_fp}"
        )
    return ds
