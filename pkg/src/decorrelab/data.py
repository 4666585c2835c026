"""Synthetic paired-image dataset with injectable technical variation.

Each sample is a pair of single-channel images: a region of interest (ROI)
whose texture carries the class signal, and a control region (CR) drawn from
the same acquisition but free of class signal. Technical variation — a
soft/sharp reconstruction-style difference or additive white Gaussian noise —
is applied identically to both images of a pair, which is exactly the
assumption the decorrelation mechanism exploits. Bias is injected by
correlating the variant choice with the label.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .engine import seeded_rng

# Generator constants (declared defaults; signal strength is calibrated so the
# small architecture reaches an unbiased test AUC around 0.8 at n=2000).
IMAGE_SIZE = 32
FIELD_SIGMA = 2.0       # smoothing of the background random field
SOFT_SIGMA = 0.8        # blur of the soft reconstruction variant
SHARP_AMOUNT = 1.2      # unsharp-mask amount of the sharp variant
SHARP_NOISE = 0.12      # noise sigma of the sharp variant, relative to ROI std
BLOB_RADIUS = (2.0, 3.5)
BLOB_RATE = 6.0         # Poisson rate; blob count is Poisson(rate) + 1
DEFAULT_SIGNAL = 0.7    # blob amplitude relative to the unit-std field
GAIN_JITTER = 0.42      # lognormal sigma of the per-image intensity gain;
                        # ROI and CR draw independently, so feature
                        # correlations reflect the confounder, not a shared scale
SEVERITY_RANGE = (0.3, 1.7)  # per-sample spread of the blob amplitude around
                             # signal_strength (mean 1), so some positives are
                             # faint: caps the reachable AUC like case severity
                             # variation would

DATASET_MAGIC = b"CRDS"
DATASET_VERSION = 1

KINDS = ("kernel", "awgn")
_ADVERSARIAL_NOISE_TAG = "adversarial-awgn"


@dataclass
class Sample:
    """One acquisition: clean, soft and sharp variants of an ROI/CR pair."""

    id: int
    label: int
    roi_clean: np.ndarray
    cr_clean: np.ndarray
    roi_soft: np.ndarray
    cr_soft: np.ndarray
    roi_sharp: np.ndarray
    cr_sharp: np.ndarray

    def images(self) -> tuple[np.ndarray, ...]:
        return (self.roi_clean, self.cr_clean, self.roi_soft,
                self.cr_soft, self.roi_sharp, self.cr_sharp)


@dataclass(frozen=True)
class BiasSpec:
    """Which confounder to inject and how strongly it tracks the label.

    p_bias is the probability that a positive sample receives the
    label-linked variant (soft image / added noise); negatives receive it
    with probability 1 - p_bias. p_bias = 0.5 is the unbiased condition.
    """

    kind: str = "kernel"
    p_bias: float = 0.9
    sigma_rel: float = 0.5  # AWGN sigma relative to the sample's ROI std

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.5 <= self.p_bias <= 1.0:
            raise ValueError(f"p_bias must be in [0.5, 1], got {self.p_bias}")
        if self.sigma_rel < 0:
            raise ValueError(f"sigma_rel must be >= 0, got {self.sigma_rel}")


@dataclass
class PairedData:
    """Stacked (roi, cr, label) arrays plus per-sample variant metadata."""

    roi: np.ndarray        # [N,1,H,W] float32
    cr: np.ndarray         # [N,1,H,W] float32
    labels: np.ndarray     # [N] int64
    ids: np.ndarray        # [N] int64
    variants: np.ndarray   # [N] str, same manipulation state for roi and cr

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PairedData":
        return PairedData(self.roi[idx], self.cr[idx], self.labels[idx],
                          self.ids[idx], self.variants[idx])


def _random_field(rng: np.random.Generator, size: int) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((size, size)), FIELD_SIGMA, mode="reflect")
    return (field - field.mean()) / field.std()


def _add_blobs(img: np.ndarray, rng: np.random.Generator, amplitude: float) -> None:
    """Stamp K ~ Poisson(rate)+1 low-intensity (dark) soft-edged disks."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    count = int(rng.poisson(BLOB_RATE)) + 1
    for _ in range(count):
        r = rng.uniform(*BLOB_RADIUS)
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img -= amplitude * np.clip(r - dist + 0.5, 0.0, 1.0)


def synth_generate(n: int, seed: int, signal_strength: float = DEFAULT_SIGNAL,
                   size: int = IMAGE_SIZE) -> list[Sample]:
    """Generate n samples, each with clean/soft/sharp ROI and CR variants.

    Labels alternate 0/1 so the set is balanced. Every sample draws from its
    own (seed, id)-derived stream, so parallel and serial generation agree
    and regenerating with the same seed is bit-identical. The soft variant
    blurs the clean image; the sharp variant is an unsharp mask plus noise,
    applied with the same parameters to ROI and CR.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    samples = []
    for i in range(n):
        rng = seeded_rng(seed, "sample", i)
        label = i % 2
        roi = _random_field(rng, size)
        cr = _random_field(rng, size)
        if label == 1:
            severity = rng.uniform(*SEVERITY_RANGE)
            _add_blobs(roi, rng, signal_strength * severity)
        # independent intensity gains keep the blob-to-field contrast intact
        roi *= np.exp(rng.normal(0.0, GAIN_JITTER))
        cr *= np.exp(rng.normal(0.0, GAIN_JITTER))
        roi_std = float(roi.std())
        roi_soft = gaussian_filter(roi, SOFT_SIGMA, mode="reflect")
        cr_soft = gaussian_filter(cr, SOFT_SIGMA, mode="reflect")
        noise_sigma = SHARP_NOISE * roi_std
        roi_sharp = roi + SHARP_AMOUNT * (roi - roi_soft) + rng.normal(0.0, noise_sigma, roi.shape)
        cr_sharp = cr + SHARP_AMOUNT * (cr - cr_soft) + rng.normal(0.0, noise_sigma, cr.shape)

        def img(a):
            return a[None, :, :].astype(np.float32)

        samples.append(Sample(i, label, img(roi), img(cr), img(roi_soft),
                              img(cr_soft), img(roi_sharp), img(cr_sharp)))
    return samples


def apply_awgn(img: np.ndarray, sigma_roi: float, sigma_rel: float,
               rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise with sigma = sigma_rel * sigma_roi.

    sigma_roi is the intensity standard deviation of the ROI being
    manipulated; the paired CR image receives noise with the same sigma.
    """
    if sigma_roi < 0:
        raise ValueError(f"sigma_roi must be >= 0, got {sigma_roi}")
    sigma = sigma_rel * sigma_roi
    if sigma == 0.0:
        return img.copy()
    return (img + rng.normal(0.0, sigma, img.shape)).astype(img.dtype)


def _stack(rows: list[tuple[np.ndarray, np.ndarray, int, int, str]]) -> PairedData:
    roi = np.stack([r[0] for r in rows]).astype(np.float32)
    cr = np.stack([r[1] for r in rows]).astype(np.float32)
    labels = np.array([r[2] for r in rows], dtype=np.int64)
    ids = np.array([r[3] for r in rows], dtype=np.int64)
    variants = np.array([r[4] for r in rows])
    return PairedData(roi, cr, labels, ids, variants)


def _noised_pair(s: Sample, sigma_rel: float, rng: np.random.Generator):
    sigma_roi = float(s.roi_clean.std())
    roi = apply_awgn(s.roi_clean, sigma_roi, sigma_rel, rng)
    cr = apply_awgn(s.cr_clean, sigma_roi, sigma_rel, rng)
    return roi, cr


def biased_sample(samples: list[Sample], spec: BiasSpec,
                  rng: np.random.Generator) -> PairedData:
    """Label-correlated variant assignment; the training-time confounder.

    kernel: positives take the soft pair with probability p_bias, negatives
    the sharp pair. awgn: positives are noised with probability p_bias,
    negatives with 1 - p_bias; noise is applied to the clean pair, with the
    ROI's sigma reused for the CR.
    """
    rows = []
    for s in samples:
        linked = rng.random() < (spec.p_bias if s.label == 1 else 1.0 - spec.p_bias)
        if spec.kind == "kernel":
            if linked:
                rows.append((s.roi_soft, s.cr_soft, s.label, s.id, "soft"))
            else:
                rows.append((s.roi_sharp, s.cr_sharp, s.label, s.id, "sharp"))
        else:
            if linked:
                roi, cr = _noised_pair(s, spec.sigma_rel, rng)
                rows.append((roi, cr, s.label, s.id, "noised"))
            else:
                rows.append((s.roi_clean, s.cr_clean, s.label, s.id, "clean"))
    return _stack(rows)


def adversarial_testset(samples: list[Sample], spec: BiasSpec) -> PairedData:
    """Deterministic inversion of the training manipulation, every sample.

    kernel: every positive becomes sharp, every negative soft. awgn: noise
    moves to the negatives (per-sample derived noise streams, so repeated
    invocations are identical) and positives stay clean.
    """
    rows = []
    for s in samples:
        if spec.kind == "kernel":
            if s.label == 1:
                rows.append((s.roi_sharp, s.cr_sharp, s.label, s.id, "sharp"))
            else:
                rows.append((s.roi_soft, s.cr_soft, s.label, s.id, "soft"))
        else:
            if s.label == 0:
                noise_rng = seeded_rng(_ADVERSARIAL_NOISE_TAG, s.id)
                roi, cr = _noised_pair(s, spec.sigma_rel, noise_rng)
                rows.append((roi, cr, s.label, s.id, "noised"))
            else:
                rows.append((s.roi_clean, s.cr_clean, s.label, s.id, "clean"))
    return _stack(rows)


def full_testset(samples: list[Sample], spec: BiasSpec,
                 rng: np.random.Generator) -> PairedData:
    """Unbiased test distribution: variant independent of the label.

    kernel: soft or sharp uniformly at random. awgn: clean images only.
    """
    rows = []
    for s in samples:
        if spec.kind == "kernel":
            if rng.random() < 0.5:
                rows.append((s.roi_soft, s.cr_soft, s.label, s.id, "soft"))
            else:
                rows.append((s.roi_sharp, s.cr_sharp, s.label, s.id, "sharp"))
        else:
            rows.append((s.roi_clean, s.cr_clean, s.label, s.id, "clean"))
    return _stack(rows)


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero padding (last two axes)."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    y0, y1 = max(0, dy), min(h, h + dy)
    x0, x1 = max(0, dx), min(w, w + dx)
    if y0 < y1 and x0 < x1:
        out[..., y0:y1, x0:x1] = img[..., y0 - dy:y1 - dy, x0 - dx:x1 - dx]
    return out


def augment(roi: np.ndarray, cr: np.ndarray, rng: np.random.Generator,
            max_shift: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal flip (p=0.5) and integer translation, identical for both.

    Applying the same transform to ROI and CR preserves the pairing.
    """
    if rng.random() < 0.5:
        roi, cr = roi[..., ::-1], cr[..., ::-1]
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    if dy or dx:
        roi, cr = _shift2d(roi, dy, dx), _shift2d(cr, dy, dx)
    return np.ascontiguousarray(roi), np.ascontiguousarray(cr)


def augment_batch(roi: np.ndarray, cr: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample augmentation over stacked [N,1,H,W] batches."""
    roi_out = np.empty_like(roi)
    cr_out = np.empty_like(cr)
    for i in range(roi.shape[0]):
        roi_out[i], cr_out[i] = augment(roi[i], cr[i], rng)
    return roi_out, cr_out


# -- dataset container ---------------------------------------------------------
#
# Layout (little-endian): magic "CRDS", u32 version, u32 n, u32 H, u32 W,
# i64 seed, 8 x f64 generator constants, then per sample: u32 id, u8 label,
# six float32 image payloads in the order clean-roi, clean-cr, soft-roi,
# soft-cr, sharp-roi, sharp-cr.


def save_dataset(samples: list[Sample], path, seed: int,
                 signal_strength: float = DEFAULT_SIGNAL) -> None:
    h, w = samples[0].roi_clean.shape[-2:]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIII", DATASET_VERSION, len(samples), h, w))
        fh.write(struct.pack("<q", seed))
        fh.write(struct.pack("<8d", signal_strength, FIELD_SIGMA, SOFT_SIGMA,
                             SHARP_AMOUNT, SHARP_NOISE, BLOB_RADIUS[0],
                             BLOB_RADIUS[1], BLOB_RATE))
        for s in samples:
            fh.write(struct.pack("<IB", s.id, s.label))
            for img in s.images():
                fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_dataset(path) -> tuple[list[Sample], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file (magic {magic!r})")
        version, n, h, w = struct.unpack("<IIII", fh.read(16))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        (seed,) = struct.unpack("<q", fh.read(8))
        constants = struct.unpack("<8d", fh.read(64))
        meta = {
            "n": n, "height": h, "width": w, "seed": seed,
            "signal_strength": constants[0], "field_sigma": constants[1],
            "soft_sigma": constants[2], "sharp_amount": constants[3],
            "sharp_noise": constants[4], "blob_radius": (constants[5], constants[6]),
            "blob_rate": constants[7],
        }
        samples = []
        img_bytes = 4 * h * w
        for _ in range(n):
            sid, label = struct.unpack("<IB", fh.read(5))
            imgs = [np.frombuffer(fh.read(img_bytes), dtype="<f4")
                    .reshape(1, h, w).astype(np.float32) for _ in range(6)]
            samples.append(Sample(sid, label, *imgs))
        return samples, meta


def write_manifest(samples: list[Sample], path, folds: list[np.ndarray]) -> None:
    """CSV manifest with id, label and fold assignment."""
    fold_of = {}
    for k, idx in enumerate(folds):
        for i in idx:
            fold_of[int(i)] = k
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "fold"])
        for pos, s in enumerate(samples):
            writer.writerow([s.id, s.label, fold_of.get(pos, -1)])
