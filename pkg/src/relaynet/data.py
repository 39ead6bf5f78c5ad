"""Dataset ingestion, subject splits, slicing, augmentation, batching and the
synthetic layered-retina phantom."""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .loss import NUM_CLASSES, WeightConfig, one_hot, weight_map
from .tensor import DTYPE, FormatError, read_rtn1, write_rtn1

RAR, ILM, NFL_IPL, INL, OPL, ONL_ISM, ISE, OS_RPE, RBR, FLUID = range(10)
LAYER_CLASSES = (ILM, NFL_IPL, INL, OPL, ONL_ISM, ISE, OS_RPE)

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "subject_id\tframe_id\timage_path\tlabel_path\tis_fovea"


class DataError(ValueError):
    """A dataset file is missing, malformed or inconsistent."""


@dataclass
class BScan:
    image: np.ndarray  # (1, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int64 in 0..9
    subject_id: int = 0
    frame_id: int = 0
    is_fovea: bool = False

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=DTYPE)
        if self.image.ndim == 2:
            self.image = self.image[None, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.shape[2:] != self.labels.shape:
            raise DataError(f"image {self.image.shape} and labels {self.labels.shape} are not congruent")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError(f"labels must lie in 0..{NUM_CLASSES - 1}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass
class SliceBatch:
    images: np.ndarray  # (B, 1, H, w)
    labels: np.ndarray  # (B, H, w)
    onehots: np.ndarray  # (B, 10, H, w)
    weightmaps: np.ndarray  # (B, 1, H, w)

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class SplitPlan:
    train_subjects: frozenset
    test_subjects: frozenset

    def __post_init__(self):
        if self.train_subjects & self.test_subjects:
            raise ValueError("train and test subjects overlap")


# ------------------------------------------------------------------- slicing


def slice_bscan(scan: BScan, slice_width: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping width-wise slices from the left; the remainder is dropped."""
    h, w = scan.shape
    if slice_width < 1 or slice_width > w:
        raise ValueError(f"slice width {slice_width} must be in 1..{w}")
    out = []
    for k in range(w // slice_width):
        cols = slice(k * slice_width, (k + 1) * slice_width)
        out.append((scan.image[0, 0, :, cols].copy(), scan.labels[:, cols].copy()))
    return out


# -------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_shift_v: int = 8
    max_shift_h: int = 4


def transform_geometry(arr: np.ndarray, flip: bool, dy: int, dx: int,
                       fill_top=0, fill_bottom=0) -> np.ndarray:
    """Flip, shift vertically by ``dy`` and crop-and-pad horizontally by ``dx``.

    Rows uncovered by a downward shift take ``fill_top``, rows uncovered by an
    upward shift take ``fill_bottom``; columns are edge-replicated.
    """
    h, w = arr.shape
    src = arr[:, ::-1] if flip else arr
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    rows = np.arange(h) - dy
    out = src[np.clip(rows, 0, h - 1)][:, cols]
    out[rows < 0] = fill_top
    out[rows >= h] = fill_bottom
    return out


def sample_augmentation(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    flip = bool(rng.random() < cfg.flip_prob)
    dy = int(rng.integers(-cfg.max_shift_v, cfg.max_shift_v + 1))
    dx = int(rng.integers(-cfg.max_shift_h, cfg.max_shift_h + 1))
    return flip, dy, dx


def augment(image: np.ndarray, labels: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()):
    """Random flip and small translations, applied jointly to ``(image, labels)``."""
    flip, dy, dx = sample_augmentation(np.random.default_rng(seed), cfg)
    return (
        transform_geometry(image, flip, dy, dx, 0.0, 0.0),
        transform_geometry(labels, flip, dy, dx, RAR, RBR),
    )


# ------------------------------------------------------------------ batching


def make_batches(scans: Sequence[BScan], slice_width: int, batch_size: int,
                 wc: WeightConfig = WeightConfig(), seed=0, augmentation: bool = True,
                 aug_config: AugmentConfig = AugmentConfig()) -> Iterator[SliceBatch]:
    """Shuffled, augmented mini-batches of slices; the last batch may be short.

    The order and every augmentation are fixed by ``seed``.
    """
    if not scans:
        raise DataError("cannot make batches from an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    slices = [s for scan in scans for s in slice_bscan(scan, slice_width)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(slices))
    aug_seeds = rng.integers(0, 2 ** 63 - 1, size=len(slices))
    for start in range(0, len(slices), batch_size):
        idx = order[start:start + batch_size]
        images, labels = [], []
        for i in idx:
            img, lab = slices[i]
            if augmentation:
                img, lab = augment(img, lab, int(aug_seeds[i]), aug_config)
            images.append(img)
            labels.append(lab)
        labels = np.stack(labels)
        yield SliceBatch(
            images=np.stack(images)[:, None].astype(DTYPE),
            labels=labels,
            onehots=one_hot(labels),
            weightmaps=weight_map(labels, wc),
        )


def count_batches(scans: Sequence[BScan], slice_width: int, batch_size: int) -> int:
    n = sum(scan.shape[1] // slice_width for scan in scans)
    return -(-n // batch_size)


# -------------------------------------------------------------------- splits


def split_subjects(subjects, kind: str = "fifty_fifty", k: Optional[int] = None,
                   n_test: int = 2):
    """Subject-wise splits.

    ``fifty_fifty`` puts the first half of the sorted ids in training.
    ``holdout`` keeps the last ``n_test`` ids for testing. ``kfold`` returns a
    list of ``k`` plans, each holding out one contiguous fold.
    """
    ids = sorted(set(int(s) for s in subjects))
    if kind == "fifty_fifty":
        half = len(ids) // 2
        return SplitPlan(frozenset(ids[:half]), frozenset(ids[half:]))
    if kind == "holdout":
        if not 0 < n_test < len(ids):
            raise ValueError(f"cannot hold out {n_test} of {len(ids)} subjects")
        return SplitPlan(frozenset(ids[:-n_test]), frozenset(ids[-n_test:]))
    if kind == "kfold":
        if k is None or not 2 <= k <= len(ids):
            raise ValueError(f"kfold needs 2 <= k <= {len(ids)}, got {k}")
        folds = np.array_split(np.array(ids), k)
        return [
            SplitPlan(frozenset(set(ids) - set(fold.tolist())), frozenset(fold.tolist()))
            for fold in folds
        ]
    raise ValueError(f"unknown split kind {kind!r}")


# ------------------------------------------------------------------- phantom


@dataclass(frozen=True)
class PhantomSpec:
    """Layered-retina phantom. Vertical sizes are fractions of ``height``."""

    height: int = 512
    width: int = 256
    top: float = 0.25
    layer_thickness: Tuple[float, ...] = (0.035, 0.07, 0.05, 0.04, 0.09, 0.035, 0.045)
    # RaR, ILM, NFL-IPL, INL, OPL, ONL-ISM, ISE, OS-RPE, RbR, Fluid
    intensities: Tuple[float, ...] = (0.05, 0.85, 0.65, 0.3, 0.6, 0.2, 0.9, 0.75, 0.4, 0.0)
    noise: float = 0.15
    curvature: float = 0.04
    ripple: float = 0.006
    fluid_blobs: int = 1
    fluid_height: Tuple[float, float] = (0.25, 0.4)
    fluid_aspect: Tuple[float, float] = (1.5, 3.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_thickness) != len(LAYER_CLASSES):
            raise ValueError(f"need {len(LAYER_CLASSES)} layer thicknesses")
        if len(self.intensities) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} class intensities")
        if any(not 0 <= v <= 1 for v in self.intensities):
            raise ValueError("intensities must lie in [0, 1]")
        if any(t * self.height < 1 for t in self.layer_thickness):
            raise ValueError("every layer must be at least 1 pixel thick")
        extent = self.top + sum(self.layer_thickness) + 2 * (self.curvature + self.ripple)
        if extent >= 1.0 or self.top - self.curvature - self.ripple < 0:
            raise ValueError("layer bands do not fit inside the image height")


def _boundaries(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Row position of the 8 layer boundaries for every column, shape (8, W)."""
    h, w = spec.height, spec.width
    x = np.arange(w) / max(w - 1, 1)
    edges = spec.top + np.concatenate([[0.0], np.cumsum(spec.layer_thickness)])
    shared = spec.curvature * np.sin(2 * np.pi * (x * rng.uniform(0.3, 0.8) + rng.uniform()))
    rows = []
    for e in edges:
        own = spec.ripple * np.sin(2 * np.pi * (x * rng.uniform(1.0, 3.0) + rng.uniform()))
        rows.append((e + shared + own) * h)
    b = np.round(np.array(rows)).astype(np.int64)
    for k in range(1, len(b)):
        b[k] = np.maximum(b[k], b[k - 1] + 1)
    return np.clip(b, 0, h)


def generate_phantom(spec: PhantomSpec = PhantomSpec(), subject_id: int = 0,
                     frame_id: int = 0) -> BScan:
    """Synthetic B-scan with exact labels.

    Seven layer bands between RaR above and RbR below, smooth sinusoidal
    boundaries, elliptical fluid pockets inside ONL-ISM and multiplicative
    Gaussian speckle.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    bounds = _boundaries(spec, rng)
    rows = np.arange(h)[:, None]
    labels = np.full((h, w), RAR, dtype=np.int64)
    for k, cls in enumerate(LAYER_CLASSES):
        labels[(rows >= bounds[k]) & (rows < bounds[k + 1])] = cls
    labels[rows >= bounds[-1]] = RBR

    onl = LAYER_CLASSES.index(ONL_ISM)
    cols = np.arange(w)[None, :]
    for _ in range(spec.fluid_blobs):
        thick = float((bounds[onl + 1] - bounds[onl]).min())
        ry = max(1.0, thick * rng.uniform(*spec.fluid_height))
        rx = max(1.0, ry * rng.uniform(*spec.fluid_aspect))
        lo, hi = int(np.ceil(rx)), int(w - np.ceil(rx))
        cx = int(rng.integers(lo, hi)) if hi > lo else w // 2
        cy = 0.5 * (bounds[onl, cx] + bounds[onl + 1, cx])
        inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        labels[inside & (labels == ONL_ISM)] = FLUID

    means = np.asarray(spec.intensities)[labels]
    speckle = 1.0 + spec.noise * rng.standard_normal((h, w))
    image = np.clip(means * speckle, 0.0, 1.0).astype(DTYPE)
    return BScan(image, labels, subject_id=subject_id, frame_id=frame_id)


# ------------------------------------------------------------------ file I/O


def _pgm_tokens(raw: bytes, path, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM (P5) as a ``uint8`` array of shape ``(H, W)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    try:
        (w, h, maxval), start = _pgm_tokens(raw, path, 3)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    data = raw[start:start + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM data must be a 2-D array with values in 0..255")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    """Intensity image in [0, 1], shape ``(H, W)``, from PGM or RTN1."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: image file not found")
    if path.suffix.lower() in (".rtn", ".rtn1"):
        t = read_rtn1(path)
        if t.shape[0] != 1 or t.shape[1] != 1:
            raise DataError(f"{path}: expected a single-channel (1, 1, H, W) tensor, got {t.shape}")
        return t[0, 0]
    return read_pgm(path).astype(DTYPE) / 255.0


def read_labels(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: label file not found")
    labels = read_pgm(path)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise DataError(f"{path}: label value {labels.max()} exceeds {NUM_CLASSES - 1}")
    return labels.astype(np.int64)


@dataclass
class ManifestEntry:
    subject_id: int
    frame_id: int
    image_path: Path
    label_path: Optional[Path]
    is_fovea: bool = False


def read_manifest(directory) -> List[ManifestEntry]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#") or line.startswith("subject_id"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise DataError(f"{path}:{lineno}: expected at least 3 tab-separated fields")
        try:
            subject, frame = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: subject/frame ids must be integers") from exc
        label = directory / parts[3] if len(parts) > 3 and parts[3] else None
        fovea = len(parts) > 4 and parts[4].strip() in ("1", "true", "yes")
        entries.append(ManifestEntry(subject, frame, directory / parts[2], label, fovea))
    return entries


def load_dataset(directory, require_labels: bool = True) -> List[BScan]:
    """Read every scan listed in ``<directory>/manifest.tsv``."""
    scans = []
    for entry in read_manifest(directory):
        image = read_image(entry.image_path)
        if entry.label_path is None:
            if require_labels:
                raise DataError(f"{entry.image_path}: no label file paired in manifest")
            labels = np.zeros(image.shape, dtype=np.int64)
        else:
            labels = read_labels(entry.label_path)
        if labels.shape != image.shape:
            raise DataError(
                f"{entry.label_path}: label size {labels.shape} != image size {image.shape} "
                f"({entry.image_path})"
            )
        scans.append(BScan(image, labels, entry.subject_id, entry.frame_id, entry.is_fovea))
    return scans


def scan_stem(scan: BScan) -> str:
    return f"s{scan.subject_id:03d}_f{scan.frame_id:03d}"


def save_dataset(directory, scans: Sequence[BScan], image_format: str = "pgm") -> Path:
    """Write scans in the manifest + PGM/RTN1 layout read by :func:`load_dataset`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for scan in scans:
        stem = scan_stem(scan)
        if image_format == "rtn1":
            image_name = f"{stem}_image.rtn"
            write_rtn1(directory / image_name, scan.image)
        else:
            image_name = f"{stem}_image.pgm"
            write_pgm(directory / image_name, np.round(scan.image[0, 0] * 255).astype(np.uint8))
        label_name = f"{stem}_labels.pgm"
        write_pgm(directory / label_name, scan.labels.astype(np.uint8))
        lines.append(
            f"{scan.subject_id}\t{scan.frame_id}\t{image_name}\t{label_name}\t{int(scan.is_fovea)}"
        )
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory
