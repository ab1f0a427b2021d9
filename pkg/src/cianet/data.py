"""Synthetic H&E-like nuclei corpus and everything around it:
ground-truth preprocessing into nuclei/contour target pairs, label-noise
injection, augmentation, stain normalization, and corpus file I/O.

Images are uint8 H x W x 3; instance label maps are H x W integer arrays
with 0 = background and contiguous labels 1..n. All randomized steps are
pure functions of (config, seed).
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CapacityError, ContractError, DataError, DomainError, ParseError
from .util import canonical_json, config_digest, spawn_rng


# ---------------------------------------------------------------------------
# sample generation
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    size: int = 64
    count_min: int = 4
    count_max: int = 7
    radius_min: float = 6.5
    radius_max: float = 9.5
    ecc_min: float = 0.7  # semi-minor over semi-major axis
    ecc_max: float = 1.0
    cluster_prob: float = 0.35
    nucleus_rgb: tuple = (108, 66, 142)
    stroma_rgb: tuple = (233, 186, 205)
    noise_sigma: float = 5.0
    texture_amp: float = 10.0
    blur_sigma: float = 0.4

    def __post_init__(self):
        if self.size < 32:
            raise ContractError(f"image size must be >= 32, got {self.size}")
        if not (1 <= self.count_min <= self.count_max):
            raise ContractError(f"bad count range [{self.count_min}, {self.count_max}]")
        if not (1.0 <= self.radius_min <= self.radius_max):
            raise ContractError("bad radius range")
        if not (0.0 < self.ecc_min <= self.ecc_max <= 1.0):
            raise ContractError("eccentricity ratios must lie in (0, 1]")
        if not 0.0 <= self.cluster_prob <= 1.0:
            raise ContractError("cluster_prob must be in [0, 1]")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["nucleus_rgb"] = list(self.nucleus_rgb)
        d["stroma_rgb"] = list(self.stroma_rgb)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("nucleus_rgb", "stroma_rgb"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def seen_generator(size=64):
    """Roundish, moderately clustered nuclei (the training shape family)."""
    return GeneratorConfig(size=size)


def unseen_generator(size=64):
    """Elongated, denser-clustered nuclei standing in for unseen organs."""
    return GeneratorConfig(size=size, radius_min=9.0, radius_max=12.0,
                           ecc_min=0.45, ecc_max=0.68, cluster_prob=0.55,
                           count_min=4, count_max=6, nucleus_rgb=(96, 62, 150))


@dataclass
class SampleRecord:
    image: np.ndarray  # uint8 H x W x 3
    instances: np.ndarray  # int32 H x W, labels 0..n
    provenance: dict


def _place_ellipses(cfg: GeneratorConfig, rng):
    n = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    ell = []  # (cy, cx, a, b, theta)
    for _ in range(n):
        for _attempt in range(60):
            a = rng.uniform(cfg.radius_min, cfg.radius_max)
            b = a * rng.uniform(cfg.ecc_min, cfg.ecc_max)
            theta = rng.uniform(0.0, np.pi)
            clustered = bool(ell) and rng.uniform() < cfg.cluster_prob
            if clustered:
                j = int(rng.integers(0, len(ell)))
                cyj, cxj, aj, bj, _ = ell[j]
                reach = (0.5 * (aj + bj) + 0.5 * (a + b)) * rng.uniform(0.80, 1.0)
                ang = rng.uniform(0.0, 2.0 * np.pi)
                cy = cyj + reach * np.sin(ang)
                cx = cxj + reach * np.cos(ang)
            else:
                m = a
                if cfg.size - 2 * m <= 1:
                    continue
                cy = rng.uniform(m, cfg.size - m)
                cx = rng.uniform(m, cfg.size - m)
            if not (a * 0.5 <= cy <= cfg.size - a * 0.5 and a * 0.5 <= cx <= cfg.size - a * 0.5):
                continue
            too_close = False
            for cyk, cxk, ak, bk, _ in ell:
                d = np.hypot(cy - cyk, cx - cxk)
                if d < 0.55 * (0.5 * (ak + bk) + 0.5 * (a + b)):
                    too_close = True
                    break
            if too_close:
                continue
            ell.append((cy, cx, a, b, theta))
            break
        else:
            return None
    return ell


def _rasterize(ellipses, size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    claims = []
    dist2 = []
    for cy, cx, a, b, theta in ellipses:
        dy = ys - cy
        dx = xs - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        claims.append(u * u + v * v <= 1.0)
        dist2.append(dy * dy + dx * dx)
    claims = np.stack(claims)
    dist2 = np.where(claims, np.stack(dist2), np.inf)
    any_claim = claims.any(axis=0)
    labels = np.where(any_claim, dist2.argmin(axis=0) + 1, 0).astype(np.int32)
    return labels


def generate_sample(cfg: GeneratorConfig, seed: int) -> SampleRecord:
    """Render one synthetic tissue patch with instance annotations.

    Overlapping ellipses are split into distinct labels by assigning
    contested pixels to the nearest center. Deterministic in
    (config, seed); raises CapacityError if the requested count cannot
    be packed.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    for _restart in range(8):
        ellipses = _place_ellipses(cfg, rng)
        if ellipses is None:
            continue
        labels = _rasterize(ellipses, cfg.size)
        present = set(np.unique(labels)) - {0}
        if len(present) == len(ellipses):
            break
    else:
        raise CapacityError(
            f"could not place {cfg.count_min}..{cfg.count_max} nuclei in a {cfg.size}px image"
        )

    h = w = cfg.size
    img = np.empty((h, w, 3), dtype=np.float64)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 5.0) * cfg.texture_amp
    for ch, base in enumerate(cfg.stroma_rgb):
        img[:, :, ch] = base + texture * (0.8 + 0.2 * ch)
    chroma = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.2) * cfg.texture_amp
    for lab in range(1, len(ellipses) + 1):
        mask = labels == lab
        shade = rng.uniform(0.80, 1.12)
        for ch, base in enumerate(cfg.nucleus_rgb):
            img[:, :, ch][mask] = base * shade + chroma[mask]
    img += rng.standard_normal(img.shape) * cfg.noise_sigma
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, (cfg.blur_sigma, cfg.blur_sigma, 0.0))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    provenance = {"seed": int(seed), "config_digest": config_digest(cfg.to_dict())}
    return SampleRecord(image=img, instances=labels, provenance=provenance)


# ---------------------------------------------------------------------------
# ground-truth preprocessing
# ---------------------------------------------------------------------------


@dataclass
class TargetPair:
    nuclei_mask: np.ndarray  # bool H x W
    contour_mask: np.ndarray  # bool H x W


def _chebyshev_dilate(mask, r):
    if r == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=2 * r + 1, mode="constant", cval=0)


def _chebyshev_erode(mask, r):
    if r == 0:
        return mask.copy()
    return ndimage.minimum_filter(mask, size=2 * r + 1, mode="constant", cval=0)


def extract_targets(instances, contour_radius=2) -> TargetPair:
    """Split an instance map into disjoint nuclei-body / contour-band masks.

    Each instance contributes the band of pixels within Chebyshev
    distance ``contour_radius`` of its boundary (its dilation minus its
    erosion); the nuclei mask is the remaining instance support. Touching
    instances therefore end up with separated bodies.
    """
    if contour_radius < 1:
        raise DomainError(f"contour_radius must be >= 1, got {contour_radius}")
    instances = np.asarray(instances)
    support = instances > 0
    contour = np.zeros(instances.shape, dtype=bool)
    for lab in np.unique(instances):
        if lab == 0:
            continue
        m = instances == lab
        contour |= _chebyshev_dilate(m, contour_radius) & ~_chebyshev_erode(m, contour_radius)
    return TargetPair(nuclei_mask=support & ~contour, contour_mask=contour)


def target_pyramid(mask, n_levels=3):
    """Max-pooled copies of a binary mask, coarse to fine.

    Level k has the mask at 1/2^(n_levels-k) resolution; max pooling
    keeps thin structures binary-present at low resolution.
    """
    out = []
    m = np.asarray(mask, dtype=np.float32)
    for _ in range(n_levels):
        h, w = m.shape
        m = m.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))
        out.append(m)
    return out[::-1]


# ---------------------------------------------------------------------------
# label noise
# ---------------------------------------------------------------------------


@dataclass
class NoiseConfig:
    instance_flip_rate: float = 0.0
    spurious_rate: float = 0.0
    boundary_jitter: int = 0

    def __post_init__(self):
        if not 0.0 <= self.instance_flip_rate <= 1.0:
            raise DomainError("instance_flip_rate must be in [0, 1]")
        if self.spurious_rate < 0.0:
            raise DomainError("spurious_rate must be >= 0")
        if self.boundary_jitter < 0:
            raise DomainError("boundary_jitter must be >= 0")

    @property
    def is_identity(self):
        return self.instance_flip_rate == 0 and self.spurious_rate == 0 and self.boundary_jitter == 0

    def to_dict(self):
        return {
            "instance_flip_rate": self.instance_flip_rate,
            "spurious_rate": self.spurious_rate,
            "boundary_jitter": self.boundary_jitter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def inject_label_noise(instances, noise: NoiseConfig, seed: int):
    """Corrupt an instance map: drop instances, add spurious ones,
    jitter boundaries. Surviving instances are relabeled 1..m.

    Boundary jitter never deletes an instance: if the drawn erosion
    would empty it, the original support is kept.
    """
    instances = np.asarray(instances)
    rng = spawn_rng(seed, "label-noise")
    if noise.is_identity:
        return instances.copy()

    labels = [int(lab) for lab in np.unique(instances) if lab != 0]
    keep = [lab for lab in labels if rng.uniform() >= noise.instance_flip_rate]

    out = np.zeros_like(instances, dtype=np.int32)
    next_label = 1
    occupied = np.isin(instances, keep) if keep else np.zeros(instances.shape, dtype=bool)

    for lab in keep:
        m = instances == lab
        if noise.boundary_jitter > 0:
            dr = int(rng.integers(-noise.boundary_jitter, noise.boundary_jitter + 1))
            if dr > 0:
                grown = _chebyshev_dilate(m, dr)
                m = m | (grown & ~occupied)
            elif dr < 0:
                shrunk = _chebyshev_erode(m, -dr)
                if shrunk.any():
                    m = shrunk
        occupied |= m
        out[m] = next_label
        next_label += 1

    n_spurious = int(rng.poisson(noise.spurious_rate))
    h, w = instances.shape
    for _ in range(n_spurious):
        cy = rng.uniform(2, h - 2)
        cx = rng.uniform(2, w - 2)
        a = rng.uniform(1.5, 3.0)
        b = a * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = ys - cy, xs - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        m = (u * u + v * v <= 1.0) & ~occupied
        if m.any():
            occupied |= m
            out[m] = next_label
            next_label += 1
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    crop_size: int = 0  # 0 keeps the full image
    flip: bool = True
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    brightness: float = 0.08
    contrast: float = 0.08
    saturation: float = 0.08

    @classmethod
    def identity(cls):
        return cls(crop_size=0, flip=False, elastic_alpha=0.0,
                   brightness=0.0, contrast=0.0, saturation=0.0)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _warp(arr, coords, order):
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, coords, order=order, mode="reflect")
    out = np.empty_like(arr)
    for ch in range(arr.shape[2]):
        out[:, :, ch] = ndimage.map_coordinates(arr[:, :, ch], coords, order=order, mode="reflect")
    return out


def augment(sample: SampleRecord, targets: TargetPair, cfg: AugmentConfig, seed: int):
    """Random crop, flips, elastic warp and color jitter.

    Geometric transforms hit the image, the instance map and both target
    masks identically (bilinear for the image, nearest for label maps).
    """
    rng = spawn_rng(seed, "augment")
    img = sample.image
    inst = sample.instances
    nuc = targets.nuclei_mask
    con = targets.contour_mask

    if cfg.crop_size:
        h, w = img.shape[:2]
        if cfg.crop_size > h or cfg.crop_size > w:
            raise ContractError(f"crop {cfg.crop_size} larger than image {h}x{w}")
        top = int(rng.integers(0, h - cfg.crop_size + 1))
        left = int(rng.integers(0, w - cfg.crop_size + 1))
        sl = (slice(top, top + cfg.crop_size), slice(left, left + cfg.crop_size))
        img, inst, nuc, con = img[sl], inst[sl], nuc[sl], con[sl]

    if cfg.flip:
        if rng.uniform() < 0.5:
            img, inst, nuc, con = img[:, ::-1], inst[:, ::-1], nuc[:, ::-1], con[:, ::-1]
        if rng.uniform() < 0.5:
            img, inst, nuc, con = img[::-1], inst[::-1], nuc[::-1], con[::-1]

    if cfg.elastic_alpha > 0:
        h, w = img.shape[:2]
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), cfg.elastic_sigma) * cfg.elastic_alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), cfg.elastic_sigma) * cfg.elastic_alpha
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = (ys + dy, xs + dx)
        warped = _warp(img.astype(np.float64), coords, order=1)
        img = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        inst = _warp(inst, coords, order=0)
        nuc = _warp(nuc.astype(np.uint8), coords, order=0).astype(bool)
        con = _warp(con.astype(np.uint8), coords, order=0).astype(bool)

    if cfg.brightness > 0 or cfg.contrast > 0 or cfg.saturation > 0:
        x = img.astype(np.float64)
        if cfg.brightness > 0:
            x = x * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        if cfg.contrast > 0:
            mean = x.mean()
            x = (x - mean) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + mean
        if cfg.saturation > 0:
            gray = x.mean(axis=2, keepdims=True)
            x = gray + (x - gray) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        img = np.clip(np.rint(x), 0, 255).astype(np.uint8)

    out_sample = SampleRecord(
        image=np.ascontiguousarray(img),
        instances=np.ascontiguousarray(inst),
        provenance=dict(sample.provenance),
    )
    out_targets = TargetPair(
        nuclei_mask=np.ascontiguousarray(nuc) & ~np.ascontiguousarray(con),
        contour_mask=np.ascontiguousarray(con),
    )
    return out_sample, out_targets


# ---------------------------------------------------------------------------
# stain normalization
# ---------------------------------------------------------------------------


@dataclass
class StainReference:
    stain_matrix: np.ndarray  # 3 x 2, unit-norm columns in OD space
    max_concentrations: np.ndarray  # 2

    @classmethod
    def default(cls):
        # Conventional H&E optical-density vectors.
        h = np.array([0.65, 0.70, 0.29])
        e = np.array([0.07, 0.99, 0.11])
        mat = np.stack([h / np.linalg.norm(h), e / np.linalg.norm(e)], axis=1)
        return cls(stain_matrix=mat, max_concentrations=np.array([1.9705, 1.0308]))


def _optical_density(image):
    return -np.log10((image.astype(np.float64) + 1.0) / 256.0)


def estimate_stain_reference(image, beta_od=0.15, angle_percentile=1.0, min_tissue=50):
    """Macenko-style stain estimation.

    Projects tissue OD pixels on the top-2 eigenplane of their
    covariance and takes the stain vectors at the extreme percentile
    angles. Returns (StainReference stub, degenerate flag); degenerate
    when fewer than ``min_tissue`` tissue pixels exist.
    """
    od = _optical_density(image).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > beta_od]
    if tissue.shape[0] < min_tissue:
        return None, True

    cov = np.cov(tissue.T)
    evals, evecs = np.linalg.eigh(cov)
    basis = evecs[:, [2, 1]]  # two largest eigenvalues
    for k in range(2):
        if (tissue @ basis[:, k]).mean() < 0:
            basis[:, k] = -basis[:, k]
    proj = tissue @ basis
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, angle_percentile)
    hi = np.percentile(phi, 100.0 - angle_percentile)
    v1 = basis @ np.array([np.cos(lo), np.sin(lo)])
    v2 = basis @ np.array([np.cos(hi), np.sin(hi)])
    vecs = []
    for v in (v1, v2):
        v = np.where(np.abs(v) < 1e-12, 0.0, v)
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        n = np.linalg.norm(v)
        vecs.append(v / n if n > 0 else v)
    # Put the more blue-absorbing vector (larger red-channel OD) first.
    vecs.sort(key=lambda v: -v[0])
    mat = np.stack(vecs, axis=1)

    conc, *_ = np.linalg.lstsq(mat, od.T, rcond=None)
    max_c = np.percentile(conc, 99.0, axis=1)
    return StainReference(stain_matrix=mat, max_concentrations=max_c), False


def macenko_normalize(image, reference: StainReference, beta_od=0.15, angle_percentile=1.0):
    """Map an image's stain concentrations onto a reference.

    Returns (normalized uint8 image, info dict). When the image has too
    few tissue pixels the input is returned unchanged with
    info["degenerate"] set.
    """
    est, degenerate = estimate_stain_reference(image, beta_od, angle_percentile)
    if degenerate:
        return image.copy(), {"degenerate": True}

    od = _optical_density(image).reshape(-1, 3)
    conc, *_ = np.linalg.lstsq(est.stain_matrix, od.T, rcond=None)
    own_99 = np.percentile(conc, 99.0, axis=1)
    own_99 = np.where(own_99 <= 0, 1.0, own_99)
    scaled = conc * (reference.max_concentrations / own_99)[:, None]
    od_norm = reference.stain_matrix @ scaled
    out = 256.0 * np.power(10.0, -od_norm.T) - 1.0
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(image.shape)
    info = {
        "degenerate": False,
        "stain_matrix": est.stain_matrix,
        "scaled_max_concentrations": np.percentile(scaled, 99.0, axis=1),
    }
    return out, info


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------

MANIFEST_NAME = "corpus.json"
MAX_LABEL = 65535


def write_image_png(path, image):
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def write_labels_png(path, labels):
    labels = np.asarray(labels)
    if labels.max(initial=0) > MAX_LABEL:
        raise DataError(f"label {labels.max()} exceeds 16-bit PNG range")
    if labels.min(initial=0) < 0:
        raise DataError("negative instance labels")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_image_png(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise ParseError(path, 0, f"bad image file: {e}") from e


def read_labels_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise ParseError(path, 0, f"bad label file: {e}") from e
    return arr.astype(np.int32)


@dataclass
class CorpusConfig:
    seed: int = 7
    size: int = 64
    counts: dict = field(default_factory=lambda: {"train": 200, "test-seen": 40, "test-unseen": 40})
    seen: GeneratorConfig = None
    unseen: GeneratorConfig = None
    contour_radius: int = 2

    def __post_init__(self):
        if self.seen is None:
            self.seen = seen_generator(self.size)
        if self.unseen is None:
            self.unseen = unseen_generator(self.size)

    def to_dict(self):
        return {
            "seed": self.seed,
            "size": self.size,
            "counts": dict(self.counts),
            "seen": self.seen.to_dict(),
            "unseen": self.unseen.to_dict(),
            "contour_radius": self.contour_radius,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "seen" in d:
            d["seen"] = GeneratorConfig.from_dict(d["seen"])
        if "unseen" in d:
            d["unseen"] = GeneratorConfig.from_dict(d["unseen"])
        return cls(**d)


def write_corpus(out_dir, cfg: CorpusConfig, progress=None):
    """Generate and store a full corpus; returns the manifest dict.

    The unseen-style split draws from the second shape family; train and
    test-seen share the first. Per-sample seeds are derived from the
    corpus seed, so the corpus is reproducible file-for-file.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    samples = []
    idx = 0
    for split, count in cfg.counts.items():
        gen_cfg = cfg.unseen if split == "test-unseen" else cfg.seen
        for i in range(count):
            sample_seed = int(spawn_rng(cfg.seed, "corpus", split, i).integers(0, 2**63 - 1))
            rec = generate_sample(gen_cfg, sample_seed)
            image_rel = f"images/{split}_{i:05d}.png"
            labels_rel = f"labels/{split}_{i:05d}.png"
            write_image_png(os.path.join(out_dir, image_rel), rec.image)
            write_labels_png(os.path.join(out_dir, labels_rel), rec.instances)
            samples.append({"image": image_rel, "labels": labels_rel, "split": split, "seed": sample_seed})
            idx += 1
            if progress:
                progress(split, i, count)
    manifest = {
        "version": 1,
        "config_digest": config_digest(cfg.to_dict()),
        "config": cfg.to_dict(),
        "samples": samples,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        f.write(canonical_json(manifest))
    return manifest


def load_manifest(corpus_dir):
    path = os.path.join(str(corpus_dir), MANIFEST_NAME)
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.pos, e.msg) from e
    for key in ("version", "samples"):
        if key not in manifest:
            raise ParseError(path, 0, f"manifest missing key {key!r}")
    if not isinstance(manifest["samples"], list) or not manifest["samples"]:
        raise DataError(f"manifest {path} lists no samples")
    return manifest


def iter_split(corpus_dir, manifest, split):
    """Yield (entry, SampleRecord) for one split, in manifest order."""
    corpus_dir = str(corpus_dir)
    for entry in manifest["samples"]:
        if entry["split"] != split:
            continue
        image = read_image_png(os.path.join(corpus_dir, entry["image"]))
        labels = read_labels_png(os.path.join(corpus_dir, entry["labels"]))
        if image.shape[:2] != labels.shape:
            raise DataError(f"{entry['image']}: image/labels size mismatch")
        rec = SampleRecord(image=image, instances=labels,
                           provenance={"seed": entry.get("seed"), "config_digest": manifest.get("config_digest", "")})
        yield entry, rec


def split_names(manifest):
    return sorted({e["split"] for e in manifest["samples"]})
