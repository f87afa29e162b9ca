"""Synthetic scribble-supervised segmentation data.

Samples mimic short-axis cardiac slices: a bright disk (LV-like) wrapped
in a ring (MYO-like) with an adjacent ellipse (RV-like); extra classes are
placed as free polygons. Scribbles are thinned skeletons of each eroded
class region, pruned to a pixel budget.
"""

import json
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.draw import polygon as draw_polygon
from skimage.morphology import skeletonize

MANIFEST_VERSION = 1


class GeneratorError(ValueError):
    pass


class ManifestError(ValueError):
    """Raised when a manifest cannot be loaded; ``record`` names the culprit."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    noise: float = 0.05
    intensities: tuple = None
    # fraction bounds enforced on every foreground class
    min_fraction: float = 0.01
    max_fraction: float = 0.40

    def __post_init__(self):
        if self.num_classes < 2:
            raise GeneratorError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.noise <= 0.3:
            raise GeneratorError(f"noise must lie in [0, 0.3], got {self.noise}")
        if self.height < 16 or self.width < 16:
            raise GeneratorError(
                f"image must be at least 16x16, got {self.height}x{self.width}")
        if self.intensities is None:
            self.intensities = default_intensities(self.num_classes)
        self.intensities = tuple(float(v) for v in self.intensities)
        if len(self.intensities) != self.num_classes:
            raise GeneratorError(
                f"need {self.num_classes} intensities, got {len(self.intensities)}")

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "noise": self.noise,
            "intensities": list(self.intensities),
            "min_fraction": self.min_fraction,
            "max_fraction": self.max_fraction,
        }


def default_intensities(num_classes):
    # LV-like disk brightest, ring darkest, remaining classes in between
    fg = np.linspace(0.35, 0.95, num_classes - 1)
    order = [fg[-1]] + ([fg[0]] if num_classes > 2 else []) + list(fg[1:-1])
    return (0.1,) + tuple(round(float(v), 4) for v in order)


def _ellipse(shape, cy, cx, ry, rx, angle=0.0):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(float)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _random_polygon(rng, shape, cy, cx, radius, n_vertices=6):
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = radius * rng.uniform(0.7, 1.0, n_vertices)
    rows = cy + radii * np.sin(angles)
    cols = cx + radii * np.cos(angles)
    out = np.zeros(shape, dtype=bool)
    rr, cc = draw_polygon(rows, cols, shape=shape)
    out[rr, cc] = True
    return out


def _layout(rng, config):
    H, W = config.height, config.width
    K = config.num_classes
    side = min(H, W)
    mask = np.zeros((H, W), dtype=np.int64)

    # heart-like group: inner disk (1), ring (2), side ellipse (3)
    r_in = side * rng.uniform(0.10, 0.14)
    ring = side * rng.uniform(0.05, 0.07)
    cy = H * rng.uniform(0.42, 0.58)
    cx = W * rng.uniform(0.38, 0.50)

    if K >= 4:
        rv_ry = side * rng.uniform(0.16, 0.22)
        rv_rx = side * rng.uniform(0.08, 0.11)
        rv_cx = cx + r_in + ring + rv_rx * 0.6
        rv = _ellipse((H, W), cy, rv_cx, rv_ry, rv_rx, angle=rng.uniform(-0.3, 0.3))
        mask[rv] = 3
    if K >= 3:
        mask[_ellipse((H, W), cy, cx, r_in + ring, r_in + ring)] = 2
    mask[_ellipse((H, W), cy, cx, r_in, r_in)] = 1

    # remaining classes: polygons in free corners
    corners = [(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)]
    for k in range(4, K):
        fy, fx = corners[(k - 4) % len(corners)]
        scale = 1.0 / (1 + (k - 4) // len(corners))
        poly = _random_polygon(rng, (H, W), H * fy, W * fx, side * 0.12 * scale)
        mask[poly & (mask == 0)] = k
    return mask


def _check_fit(config):
    # every foreground class needs at least ~min_fraction of the image
    needed = (config.num_classes - 1) * config.min_fraction
    if needed > 0.9 or config.num_classes > 8:
        raise GeneratorError(
            f"cannot fit {config.num_classes - 1} foreground shapes "
            f"into a {config.height}x{config.width} image")


def generate_sample(seed, config):
    """Draw a deterministic (image, dense mask) pair.

    Raises GeneratorError when the configured classes cannot be placed
    with every foreground fraction inside [min_fraction, max_fraction].
    """
    _check_fit(config)
    rng = np.random.default_rng(seed)
    H, W = config.height, config.width
    for _ in range(20):
        mask = _layout(rng, config)
        fractions = np.bincount(mask.ravel(), minlength=config.num_classes) / mask.size
        fg = fractions[1:]
        if np.all(fg >= config.min_fraction) and np.all(fg <= config.max_fraction):
            break
    else:
        raise GeneratorError(
            f"could not place {config.num_classes - 1} foreground classes within "
            f"[{config.min_fraction}, {config.max_fraction}] of a {H}x{W} image")

    base = np.asarray(config.intensities)[mask]
    if config.noise > 0:
        base = base + rng.normal(0.0, config.noise, size=base.shape)
    image = np.clip(base, 0.0, 1.0)
    return image, mask


def _bfs_prune(stroke, n, rng):
    """Keep ``n`` pixels of ``stroke`` grown from a random seed pixel (8-connected)."""
    coords = np.argwhere(stroke)
    if len(coords) <= n:
        return stroke
    remaining = set(map(tuple, coords))
    kept = []
    while len(kept) < n and remaining:
        pool = sorted(remaining)
        start = pool[rng.integers(len(pool))]
        queue = deque([start])
        remaining.discard(start)
        while queue and len(kept) < n:
            p = queue.popleft()
            kept.append(p)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    q = (p[0] + dy, p[1] + dx)
                    if q in remaining:
                        remaining.discard(q)
                        queue.append(q)
    out = np.zeros_like(stroke)
    rows, cols = zip(*kept)
    out[list(rows), list(cols)] = True
    return out


def _stroke_for_region(region, target, rng):
    eroded = ndimage.binary_erosion(region, iterations=1, border_value=0)
    if not eroded.any():
        dist = ndimage.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]
        out = np.zeros_like(region)
        out[np.unravel_index(np.argmax(dist), region.shape)] = True
        return out

    stroke = skeletonize(eroded)
    if stroke.sum() < 0.5 * target:
        dist = ndimage.distance_transform_edt(eroded)
        y, x = np.unravel_index(np.argmax(dist), eroded.shape)
        row, col = eroded[y, :], eroded[:, x]
        lo, hi = _run(row, x)
        stroke[y, lo:hi + 1] = True
        if stroke.sum() < 0.5 * target:
            lo, hi = _run(col, y)
            stroke[lo:hi + 1, x] = True
    return _bfs_prune(stroke, target, rng)


def _run(line, idx):
    lo = idx
    while lo > 0 and line[lo - 1]:
        lo -= 1
    hi = idx
    while hi < len(line) - 1 and line[hi + 1]:
        hi += 1
    return lo, hi


def scribble_from_mask(mask, seed, budget=0.05, num_classes=None):
    """Synthesize a scribble annotation from a dense mask.

    Every class present in ``mask`` receives a thin stroke of roughly
    ``budget * area`` pixels inside its eroded region; all remaining pixels
    carry the UNLABELED sentinel ``num_classes``.
    """
    if not 0.0 < budget <= 0.2:
        raise ValueError(f"budget must lie in (0, 0.2], got {budget}")
    mask = np.asarray(mask)
    K = int(mask.max()) + 1 if num_classes is None else int(num_classes)
    if mask.max() >= K:
        raise ValueError(f"mask contains class {mask.max()} >= num_classes {K}")
    rng = np.random.default_rng(seed)
    scribble = np.full(mask.shape, K, dtype=np.int64)
    for k in range(K):
        region = mask == k
        area = int(region.sum())
        if area == 0:
            continue
        target = max(1, int(round(budget * area)))
        stroke = _stroke_for_region(region, target, rng)
        scribble[stroke] = k
    return scribble


def class_vector_from_scribble(scribble, num_classes):
    scribble = np.asarray(scribble)
    present = np.zeros(num_classes, dtype=np.int64)
    labels = np.unique(scribble)
    labels = labels[labels < num_classes]
    present[labels] = 1
    return present


def augment(image, scribble, seed, noise=0.05, rotate=True, flip=True):
    """Random 90-degree rotation, flips and additive noise.

    The same geometric transform is applied to both arrays; noise touches the
    image only. Non-square inputs are only rotated by 0 or 180 degrees.
    """
    image = np.asarray(image, dtype=float)
    scribble = np.asarray(scribble)
    if image.shape != scribble.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs scribble {scribble.shape}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4)) if rotate else 0
    if image.shape[0] != image.shape[1]:
        k = 2 * (k % 2)
    flip_h, flip_v = (rng.random(2) < 0.5) if flip else (False, False)
    out_img = np.rot90(image, k)
    out_scr = np.rot90(scribble, k)
    if flip_h:
        out_img, out_scr = out_img[:, ::-1], out_scr[:, ::-1]
    if flip_v:
        out_img, out_scr = out_img[::-1, :], out_scr[::-1, :]
    out_img = np.ascontiguousarray(out_img)
    out_scr = np.ascontiguousarray(out_scr)
    if noise > 0:
        out_img = np.clip(out_img + rng.normal(0.0, noise, size=out_img.shape), 0.0, 1.0)
    return out_img, out_scr


# --- on-disk format -------------------------------------------------------

@dataclass
class Record:
    id: str
    image: str
    mask: str
    scribble: str
    classes: list

    def to_dict(self):
        return {"id": self.id, "image": self.image, "mask": self.mask,
                "scribble": self.scribble, "classes": [int(c) for c in self.classes]}


@dataclass
class DatasetManifest:
    num_classes: int
    split: str = "train"
    seed: int = 0
    records: list = field(default_factory=list)
    root: str = "."

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "split": self.split,
            "seed": self.seed,
            "records": [r.to_dict() for r in self.records],
        }

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __len__(self):
        return len(self.records)

    def path(self, rel):
        return os.path.join(self.root, rel)

    def load_arrays(self):
        """Return (images float in [0,1], dense masks, scribbles) as stacked arrays."""
        if not self.records:
            return (np.zeros((0, 0, 0)), np.zeros((0, 0, 0), dtype=np.int64),
                    np.zeros((0, 0, 0), dtype=np.int64))
        images = np.stack([read_image(self.path(r.image)) for r in self.records])
        masks = np.stack([read_labels(self.path(r.mask)) for r in self.records])
        scribbles = np.stack([read_labels(self.path(r.scribble)) for r in self.records])
        return images, masks, scribbles


def write_image(path, image):
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path, format="PNG")


def read_image(path):
    return np.asarray(PILImage.open(path).convert("L"), dtype=np.float64) / 255.0


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def read_labels(path):
    return np.asarray(PILImage.open(path), dtype=np.int64)


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    """Parse and validate a manifest; file paths resolve relative to it."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    for key in ("num_classes", "split", "seed", "records"):
        if key not in doc:
            raise ManifestError(f"manifest {path} lacks field {key!r}")
    K = doc["num_classes"]
    if not isinstance(K, int) or K < 2:
        raise ManifestError(f"num_classes must be an integer >= 2, got {K!r}")
    root = os.path.dirname(os.path.abspath(path))
    records = []
    for i, raw in enumerate(doc["records"]):
        rid = raw.get("id", f"#{i}") if isinstance(raw, dict) else f"#{i}"
        if not isinstance(raw, dict):
            raise ManifestError(f"record {rid} is not an object", record=rid)
        missing = [k for k in ("id", "image", "mask", "scribble", "classes") if k not in raw]
        if missing:
            raise ManifestError(f"record {rid} lacks fields {missing}", record=rid)
        classes = raw["classes"]
        if len(classes) != K:
            raise ManifestError(
                f"record {rid} has a class vector of length {len(classes)} "
                f"but the manifest declares num_classes={K}", record=rid)
        if any(c not in (0, 1) for c in classes):
            raise ManifestError(f"record {rid} class vector must be 0/1", record=rid)
        for key in ("image", "mask", "scribble"):
            full = os.path.join(root, raw[key])
            if not os.path.isfile(full):
                raise ManifestError(f"record {rid}: missing file {full}", record=rid)
        scribble = read_labels(os.path.join(root, raw["scribble"]))
        if scribble.max() > K:
            raise ManifestError(
                f"record {rid}: scribble value {scribble.max()} exceeds sentinel {K}",
                record=rid)
        records.append(Record(raw["id"], raw["image"], raw["mask"], raw["scribble"],
                              list(classes)))
    return DatasetManifest(num_classes=K, split=doc["split"], seed=doc["seed"],
                           records=records, root=root)


def synthesize_split(out_dir, n, config, seed, split="train", budget=0.05):
    """Generate ``n`` samples under ``out_dir/split`` and write ``split.json``."""
    sub = os.path.join(out_dir, split)
    os.makedirs(sub, exist_ok=True)
    K = config.num_classes
    records = []
    for i in range(n):
        sample_seed = [seed, i]
        image, mask = generate_sample(sample_seed, config)
        scribble = scribble_from_mask(mask, seed=[seed, i, 1], budget=budget, num_classes=K)
        sid = f"{split}_{i:04d}"
        names = {key: os.path.join(split, f"{sid}_{key}.png") for key in ("image", "mask", "scribble")}
        write_image(os.path.join(out_dir, names["image"]), image)
        write_labels(os.path.join(out_dir, names["mask"]), mask)
        write_labels(os.path.join(out_dir, names["scribble"]), scribble)
        records.append(Record(sid, names["image"], names["mask"], names["scribble"],
                              class_vector_from_scribble(scribble, K).tolist()))
    manifest = DatasetManifest(num_classes=K, split=split, seed=seed, records=records,
                               root=os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, f"{split}.json"))
    return manifest


def make_arrays(n, config, seed, budget=0.05):
    """In-memory counterpart of :func:`synthesize_split`.

    Images are quantized to 8 bits so arrays match what a saved split reloads.
    """
    images, masks, scribbles = [], [], []
    for i in range(n):
        image, mask = generate_sample([seed, i], config)
        images.append(np.round(image * 255.0) / 255.0)
        masks.append(mask)
        scribbles.append(scribble_from_mask(mask, seed=[seed, i, 1], budget=budget,
                                            num_classes=config.num_classes))
    return np.stack(images), np.stack(masks), np.stack(scribbles)
