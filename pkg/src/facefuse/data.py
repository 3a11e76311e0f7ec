"""Manifests, PGM/PPM images, augmentation, splitting and the synthetic face generator."""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, IngestionError

ATTRIBUTES = ("id", "age", "race", "gender")
ATTRIBUTE_RANGES = {"age": 3, "race": 4, "gender": 2}

DEFAULT_LABEL_MAPS = {
    "age": {"young": 0, "adult": 1, "old": 2},
    "race": {"asian": 0, "latin-american": 1, "african": 2, "white": 3},
    "gender": {"male": 0, "female": 1},
}


@dataclass
class Sample:
    image_ref: Union[str, np.ndarray]
    labels: Dict[str, int]
    source_key: str
    ref: str = ""

    def __post_init__(self):
        if not self.ref:
            self.ref = self.source_key

    def label_vector(self):
        return [self.labels[a] for a in ATTRIBUTES]


@dataclass
class Manifest:
    records: List[Sample]
    label_maps: Dict[str, Dict[str, int]] = field(default_factory=dict)
    root: str = "."

    @property
    def id_count(self):
        return max(r.labels["id"] for r in self.records) + 1 if self.records else 0

    def image_path(self, sample):
        return os.path.join(self.root, sample.image_ref)


# -- images ------------------------------------------------------------------

def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise IngestionError("truncated image header")
    return buf[start:pos], pos


def decode_image(path, normalize=False):
    """Read a binary PGM (P5) or PPM (P6) file into ``[C, H, W]`` floats in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from None
    try:
        magic, pos = _read_token(buf, 0)
        if magic not in (b"P5", b"P6"):
            raise IngestionError(f"{path}: unsupported image format {magic[:2]!r}")
        width, pos = _read_token(buf, pos)
        height, pos = _read_token(buf, pos)
        maxval, pos = _read_token(buf, pos)
        w, h, mv = int(width), int(height), int(maxval)
    except ValueError:
        raise IngestionError(f"{path}: malformed image header") from None
    except IngestionError as exc:
        raise IngestionError(f"{path}: {exc}") from None
    if w < 1 or h < 1 or mv != 255:
        raise IngestionError(f"{path}: unsupported header (w={w}, h={h}, maxval={mv})")
    channels = 1 if magic == b"P5" else 3
    pos += 1  # single whitespace byte before the raster
    payload = buf[pos:pos + w * h * channels]
    if len(payload) != w * h * channels:
        raise IngestionError(f"{path}: truncated payload ({len(payload)} of {w * h * channels} bytes)")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    img = img.transpose(2, 0, 1).astype(np.float64) / 255.0
    return normalize_image(img) if normalize else img


def encode_image(path, image):
    """Write ``[C, H, W]`` values in [0, 1] as 8-bit PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] not in (1, 3):
        raise ConfigurationError(f"cannot encode {image.shape[0]}-channel image")
    q = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = q.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + q.transpose(1, 2, 0).tobytes())


def quantize(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def normalize_image(image):
    """Per-image mean subtraction, then divide by 0.5."""
    image = np.asarray(image, dtype=np.float64)
    return (image - image.mean()) / 0.5


# -- manifests ---------------------------------------------------------------

def _map_label(attr, value, label_maps, lineno):
    if isinstance(value, bool):
        raise IngestionError(f"{attr} label must be an integer or mapped string", lineno)
    if isinstance(value, str):
        table = label_maps.get(attr, {})
        key = value if value in table else value.lower()
        if key not in table:
            raise IngestionError(f"{attr} label {value!r} has no label-map entry", lineno)
        value = table[key]
    if not isinstance(value, int) or value < 0:
        raise IngestionError(f"{attr} label {value!r} is not a non-negative integer", lineno)
    limit = ATTRIBUTE_RANGES.get(attr)
    if limit is not None and value >= limit:
        raise IngestionError(f"{attr} label {value} out of range [0, {limit})", lineno)
    return value


def load_manifest(path, label_maps=None, check_files=True) -> Manifest:
    """Parse a JSON-lines manifest (keys path, id, age, race, gender, optional source_key).

    String labels for age/race/gender go through ``label_maps`` (defaulting to
    :data:`DEFAULT_LABEL_MAPS`); string ids are numbered in order of first
    appearance. Image paths are relative to the manifest's directory.
    """
    maps = {k: dict(v) for k, v in DEFAULT_LABEL_MAPS.items()}
    for attr, table in (label_maps or {}).items():
        maps[attr] = dict(table)
    for attr, table in maps.items():
        if len(set(table.values())) != len(table):
            raise IngestionError(f"label map for {attr} is not bijective")
    string_ids = maps.setdefault("id", {})
    root = os.path.dirname(os.path.abspath(path))
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open manifest {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise IngestionError("record is not a JSON object", lineno)
            missing = [k for k in ("path",) + ATTRIBUTES if k not in obj]
            if missing:
                raise IngestionError(f"missing key(s) {', '.join(missing)}", lineno)
            if isinstance(obj["id"], str) and obj["id"] not in string_ids:
                string_ids[obj["id"]] = len(string_ids)
            labels = {a: _map_label(a, obj[a], maps, lineno) for a in ATTRIBUTES}
            img_path = str(obj["path"])
            if check_files and not os.path.isfile(os.path.join(root, img_path)):
                raise IngestionError(f"image {img_path!r} is not readable", lineno)
            records.append(Sample(img_path, labels, str(obj.get("source_key", img_path))))
    if not records:
        raise IngestionError(f"manifest {path} has no records")
    present = {r.labels["id"] for r in records}
    absent = sorted(set(range(max(present) + 1)) - present)
    if absent:
        raise IngestionError(f"id classes without records: {absent[:10]}")
    return Manifest(records, maps, root)


def write_manifest(path, records: Sequence[Sample]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {"path": r.image_ref, **{a: int(r.labels[a]) for a in ATTRIBUTES}}
            if r.source_key != r.image_ref:
                obj["source_key"] = r.source_key
            fh.write(json.dumps(obj, sort_keys=False) + "\n")


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    factor: int = 10
    max_rotation: float = 10.0       # degrees
    max_translation: float = 0.10    # fraction of the image side
    scale_range: tuple = (0.9, 1.1)
    flip: bool = True
    max_blur_sigma: float = 1.0
    brightness: float = 0.05
    contrast_range: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigurationError(f"augmentation factor must be >= 1, got {self.factor}")


def _key_int(text):
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _transform(img, rng, spec: AugmentSpec):
    c, h, w = img.shape
    angle = np.deg2rad(rng.uniform(-spec.max_rotation, spec.max_rotation))
    scale = rng.uniform(*spec.scale_range)
    ty, tx = rng.uniform(-spec.max_translation, spec.max_translation, 2) * (h, w)
    flip = spec.flip and rng.random() < 0.5
    sigma = rng.uniform(0.0, spec.max_blur_sigma) if rng.random() < 0.5 else 0.0
    shift = rng.uniform(-spec.brightness, spec.brightness)
    contrast = rng.uniform(*spec.contrast_range)

    # output pixel o maps to input pixel  A @ (o - center - t) + center
    cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
    mat = np.array([[cos, -sin], [sin, cos]])
    if flip:
        mat = mat @ np.diag([1.0, -1.0])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - mat @ (center + (ty, tx))
    out = np.empty_like(img)
    for ch in range(c):
        plane = ndimage.affine_transform(img[ch], mat, offset=offset, order=1, mode="nearest")
        if sigma > 0:
            plane = ndimage.gaussian_filter(plane, sigma, mode="nearest")
        out[ch] = plane
    out = (out - 0.5) * contrast + 0.5 + shift
    return quantize(out)


def augment(sample: Sample, spec: AugmentSpec, image=None) -> List[Sample]:
    """``spec.factor`` variants of ``sample``; element 0 is the original.

    The RNG is seeded from ``(spec.seed, source_key)`` so the variants do not
    depend on processing order. ``image`` may supply the decoded pixels.
    """
    if image is None:
        image = sample.image_ref if isinstance(sample.image_ref, np.ndarray) else decode_image(sample.image_ref)
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng([spec.seed, _key_int(sample.source_key)])
    out = [Sample(image, dict(sample.labels), sample.source_key, f"{sample.source_key}#0")]
    for k in range(1, spec.factor):
        out.append(Sample(_transform(image, rng, spec), dict(sample.labels), sample.source_key,
                          f"{sample.source_key}#{k}"))
    return out


def split(samples: Sequence[Sample], train_fraction=0.7, seed=0, group_by_source=True):
    """Partition into (train, test), keeping the input order within each part.

    Grouped mode assigns whole source keys; the fraction then counts source
    keys rather than images.
    """
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train fraction must lie in (0, 1), got {train_fraction}")
    if not samples:
        raise ConfigurationError("cannot split an empty sample list")
    rng = np.random.default_rng(seed)
    if group_by_source:
        keys = list(dict.fromkeys(s.source_key for s in samples))
        n_train = int(round(train_fraction * len(keys)))
        chosen = {keys[i] for i in rng.permutation(len(keys))[:n_train]}
        mask = [s.source_key in chosen for s in samples]
    else:
        n_train = int(round(train_fraction * len(samples)))
        flags = np.zeros(len(samples), dtype=bool)
        flags[rng.permutation(len(samples))[:n_train]] = True
        mask = flags.tolist()
    train = [s for s, m in zip(samples, mask) if m]
    test = [s for s, m in zip(samples, mask) if not m]
    return train, test


# -- in-memory datasets --------------------------------------------------------

@dataclass
class Dataset:
    """Stacked, normalized images with their labels (columns in ``ATTRIBUTES`` order)."""
    images: np.ndarray
    labels: np.ndarray
    refs: List[str]
    source_keys: List[str]

    def __len__(self):
        return len(self.refs)

    def label_column(self, task):
        if task not in ATTRIBUTES:
            raise ConfigurationError(f"unknown task {task!r}")
        return self.labels[:, ATTRIBUTES.index(task)]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], dtype=np.float32):
        if not samples:
            raise ConfigurationError("dataset is empty")
        images = np.stack([normalize_image(s.image_ref) for s in samples]).astype(dtype)
        labels = np.array([s.label_vector() for s in samples], dtype=np.int64)
        return cls(images, labels, [s.ref for s in samples], [s.source_key for s in samples])


@dataclass(frozen=True)
class DataConfig:
    augment_factor: int = 10
    train_fraction: float = 0.7
    group_by_source: bool = True
    seed: int = 0


def build_datasets(manifest: Manifest, config: DataConfig = DataConfig(), dtype=np.float32):
    """Decode, augment and split a manifest into (train, test) datasets."""
    spec = AugmentSpec(factor=config.augment_factor, seed=config.seed)
    variants = []
    for rec in manifest.records:
        img = decode_image(manifest.image_path(rec))
        variants.extend(augment(rec, spec, image=img))
    train, test = split(variants, config.train_fraction, config.seed, config.group_by_source)
    return Dataset.from_samples(train, dtype), Dataset.from_samples(test, dtype)


# -- synthetic faces -----------------------------------------------------------

BACKGROUND_BANDS = (0.1, 0.3, 0.7, 0.9)            # by race
FACE_AXES = ((6.0, 8.0), (8.0, 10.0), (10.0, 11.5))   # (x, y) semi-axes by age, at 32 px
FACE_LEVEL = 0.5


@dataclass(frozen=True)
class SynthConfig:
    ids_per_subgroup: int = 1
    images_per_id: int = 50
    resolution: int = 32
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.ids_per_subgroup < 1 or self.images_per_id < 1:
            raise ConfigurationError("synthetic counts must be positive")
        if self.resolution < 16:
            raise ConfigurationError(f"resolution {self.resolution} is too small (minimum 16)")
        if self.noise < 0:
            raise ConfigurationError("noise level must be non-negative")


def subgroups():
    """The 24 (gender, age, race) triples in id order."""
    return [(g, a, r) for g in range(2) for a in range(3) for r in range(4)]


def _glyph(gender, size):
    g = np.zeros((size, size), dtype=bool)
    mid = size // 2
    if gender == 0:
        g[mid, :] = True
        g[:, mid] = True
    else:
        g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = True
    return g


def _id_texture(seed, ident, cells, cell_px):
    rng = np.random.default_rng([seed, 1, ident])
    levels = rng.choice([-0.25, 0.25], size=(cells, cells))
    return np.kron(levels, np.ones((cell_px, cell_px)))


def render_face(config: SynthConfig, ident, gender, age, race, index):
    r = config.resolution
    f = r / 32.0
    rng = np.random.default_rng([config.seed, 2, ident, index])
    bg = BACKGROUND_BANDS[race]
    img = np.full((r, r), bg)

    cy = r / 2.0 + 1.0 * f + rng.uniform(-2, 2) * f
    cx = r / 2.0 + rng.uniform(-2, 2) * f
    s = rng.uniform(0.95, 1.05)
    ax, ay = (v * f * s for v in FACE_AXES[age])
    yy, xx = np.mgrid[0:r, 0:r]
    face = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    img[face] = FACE_LEVEL

    cell_px = max(1, int(round(2 * f)))
    tex = _id_texture(config.seed, ident, 3, cell_px)
    ty, tx = int(round(cy)) - tex.shape[0] // 2, int(round(cx)) - tex.shape[1] // 2
    img[ty:ty + tex.shape[0], tx:tx + tex.shape[1]] += tex

    gsize = max(3, int(round(5 * f))) | 1
    off = max(1, int(round(2 * f)))
    img[off:off + gsize, off:off + gsize][_glyph(gender, gsize)] = 1.0 if bg < 0.5 else 0.0

    if config.noise > 0:
        img = img + rng.normal(0.0, config.noise, img.shape)
    return quantize(img)[None]


def synth_generate(config: SynthConfig, out_dir) -> Manifest:
    """Render the synthetic set into ``out_dir/images`` and write ``out_dir/manifest.jsonl``.

    Identities are nested in the 24 subgroups: id ``g * ids_per_subgroup + k``
    belongs to subgroup ``g``. Output is a pure function of ``config``.
    """
    img_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create output directory {out_dir}: {exc}") from None
    records = []
    for g_index, (gender, age, race) in enumerate(subgroups()):
        for k in range(config.ids_per_subgroup):
            ident = g_index * config.ids_per_subgroup + k
            for j in range(config.images_per_id):
                rel = f"images/id{ident:03d}_{j:04d}.pgm"
                encode_image(os.path.join(out_dir, rel), render_face(config, ident, gender, age, race, j))
                labels = {"id": ident, "age": age, "race": race, "gender": gender}
                records.append(Sample(rel, labels, rel))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return Manifest(records, {k: dict(v) for k, v in DEFAULT_LABEL_MAPS.items()},
                    os.path.abspath(out_dir))
