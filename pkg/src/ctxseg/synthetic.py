"""Deterministic synthetic corpus for zero-shot segmentation experiments.

Scenes are textured geometric objects on textured backgrounds. Each
category is a (shape, color, texture) attribute combo; the rendered
appearance is a pure function of those attributes plus per-sample seeded
noise, so categories never labeled during training remain recognizable
from their attributes alone. Unseen-category pixels are masked to IGNORE
in the training split and fully labeled in the test split.

Category embeddings are the attribute vector concatenated with a fixed
seeded random projection of it, then L2-normalized; every unseen category
shares its shape with at least one seen category and its color with at
least one seen category, which is what makes zero-shot transfer possible.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DimensionError, ParseError
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .rng import RngState
from .constants import IGNORE

SHAPES = ("plane", "circle", "square", "triangle", "diamond")
COLOR_TABLE = {
    "gray": (0.48, 0.48, 0.48),
    "red": (0.85, 0.12, 0.10),
    "green": (0.10, 0.72, 0.18),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.88, 0.80, 0.10),
}
COLORS = tuple(COLOR_TABLE)
_TEX_FREQS = (0.20, 0.38, 0.60)
_TEX_WEIGHTS = (0.10, 0.22)


@dataclass(frozen=True)
class CategorySpec:
    id: int
    name: str
    shape: str
    color: str
    texture: tuple
    seen: bool

    @property
    def attributes(self) -> np.ndarray:
        shape_oh = np.zeros(len(SHAPES))
        shape_oh[SHAPES.index(self.shape)] = 1.0
        color_oh = np.zeros(len(COLORS))
        color_oh[COLORS.index(self.color)] = 1.0
        return np.concatenate([shape_oh, color_oh, np.asarray(self.texture)])


def attribute_length() -> int:
    return len(SHAPES) + len(COLORS) + len(_TEX_WEIGHTS)


# Hand-picked default split: 12 seen (2 full-field backgrounds + 10 objects)
# and 4 unseen objects whose shape and color each occur among the seen.
_DEFAULT_SEEN = [
    ("plane", "gray"), ("plane", "blue"),
    ("circle", "red"), ("circle", "green"), ("circle", "yellow"),
    ("square", "blue"), ("square", "yellow"), ("square", "red"),
    ("triangle", "red"), ("triangle", "blue"),
    ("diamond", "green"), ("diamond", "blue"),
]
_DEFAULT_UNSEEN = [
    ("circle", "blue"), ("square", "green"),
    ("triangle", "green"), ("diamond", "red"),
]


def _texture_for(shape: str, color: str) -> tuple:
    i = SHAPES.index(shape) + COLORS.index(color)
    return (_TEX_FREQS[i % len(_TEX_FREQS)], _TEX_WEIGHTS[i % len(_TEX_WEIGHTS)])


def default_categories(n_seen: int = 12, n_unseen: int = 4) -> list:
    """Category table with the transferability guarantees baked in."""
    if not 2 <= n_seen <= len(_DEFAULT_SEEN):
        raise ConfigError(f"n_seen must be in [2,{len(_DEFAULT_SEEN)}], got {n_seen}")
    if not 1 <= n_unseen <= len(_DEFAULT_UNSEEN):
        raise ConfigError(f"n_unseen must be in [1,{len(_DEFAULT_UNSEEN)}], got {n_unseen}")
    picks = [(s, c, True) for s, c in _DEFAULT_SEEN[:n_seen]]
    picks += [(s, c, False) for s, c in _DEFAULT_UNSEEN[:n_unseen]]
    cats = [CategorySpec(i, f"{c}_{s}", s, c, _texture_for(s, c), seen)
            for i, (s, c, seen) in enumerate(picks)]
    validate_categories(cats)
    return cats


def validate_categories(cats) -> None:
    ids = [c.id for c in cats]
    if ids != list(range(len(cats))):
        raise ConfigError(f"category ids must be contiguous 0..{len(cats) - 1}")
    seen = [c for c in cats if c.seen]
    unseen = [c for c in cats if not c.seen]
    if len(seen) < 2 or len(unseen) < 1:
        raise ConfigError(
            f"need >=2 seen and >=1 unseen categories, got {len(seen)}/{len(unseen)}")
    if not any(c.shape == "plane" for c in seen):
        raise ConfigError("at least one seen 'plane' category is needed for backgrounds")
    for u in unseen:
        if not any(s.shape == u.shape for s in seen):
            raise ConfigError(f"unseen '{u.name}' shares its shape with no seen category")
        if not any(s.color == u.color for s in seen):
            raise ConfigError(f"unseen '{u.name}' shares its color with no seen category")


@dataclass
class DataConfig:
    image_size: int = 64
    train_samples: int = 200
    test_samples: int = 50
    seed: int = 7
    n_seen: int = 12
    n_unseen: int = 4
    embed_dim: int = 32
    min_objects: int = 3
    max_objects: int = 5
    unseen_object_prob: float = 0.4

    def validate(self):
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("object count range is invalid")
        if not 0.0 <= self.unseen_object_prob <= 1.0:
            raise ConfigError("unseen_object_prob must lie in [0,1]")

    def canonical(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass
class SegSample:
    image: np.ndarray  # float64 [3,H,W] in [0,1]
    labels: np.ndarray  # uint8 [H,W], category ids or IGNORE
    seed: int
    pseudo: np.ndarray | None = None  # self-training labels, IGNORE where absent

    def cls_labels(self) -> np.ndarray:
        """Ground-truth labels with pseudo-labels merged in (classification only)."""
        if self.pseudo is None:
            return self.labels
        out = self.labels.copy()
        take = (out == IGNORE) & (self.pseudo != IGNORE)
        out[take] = self.pseudo[take]
        return out


@dataclass
class WordEmbeddingTable:
    rows: np.ndarray  # [K, d], L2-normalized
    names: list
    seen_ids: tuple
    unseen_ids: tuple

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def num_categories(self) -> int:
        return self.rows.shape[0]

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i in range(self.num_categories):
                vals = ",".join(f"{v:.17g}" for v in self.rows[i])
                f.write(f"{i},{self.names[i]},{int(i in self.seen_ids)},{vals}\n")

    @classmethod
    def load_csv(cls, path) -> "WordEmbeddingTable":
        rows, names, seen, unseen = [], [], [], []
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        dim = None
        for lineno, line in enumerate(lines):
            parts = line.split(",")
            if len(parts) < 4:
                raise ParseError(f"{path}: row {lineno} has {len(parts)} fields, need >= 4")
            if dim is None:
                dim = len(parts) - 3
            elif len(parts) - 3 != dim:
                raise ParseError(
                    f"{path}: row {lineno} has {len(parts) - 3} values, expected {dim}")
            try:
                cid = int(parts[0])
                flag = int(parts[2])
                vec = [float(v) for v in parts[3:]]
            except ValueError as e:
                raise ParseError(f"{path}: row {lineno}: {e}") from None
            if cid != lineno:
                raise ParseError(f"{path}: row {lineno} carries id {cid}, ids must be ordered")
            rows.append(vec)
            names.append(parts[1])
            (seen if flag else unseen).append(cid)
        if not rows:
            raise ParseError(f"{path}: empty embedding table")
        return cls(np.asarray(rows), names, tuple(seen), tuple(unseen))


def build_embeddings(cats, d: int, seed: int) -> WordEmbeddingTable:
    """attributes || seeded-random-projection(attributes), L2-normalized."""
    attrs = np.stack([c.attributes for c in cats])
    a = attrs.shape[1]
    if d < a:
        raise ConfigError(f"embedding dim {d} is smaller than attribute length {a}")
    if d > a:
        rng = RngState(seed).spawn("embed-projection")
        proj = rng.normal((d - a, a)) / np.sqrt(a)
        emb = np.concatenate([attrs, attrs @ proj.T], axis=1)
    else:
        emb = attrs.copy()
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return WordEmbeddingTable(
        rows=emb,
        names=[c.name for c in cats],
        seen_ids=tuple(c.id for c in cats if c.seen),
        unseen_ids=tuple(c.id for c in cats if not c.seen),
    )


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Top-left nearest-neighbor label downsampling; IGNORE propagates."""
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"label map {h}x{w} not divisible by factor {factor}")
    return labels[..., ::factor, ::factor]


def upsample_nearest(arr: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(arr, factor, axis=-2), factor, axis=-1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(shape: str, size: int, cx, cy, r) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        t = (dy + 0.75 * r) / (1.5 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * 0.95 * r)
    raise ConfigError(f"unknown shape '{shape}'")


def _texture(cat: CategorySpec, size: int, rng: RngState, phase: float) -> np.ndarray:
    """[H,W,3] appearance: dominant base color + attribute-driven stripes + noise."""
    yy, xx = np.mgrid[0:size, 0:size]
    freq, weight = cat.texture
    stripes = np.sin(2 * np.pi * freq * (xx + yy) / 2.0 + phase) * weight
    base = np.asarray(COLOR_TABLE[cat.color])
    img = base[None, None, :] + stripes[:, :, None]
    img += rng.normal((size, size, 3)) * 0.02
    return img


def render_sample(cats, size: int, rng: RngState, min_objects: int,
                  max_objects: int, unseen_object_prob: float):
    """One scene. Returns (image float64 [3,H,W] in [0,1], labels uint8 [H,W])."""
    backgrounds = [c for c in cats if c.shape == "plane" and c.seen]
    seen_objs = [c for c in cats if c.shape != "plane" and c.seen]
    unseen_objs = [c for c in cats if not c.seen]

    bg = backgrounds[int(rng.integers(0, len(backgrounds)))]
    img = _texture(bg, size, rng, phase=float(rng.uniform(0, 2 * np.pi)))
    labels = np.full((size, size), bg.id, dtype=np.uint8)

    n_obj = int(rng.integers(min_objects, max_objects + 1))
    for _ in range(n_obj):
        if unseen_objs and float(rng.uniform()) < unseen_object_prob:
            pool = unseen_objs
        else:
            pool = seen_objs
        cat = pool[int(rng.integers(0, len(pool)))]
        r = float(rng.uniform(0.14, 0.25)) * size
        cx = float(rng.uniform(r * 0.7, size - r * 0.7))
        cy = float(rng.uniform(r * 0.7, size - r * 0.7))
        mask = _shape_mask(cat.shape, size, cx, cy, r)
        tex = _texture(cat, size, rng, phase=float(rng.uniform(0, 2 * np.pi)))
        img[mask] = tex[mask]
        labels[mask] = cat.id

    quant = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    image = quant.astype(np.float64).transpose(2, 0, 1) / 255.0
    return image, labels, quant


def _mask_unseen(labels: np.ndarray, cats) -> np.ndarray:
    out = labels.copy()
    unseen_ids = [c.id for c in cats if not c.seen]
    out[np.isin(labels, unseen_ids)] = IGNORE
    return out


def generate_samples(cfg: DataConfig, cats) -> dict:
    """In-memory corpus: {'train': [SegSample...], 'test': [...]}."""
    cfg.validate()
    validate_categories(cats)
    root = RngState(cfg.seed).spawn("corpus")
    splits = {}
    for split, count in (("train", cfg.train_samples), ("test", cfg.test_samples)):
        samples = []
        for i in range(count):
            srng = root.spawn(f"{split}/{i}")
            image, labels, _ = render_sample(
                cats, cfg.image_size, srng, cfg.min_objects, cfg.max_objects,
                cfg.unseen_object_prob)
            if split == "train":
                labels = _mask_unseen(labels, cats)
            samples.append(SegSample(image=image, labels=labels, seed=srng.seed))
        splits[split] = samples
    return splits


# ---------------------------------------------------------------------------
# on-disk corpus
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    image_size: int
    categories: list
    train_paths: list  # (image_rel, labels_rel) pairs
    test_paths: list
    embeddings_path: str
    config_hash: str

    def save(self, path) -> None:
        cats = self.categories
        lines = ["# ctxseg corpus manifest", "format_version=1",
                 f"image_size={self.image_size}",
                 f"num_categories={len(cats)}"]
        for c in cats:
            tex = ",".join(f"{t:.17g}" for t in c.texture)
            lines.append(
                f"category.{c.id}={c.name}|{c.shape}|{c.color}|{tex}|{int(c.seen)}")
        for split, pairs in (("train", self.train_paths), ("test", self.test_paths)):
            lines.append(f"{split}_count={len(pairs)}")
            for i, (img, lab) in enumerate(pairs):
                lines.append(f"{split}.{i}.image={img}")
                lines.append(f"{split}.{i}.labels={lab}")
        lines.append(f"embeddings={self.embeddings_path}")
        lines.append(f"config_hash={self.config_hash}")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        kv = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        try:
            n = int(kv["num_categories"])
            cats = []
            for i in range(n):
                name, shape, color, tex, seen = kv[f"category.{i}"].split("|")
                texture = tuple(float(t) for t in tex.split(","))
                cats.append(CategorySpec(i, name, shape, color, texture, bool(int(seen))))
            paths = {}
            for split in ("train", "test"):
                cnt = int(kv[f"{split}_count"])
                paths[split] = [(kv[f"{split}.{i}.image"], kv[f"{split}.{i}.labels"])
                                for i in range(cnt)]
            return cls(image_size=int(kv["image_size"]), categories=cats,
                       train_paths=paths["train"], test_paths=paths["test"],
                       embeddings_path=kv["embeddings"], config_hash=kv["config_hash"])
        except KeyError as e:
            raise ParseError(f"{path}: missing manifest key {e}") from None


@dataclass
class Corpus:
    categories: list
    embeddings: WordEmbeddingTable
    train: list
    test: list
    image_size: int
    config_hash: str = ""

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def seen_ids(self):
        return tuple(c.id for c in self.categories if c.seen)

    @property
    def unseen_ids(self):
        return tuple(c.id for c in self.categories if not c.seen)


def generate_dataset(cfg: DataConfig, cats, out_dir) -> DatasetManifest:
    """Render the corpus, write it under out_dir, return the manifest."""
    cfg.validate()
    validate_categories(cats)
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "test"):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)

    root = RngState(cfg.seed).spawn("corpus")
    all_paths = {}
    for split, count in (("train", cfg.train_samples), ("test", cfg.test_samples)):
        pairs = []
        for i in range(count):
            srng = root.spawn(f"{split}/{i}")
            _, labels, quant = render_sample(
                cats, cfg.image_size, srng, cfg.min_objects, cfg.max_objects,
                cfg.unseen_object_prob)
            if split == "train":
                labels = _mask_unseen(labels, cats)
            img_rel = f"{split}/img_{i:05d}.ppm"
            lab_rel = f"{split}/lab_{i:05d}.pgm"
            write_ppm(os.path.join(out_dir, img_rel), quant)
            write_pgm(os.path.join(out_dir, lab_rel), labels)
            pairs.append((img_rel, lab_rel))
        all_paths[split] = pairs

    table = build_embeddings(cats, cfg.embed_dim, cfg.seed)
    table.save_csv(os.path.join(out_dir, "embeddings.csv"))

    manifest = DatasetManifest(
        image_size=cfg.image_size, categories=cats,
        train_paths=all_paths["train"], test_paths=all_paths["test"],
        embeddings_path="embeddings.csv", config_hash=cfg.digest())
    manifest.save(os.path.join(out_dir, "manifest.txt"))
    return manifest


def load_corpus(data_dir) -> Corpus:
    manifest = DatasetManifest.load(os.path.join(data_dir, "manifest.txt"))
    table = WordEmbeddingTable.load_csv(os.path.join(data_dir, manifest.embeddings_path))
    splits = {}
    for split, pairs in (("train", manifest.train_paths), ("test", manifest.test_paths)):
        samples = []
        for img_rel, lab_rel in pairs:
            quant = read_ppm(os.path.join(data_dir, img_rel))
            labels = read_pgm(os.path.join(data_dir, lab_rel))
            image = quant.astype(np.float64).transpose(2, 0, 1) / 255.0
            samples.append(SegSample(image=image, labels=labels, seed=0))
        splits[split] = samples
    return Corpus(categories=manifest.categories, embeddings=table,
                  train=splits["train"], test=splits["test"],
                  image_size=manifest.image_size, config_hash=manifest.config_hash)


def corpus_from_memory(cfg: DataConfig, cats=None) -> Corpus:
    """Convenience: fully in-memory corpus (tests, demos)."""
    if cats is None:
        cats = default_categories(cfg.n_seen, cfg.n_unseen)
    splits = generate_samples(cfg, cats)
    table = build_embeddings(cats, cfg.embed_dim, cfg.seed)
    return Corpus(categories=cats, embeddings=table, train=splits["train"],
                  test=splits["test"], image_size=cfg.image_size,
                  config_hash=cfg.digest())


def data_config_from_file(path) -> DataConfig:
    """Parse a key=value data config; unknown keys are an error."""
    cfg = DataConfig()
    known = {f.name: f.type for f in fields(DataConfig)}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise ConfigError(f"{path}:{lineno}: unknown data config key '{k}'")
        cur = getattr(cfg, k)
        value = float(v) if isinstance(cur, float) else int(v)
        cfg = replace(cfg, **{k: value})
    cfg.validate()
    return cfg
