"""Synthetic captioning corpora, vocabulary, caption encoding and JSONL I/O.

The synthetic world is a small grid of cells, some holding a coloured shape.
Each cell becomes one region feature row, so attention over regions has
something real to find. Captions come from a tiny grammar; styled captions
insert a polarity adjective from a :class:`StyleLexicon` in front of a noun.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
STYLES = ("factual", "positive", "negative")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class CaptionTooLongError(ValueError):
    pass


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    tokens: tuple
    style: str
    split: str

    def __post_init__(self):
        if self.style not in STYLES:
            raise DatasetError(f"unknown style {self.style!r}")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")


@dataclass
class ImageRecord:
    image_id: str
    features: np.ndarray
    captions: list = field(default_factory=list)


@dataclass
class CaptionDataset:
    images: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def pairs(self, style=None, split=None) -> list:
        """All ``(ImageRecord, CaptionRecord)`` pairs matching the filters."""
        out = []
        for img in self.images:
            for cap in img.captions:
                if (style is None or cap.style == style) and (split is None or cap.split == split):
                    out.append((img, cap))
        return out

    def subset(self, style=None, split=None) -> "CaptionDataset":
        imgs = []
        for img in self.images:
            caps = [c for c in img.captions
                    if (style is None or c.style == style) and (split is None or c.split == split)]
            if caps:
                imgs.append(ImageRecord(img.image_id, img.features, caps))
        return CaptionDataset(imgs)

    def references(self) -> dict:
        return {img.image_id: [list(c.tokens) for c in img.captions] for img in self.images}

    def all_tokens(self) -> list:
        return [list(c.tokens) for img in self.images for c in img.captions]


# ---------------------------------------------------------------- lexicon


@dataclass
class StyleLexicon:
    """Polarity adjectives, each mapped to the nouns it may modify."""

    positive: dict
    negative: dict

    def __post_init__(self):
        if not self.positive or not self.negative:
            raise DatasetError("lexicon needs adjectives of both polarities")
        both = set(self.positive) & set(self.negative)
        if both:
            raise DatasetError(f"adjectives listed under both polarities: {sorted(both)}")

    def adjectives(self, polarity=None) -> set:
        if polarity == "positive":
            return set(self.positive)
        if polarity == "negative":
            return set(self.negative)
        return set(self.positive) | set(self.negative)

    def for_noun(self, polarity: str, noun: str) -> list:
        table = self.positive if polarity == "positive" else self.negative
        return [adj for adj, nouns in table.items() if noun in nouns]

    def to_json(self) -> str:
        return json.dumps({"positive": self.positive, "negative": self.negative}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StyleLexicon":
        obj = json.loads(text)
        return cls(positive=dict(obj["positive"]), negative=dict(obj["negative"]))

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "StyleLexicon":
        return cls.from_json(Path(path).read_text())


SHAPES = ("circle", "square", "triangle", "star", "heart")
COLORS = ("red", "green", "blue", "yellow", "white")


def default_lexicon() -> StyleLexicon:
    every = list(SHAPES)
    return StyleLexicon(
        positive={
            "nice": every,
            "beautiful": every,
            "lovely": ["circle", "heart", "star"],
            "pretty": ["circle", "heart", "triangle"],
            "happy": ["star", "heart", "circle"],
            "great": ["square", "triangle", "star"],
            "cute": ["heart", "circle", "square"],
            "bright": ["star", "square", "triangle"],
        },
        negative={
            "ugly": every,
            "dirty": every,
            "broken": ["square", "triangle", "heart"],
            "lonely": ["circle", "star", "heart"],
            "bad": ["square", "triangle", "circle"],
            "dull": ["circle", "square", "star"],
            "creepy": ["triangle", "star", "heart"],
            "crooked": ["triangle", "square", "heart"],
        },
    )


# ---------------------------------------------------------------- scenes


@dataclass
class SynthConfig:
    grid: int = 3
    feature_dim: int = 16
    noise: float = 0.05
    max_objects: int = 2
    shapes: tuple = SHAPES
    colors: tuple = COLORS
    # adjective i of the applicable list gets weight 1 / (i + 1) ** skew
    adjective_skew: float = 1.0
    double_adjective_prob: float = 0.25

    @property
    def regions(self) -> int:
        return self.grid * self.grid

    def check(self):
        need = len(self.shapes) + len(self.colors) + 3
        if self.feature_dim < need:
            raise DatasetError(f"feature_dim {self.feature_dim} cannot hold the {need}-dim region encoding")
        if not 1 <= self.max_objects <= self.regions:
            raise DatasetError(f"max_objects must lie in [1, {self.regions}]")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple
    seed: tuple


def encode_scene(scene: Scene, config: SynthConfig, rng=None) -> np.ndarray:
    """Region features of a scene, plus N(0, noise^2) if ``rng`` is given."""
    g = config.grid
    ns, nc = len(config.shapes), len(config.colors)
    feats = np.zeros((g * g, config.feature_dim), dtype=np.float64)
    occupied = {(o.row, o.col): o for o in scene.objects}
    for r in range(g):
        for c in range(g):
            row = feats[r * g + c]
            scale = max(g - 1, 1)
            row[ns + nc] = r / scale
            row[ns + nc + 1] = c / scale
            obj = occupied.get((r, c))
            if obj is None:
                row[ns + nc + 2] = 1.0
            else:
                row[config.shapes.index(obj.shape)] = 1.0
                row[ns + config.colors.index(obj.color)] = 1.0
    if rng is not None and config.noise > 0:
        feats += rng.normal(0.0, config.noise, size=feats.shape)
    return feats.astype(np.float32)


def synth_scenes(count: int, config: SynthConfig | None = None, seed: int = 0,
                 prefix: str = "scene") -> list:
    """``count`` random scenes with their region features; deterministic per seed."""
    config = config or SynthConfig()
    config.check()
    if count < 1:
        raise DatasetError("scene count must be at least 1")
    out = []
    for i in range(count):
        key = (seed, i)
        rng = np.random.default_rng(list(key))
        n_obj = int(rng.integers(1, config.max_objects + 1))
        cells = rng.choice(config.regions, size=n_obj, replace=False)
        objs = []
        for cell in sorted(int(c) for c in cells):
            objs.append(SceneObject(
                shape=config.shapes[int(rng.integers(len(config.shapes)))],
                color=config.colors[int(rng.integers(len(config.colors)))],
                row=cell // config.grid, col=cell % config.grid))
        scene = Scene(f"{prefix}-{i:05d}", tuple(objs), key)
        out.append((scene, encode_scene(scene, config, rng)))
    return out


# ---------------------------------------------------------------- captions

_VPOS = ("top", "middle", "bottom")
_HPOS = ("left", "center", "right")


def _relation(a: SceneObject, b: SceneObject) -> tuple:
    if a.row < b.row:
        return ["above"], ["below"]
    if a.row > b.row:
        return ["below"], ["above"]
    return ["beside"], ["beside"]


def _position_words(o: SceneObject, grid: int) -> list:
    v = _VPOS[min(2, round(o.row * 2 / max(grid - 1, 1)))]
    h = _HPOS[min(2, round(o.col * 2 / max(grid - 1, 1)))]
    return [v, h]


def _templates(scene: Scene, grid: int) -> list:
    """Factual token lists; each noun phrase is a list so styles can edit it."""
    objs = scene.objects
    np_ = [["a", o.color, o.shape] for o in objs]
    if len(objs) == 1:
        return [
            [np_[0]],
            [["there", "is"], np_[0]],
            [np_[0], ["at", "the"] + _position_words(objs[0], grid)],
        ]
    rel, inv = _relation(objs[0], objs[1])
    return [
        [np_[0], rel, np_[1]],
        [np_[1], inv, np_[0]],
        [["there", "is"], np_[0], ["and"], np_[1]],
    ]


def synth_captions(scene: Scene, style: str, lexicon: StyleLexicon, rng,
                   split: str = "train", config: SynthConfig | None = None) -> list:
    """Grammar captions for ``scene``; styled ones carry at least one adjective."""
    config = config or SynthConfig()
    if style not in STYLES:
        raise DatasetError(f"unknown style {style!r}")
    nouns = {o.shape for o in scene.objects}
    if style != "factual" and not any(lexicon.for_noun(style, n) for n in nouns):
        raise DatasetError(f"lexicon has no {style} adjective for any of {sorted(nouns)}")
    records = []
    for parts in _templates(scene, config.grid):
        parts = [list(p) for p in parts]
        if style != "factual":
            phrases = [i for i, p in enumerate(parts)
                       if len(p) == 3 and p[0] == "a" and lexicon.for_noun(style, p[2])]
            order = list(rng.permutation(phrases))
            chosen = order[:1]
            if len(order) > 1 and rng.random() < config.double_adjective_prob:
                chosen = order[:2]
            for i in chosen:
                adjs = lexicon.for_noun(style, parts[i][2])
                w = 1.0 / (np.arange(len(adjs)) + 1.0) ** config.adjective_skew
                adj = adjs[int(rng.choice(len(adjs), p=w / w.sum()))]
                parts[i].insert(1, adj)
        tokens = tuple(t for p in parts for t in p)
        records.append(CaptionRecord(scene.scene_id, tokens, style, split))
    return records


@dataclass
class CorpusPlan:
    """Scene counts per (style, split)."""

    counts: dict = field(default_factory=lambda: {
        "factual": {"train": 400, "val": 40, "test": 40},
        "positive": {"train": 100, "val": 25, "test": 40},
        "negative": {"train": 100, "val": 25, "test": 40},
    })

    @classmethod
    def uniform(cls, scenes: int, styles=STYLES) -> "CorpusPlan":
        """Split ``scenes`` per style roughly 5:1:2 into train/val/test.

        From 6 scenes on, val and test get at least two images each (CIDEr
        needs two documents).
        """
        floor = 2 if scenes >= 6 else 1
        val = max(floor, round(scenes * 0.125)) if scenes >= 3 else 0
        test = max(floor, round(scenes * 0.25)) if scenes >= 3 else 0
        train = scenes - val - test
        return cls({s: {"train": train, "val": val, "test": test} for s in styles})


def synth_corpus(plan: CorpusPlan | None = None, config: SynthConfig | None = None,
                 lexicon: StyleLexicon | None = None, seed: int = 0) -> CaptionDataset:
    plan = plan or CorpusPlan()
    config = config or SynthConfig()
    lexicon = lexicon or default_lexicon()
    images = []
    for si, style in enumerate(STYLES):
        for pi, split in enumerate(SPLITS):
            n = plan.counts.get(style, {}).get(split, 0)
            if n <= 0:
                continue
            group_seed = seed * 100 + si * 10 + pi
            scenes = synth_scenes(n, config, group_seed, prefix=f"{style[:3]}-{split}")
            for scene, feats in scenes:
                rng = np.random.default_rng([group_seed, 7919, int(scene.seed[1])])
                caps = synth_captions(scene, style, lexicon, rng, split=split, config=config)
                images.append(ImageRecord(scene.scene_id, feats, caps))
    return CaptionDataset(images)


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token/id bijection with ids 0-3 reserved for pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DatasetError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def decode(self, ids) -> list:
        """Ids back to words, dropping bos and stopping at eos/pad."""
        out = []
        for i in ids:
            i = int(i)
            if i == BOS:
                continue
            if i in (EOS, PAD):
                break
            out.append(self.itos[i])
        return out

    def to_list(self) -> list:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != RESERVED:
            raise DatasetError("serialized vocabulary lacks the reserved prefix")
        return cls(itos[4:])


def build_vocab(corpus) -> Vocabulary:
    """Frequency-descending, then lexicographic, after the reserved ids."""
    counts = Counter(t for caption in corpus for t in caption)
    if not counts:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)))


def encode_caption(tokens: Sequence[str], vocab: Vocabulary, seq_len: int) -> np.ndarray:
    """``[bos, ids..., eos, pad...]`` of length ``seq_len``."""
    if len(tokens) > seq_len - 2:
        raise CaptionTooLongError(f"caption of {len(tokens)} tokens exceeds limit {seq_len - 2}: {' '.join(tokens)}")
    out = np.full(seq_len, PAD, dtype=np.int64)
    out[0] = BOS
    out[1:1 + len(tokens)] = [vocab.id(t) for t in tokens]
    out[1 + len(tokens)] = EOS
    return out


@dataclass
class EncodedSet:
    """Aligned arrays for training: ``features[N, K, D]``, ``tokens[N, seq_len]``."""

    features: np.ndarray
    tokens: np.ndarray
    image_ids: list

    def __len__(self):
        return len(self.image_ids)

    def take(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet(self.features[idx], self.tokens[idx], [self.image_ids[i] for i in idx])


def encode_pairs(pairs, vocab: Vocabulary, seq_len: int) -> EncodedSet:
    if not pairs:
        return EncodedSet(np.zeros((0, 0, 0), np.float32), np.zeros((0, seq_len), np.int64), [])
    feats = np.stack([img.features for img, _ in pairs]).astype(np.float32)
    toks = np.stack([encode_caption(cap.tokens, vocab, seq_len) for _, cap in pairs])
    return EncodedSet(feats, toks, [img.image_id for img, _ in pairs])


def encode_images(dataset: CaptionDataset) -> tuple:
    """``(features[N, K, D], image_ids)`` with one row per image."""
    feats = np.stack([img.features for img in dataset.images]).astype(np.float32)
    return feats, [img.image_id for img in dataset.images]


def batches(data: EncodedSet, batch_size: int, seed: int, epoch: int) -> Iterator[EncodedSet]:
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield data.take(order[start:start + batch_size])


# ---------------------------------------------------------------- JSONL


def dump_jsonl(dataset: CaptionDataset, path) -> None:
    with open(path, "w") as fh:
        for img in dataset.images:
            rec = {
                "image_id": img.image_id,
                "features": [[float(v) for v in row] for row in np.asarray(img.features)],
                "captions": [{"tokens": list(c.tokens), "style": c.style, "split": c.split}
                             for c in img.captions],
            }
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path, regions: int | None = None, feature_dim: int | None = None) -> CaptionDataset:
    """Parse and validate a dataset file. Errors cite the 1-based line number."""
    images = []
    shape = (regions, feature_dim)
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id = str(rec["image_id"])
                feats = np.asarray(rec["features"], dtype=np.float32)
                raw_caps = rec["captions"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
            if feats.ndim != 2:
                raise DatasetError(f"line {lineno}: features must be a K x D matrix, got shape {feats.shape}")
            want = tuple(s if s is not None else f for s, f in zip(shape, feats.shape))
            if feats.shape != want:
                raise DatasetError(f"line {lineno}: features shape {feats.shape} does not match expected {want}")
            shape = feats.shape
            if not np.all(np.isfinite(feats)):
                raise DatasetError(f"line {lineno}: non-finite feature values")
            if image_id in seen:
                raise DatasetError(f"line {lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            caps = []
            for c in raw_caps:
                try:
                    caps.append(CaptionRecord(image_id, tuple(str(t) for t in c["tokens"]), c["style"], c["split"]))
                except (KeyError, TypeError) as exc:
                    raise DatasetError(f"line {lineno}: malformed caption ({exc})") from None
                except DatasetError as exc:
                    raise DatasetError(f"line {lineno}: {exc}") from None
            if len({c.split for c in caps}) > 1:
                raise DatasetError(f"line {lineno}: image {image_id!r} has captions in several splits")
            images.append(ImageRecord(image_id, feats, caps))
    return CaptionDataset(images)
