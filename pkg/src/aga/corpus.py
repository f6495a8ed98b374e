"""
Synthetic image/report pairs with planted token-patch correspondences.

Each class owns a few concepts.  A concept is a short run of token ids plus
a patch signature (a C-vector).  A sample of class c draws a non-empty
subset of c's concepts, stamps each signature (plus noise) into its own
rectangle on the patch grid, and writes the concept tokens into the report
together with random distractor tokens.  Which patches each concept token
should group with is recorded as the planted alignment.

All randomness comes from ``numpy.random.default_rng`` streams keyed on
``(seed, stream, ...)`` so any single sample can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import binio
from .encoders import ImageSample, TextSample

CORPUS_MAGIC = b"AGAC"
CORPUS_VERSION = 1

_WORLD, _SAMPLES, _LABELS = 0, 1, 2
SPLITS = ("train", "val", "test")


@dataclass
class CorpusConfig:
    num_classes: int = 3
    concepts_per_class: int = 2
    tokens_per_concept: int = 2
    vocab: int = 64
    grid_rows: int = 6
    grid_cols: int = 6
    channels: int = 8
    m_max: int = 24
    noise_std: float = 0.1
    distractor_rate: float = 0.2
    region_min: int = 1
    region_max: int = 3
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50

    @property
    def n_patches(self):
        return self.grid_rows * self.grid_cols

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("noise_std", "distractor_rate"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative, got {v}")
            elif f.name in ("n_val",):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative, got {v}")
            elif v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.distractor_rate > 1:
            raise ValueError("distractor_rate must not exceed 1")
        n_concepts = self.num_classes * self.concepts_per_class
        if n_concepts * self.tokens_per_concept > self.vocab - 1:
            raise ValueError("vocab: too small for the concept tokens (id 0 is reserved for padding)")
        if self.concepts_per_class * self.tokens_per_concept > self.m_max:
            raise ValueError("m_max: shorter than one class's concept tokens")
        if self.region_min > self.region_max or self.region_max > min(self.grid_rows, self.grid_cols):
            raise ValueError("region_max: regions must fit in the patch grid")
        if self.concepts_per_class * self.region_max**2 > self.n_patches:
            raise ValueError("region_max: concept regions cannot all fit without overlap")
        return self


@dataclass
class Concept:
    tokens: tuple
    signature: np.ndarray  # [C]
    region_range: tuple = (1, 3)


@dataclass
class WorldSpec:
    seed: int
    config: CorpusConfig
    concepts: list
    class_concepts: list  # class -> list of concept indices
    distractors: np.ndarray  # token ids that are never concept tokens

    def prompt(self, cls):
        """Class prompt: the class's concept tokens in order."""
        ids = [t for k in self.class_concepts[cls] for t in self.concepts[k].tokens]
        m = self.config.m_max
        token_ids = np.zeros(m, dtype=np.int64)
        token_ids[:len(ids)] = ids
        mask = np.zeros(m, dtype=bool)
        mask[:len(ids)] = True
        return TextSample(token_ids, mask)

    def prompts(self):
        return [self.prompt(c) for c in range(self.config.num_classes)]

    def concept_token_set(self):
        return {t for c in self.concepts for t in c.tokens}


@dataclass
class LabeledPair:
    image: ImageSample
    text: TextSample
    label: int
    planted: list = field(default_factory=list)  # [(token position, frozenset of patch ids)]

    def planted_matrix(self, n_patches):
        out = np.zeros((self.text.mask.shape[0], n_patches), dtype=bool)
        for pos, patches in self.planted:
            out[pos, sorted(patches)] = True
        return out


def build_world(seed, config: CorpusConfig | None = None) -> WorldSpec:
    config = (config or CorpusConfig()).validate()
    rng = np.random.default_rng([seed, _WORLD])
    n_concepts = config.num_classes * config.concepts_per_class
    n_tok = n_concepts * config.tokens_per_concept
    ids = rng.permutation(np.arange(1, config.vocab))
    concept_ids, distractors = ids[:n_tok], np.sort(ids[n_tok:])
    concepts = []
    for k in range(n_concepts):
        toks = tuple(int(t) for t in concept_ids[k * config.tokens_per_concept:(k + 1) * config.tokens_per_concept])
        sig = rng.normal(0.0, 1.0, config.channels)
        concepts.append(Concept(toks, sig, (config.region_min, config.region_max)))
    class_concepts = [list(range(c * config.concepts_per_class, (c + 1) * config.concepts_per_class))
                      for c in range(config.num_classes)]
    return WorldSpec(seed, config, concepts, class_concepts, distractors)


def _place_regions(rng, cfg, count, attempts=200):
    taken = np.zeros((cfg.grid_rows, cfg.grid_cols), dtype=bool)
    regions = []
    for _ in range(count):
        for _ in range(attempts):
            h = int(rng.integers(cfg.region_min, cfg.region_max + 1))
            w = int(rng.integers(cfg.region_min, cfg.region_max + 1))
            r = int(rng.integers(0, cfg.grid_rows - h + 1))
            c = int(rng.integers(0, cfg.grid_cols - w + 1))
            if not taken[r:r + h, c:c + w].any():
                break
        else:
            raise RuntimeError("could not place non-overlapping concept regions")
        taken[r:r + h, c:c + w] = True
        cells = [(rr * cfg.grid_cols + cc) for rr in range(r, r + h) for cc in range(c, c + w)]
        regions.append(frozenset(cells))
    return regions


def sample_pair(world: WorldSpec, rng, label=None) -> LabeledPair:
    cfg = world.config
    if label is None:
        label = int(rng.integers(cfg.num_classes))
    own = world.class_concepts[label]
    chosen = [k for k in own if rng.random() < 0.5]
    if not chosen:
        chosen = [own[int(rng.integers(len(own)))]]
    chosen = [chosen[i] for i in rng.permutation(len(chosen))]

    patches = rng.normal(0.0, 1.0, (cfg.n_patches, cfg.channels)) * cfg.noise_std
    regions = _place_regions(rng, cfg, len(chosen))
    for k, cells in zip(chosen, regions):
        idx = sorted(cells)
        patches[idx] += world.concepts[k].signature

    # concept phrases, then distractors dropped into random slots
    seq = [(t, cells) for k, cells in zip(chosen, regions) for t in world.concepts[k].tokens]
    room = cfg.m_max - len(seq)
    n_dis = int(rng.binomial(room, cfg.distractor_rate)) if room > 0 else 0
    for _ in range(n_dis):
        pos = int(rng.integers(len(seq) + 1))
        seq.insert(pos, (int(rng.choice(world.distractors)), None))

    token_ids = np.zeros(cfg.m_max, dtype=np.int64)
    mask = np.zeros(cfg.m_max, dtype=bool)
    planted = []
    for pos, (tok, cells) in enumerate(seq):
        token_ids[pos] = tok
        mask[pos] = True
        if cells is not None:
            planted.append((pos, cells))
    return LabeledPair(ImageSample(patches), TextSample(token_ids, mask), label, planted)


def sample_rng(world: WorldSpec, split: int, index: int):
    return np.random.default_rng([world.seed, _SAMPLES, split, index])


def make_split(world: WorldSpec, split: int, size: int):
    # labels cycle through a seeded permutation per block for near-uniform classes
    k = world.config.num_classes
    label_rng = np.random.default_rng([world.seed, _LABELS, split])
    blocks = [label_rng.permutation(k) for _ in range(-(-size // k))]
    labels = np.concatenate(blocks)[:size] if blocks else np.zeros(0, dtype=np.int64)
    return [sample_pair(world, sample_rng(world, split, i), int(labels[i])) for i in range(size)]


def make_splits(world: WorldSpec, sizes=None):
    """``(train, val, test)`` lists; the sizes default to the world config."""
    cfg = world.config
    sizes = sizes or (cfg.n_train, cfg.n_val, cfg.n_test)
    if len(sizes) != 3 or min(sizes) < 0 or sizes[0] < 1:
        raise ValueError(f"split sizes must be three non-negative counts with train >= 1, got {sizes}")
    return tuple(make_split(world, i, n) for i, n in enumerate(sizes))


# -- serialisation -----------------------------------------------------------

def _pairs_arrays(prefix, pairs, cfg):
    n = len(pairs)
    planted = np.zeros((n, cfg.m_max, cfg.n_patches), dtype=np.uint8)
    for i, p in enumerate(pairs):
        planted[i] = p.planted_matrix(cfg.n_patches)
    return {
        f"{prefix}.patches": np.stack([p.image.patches for p in pairs]) if n else
        np.zeros((0, cfg.n_patches, cfg.channels)),
        f"{prefix}.token_ids": np.stack([p.text.token_ids for p in pairs]) if n else
        np.zeros((0, cfg.m_max), dtype=np.int64),
        f"{prefix}.mask": np.stack([p.text.mask for p in pairs]).astype(np.uint8) if n else
        np.zeros((0, cfg.m_max), dtype=np.uint8),
        f"{prefix}.labels": np.array([p.label for p in pairs], dtype=np.int64),
        f"{prefix}.planted": planted,
    }


def _pairs_from_arrays(prefix, arrays):
    out = []
    patches = arrays[f"{prefix}.patches"]
    for i in range(patches.shape[0]):
        planted_m = arrays[f"{prefix}.planted"][i].astype(bool)
        planted = [(int(pos), frozenset(int(j) for j in np.flatnonzero(planted_m[pos])))
                   for pos in np.flatnonzero(planted_m.any(axis=1))]
        out.append(LabeledPair(
            ImageSample(patches[i]),
            TextSample(arrays[f"{prefix}.token_ids"][i], arrays[f"{prefix}.mask"][i].astype(bool)),
            int(arrays[f"{prefix}.labels"][i]),
            planted,
        ))
    return out


def world_manifest(world: WorldSpec):
    return {
        "seed": world.seed,
        "config": asdict(world.config),
        "concepts": [{"tokens": list(c.tokens), "signature": c.signature.tolist(),
                      "region_range": list(c.region_range)} for c in world.concepts],
        "class_concepts": world.class_concepts,
    }


def dumps_corpus(world: WorldSpec, splits) -> bytes:
    cfg = world.config
    arrays = {
        "world.json": binio.json_array({"seed": world.seed, "config": asdict(cfg),
                                        "class_concepts": world.class_concepts}),
        "world.signatures": np.stack([c.signature for c in world.concepts]),
        "world.concept_tokens": np.array([c.tokens for c in world.concepts], dtype=np.int64),
        "world.distractors": np.asarray(world.distractors, dtype=np.int64),
    }
    for name, pairs in zip(SPLITS, splits):
        arrays.update(_pairs_arrays(name, pairs, cfg))
    return binio.dumps(CORPUS_MAGIC, CORPUS_VERSION, arrays)


def loads_corpus(buf: bytes):
    """Returns ``(world, (train, val, test))``."""
    version, arrays = binio.loads(buf, CORPUS_MAGIC)
    if version != CORPUS_VERSION:
        raise binio.FormatError(f"unsupported corpus version {version}")
    meta = binio.array_json(arrays["world.json"])
    cfg = CorpusConfig(**meta["config"])
    concepts = [Concept(tuple(int(t) for t in toks), sig.copy(), (cfg.region_min, cfg.region_max))
                for toks, sig in zip(arrays["world.concept_tokens"], arrays["world.signatures"])]
    world = WorldSpec(meta["seed"], cfg, concepts, meta["class_concepts"], arrays["world.distractors"])
    return world, tuple(_pairs_from_arrays(name, arrays) for name in SPLITS)


def save_corpus(path, world, splits):
    with open(path, "wb") as fh:
        fh.write(dumps_corpus(world, splits))


def load_corpus(path):
    with open(path, "rb") as fh:
        return loads_corpus(fh.read())
