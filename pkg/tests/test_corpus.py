import numpy as np
import pytest

from aga.corpus import (
    CorpusConfig, build_world, dumps_corpus, loads_corpus, make_splits, sample_pair, sample_rng,
)


def same_pairs(a, b):
    return len(a) == len(b) and all(
        np.array_equal(x.image.patches, y.image.patches) and np.array_equal(x.text.token_ids, y.text.token_ids)
        and np.array_equal(x.text.mask, y.text.mask) and x.label == y.label and x.planted == y.planted
        for x, y in zip(a, b))


def test_world_is_deterministic():
    a, b = build_world(3), build_world(3)
    assert all(np.array_equal(x.signature, y.signature) and x.tokens == y.tokens
               for x, y in zip(a.concepts, b.concepts))
    assert np.array_equal(a.distractors, b.distractors)
    c = build_world(4)
    assert not np.array_equal(a.concepts[0].signature, c.concepts[0].signature)


def test_three_classes_by_default():
    assert build_world(0).config.num_classes == 3


def test_concept_tokens_disjoint_over_seeds():
    for seed in range(100):
        w = build_world(seed)
        toks = [t for c in w.concepts for t in c.tokens]
        assert len(toks) == len(set(toks))
        assert 0 not in toks
        assert not set(toks) & set(w.distractors.tolist())
        assert len(toks) + len(w.distractors) == w.config.vocab - 1


def test_zero_noise_single_concept_patches_equal_signature():
    cfg = CorpusConfig(noise_std=0.0, concepts_per_class=1)
    w = build_world(1, cfg)
    for i in range(20):
        p = sample_pair(w, np.random.default_rng(i))
        (k,) = w.class_concepts[p.label]
        cells = sorted(set().union(*(c for _, c in p.planted)))
        assert np.array_equal(p.image.patches[cells], np.tile(w.concepts[k].signature, (len(cells), 1)))
        rest = np.setdiff1d(np.arange(cfg.n_patches), cells)
        assert not p.image.patches[rest].any()


def test_planted_sets_valid():
    w = build_world(2)
    cfg = w.config
    for i in range(300):
        p = sample_pair(w, np.random.default_rng(i))
        regions = {}
        for pos, cells in p.planted:
            assert cells and all(0 <= c < cfg.n_patches for c in cells)
            assert p.text.mask[pos]
            regions.setdefault(cells, 0)
            tok = int(p.text.token_ids[pos])
            assert tok in w.concept_token_set()
        # distinct concepts occupy non-overlapping rectangles
        cells = list(regions)
        for a in range(len(cells)):
            for b in range(a + 1, len(cells)):
                assert not cells[a] & cells[b]
        # every concept token of the sample is planted
        real = p.text.token_ids[p.text.mask]
        planted_pos = {pos for pos, _ in p.planted}
        for pos, tok in enumerate(real):
            assert (tok in w.concept_token_set()) == (pos in planted_pos)


def test_no_distractors_means_only_concept_tokens():
    w = build_world(5, CorpusConfig(distractor_rate=0.0))
    concept = w.concept_token_set()
    for i in range(1000):
        p = sample_pair(w, np.random.default_rng([5, i]))
        assert set(p.text.token_ids[p.text.mask].tolist()) <= concept


def test_splits_counts_disjoint_and_reproducible():
    w = build_world(0)
    tr, va, te = make_splits(w)
    assert (len(tr), len(va), len(te)) == (200, 20, 50)
    seen = {p.image.patches.tobytes() for p in tr + va + te}
    assert len(seen) == 270
    assert all(same_pairs(a, b) for a, b in zip((tr, va, te), make_splits(build_world(0))))


def test_class_balance():
    for seed in range(10):
        tr, _, te = make_splits(build_world(seed))
        for split in (tr, te):
            counts = np.bincount([p.label for p in split], minlength=3)
            assert np.all(np.abs(counts / len(split) - 1 / 3) <= 0.1 / 3)


def test_single_sample_regenerates():
    w = build_world(7)
    tr, _, _ = make_splits(w, (10, 0, 1))
    again = sample_pair(w, sample_rng(w, 0, 4), tr[4].label)
    assert same_pairs([again], [tr[4]])


def test_roundtrip_is_bitwise():
    w = build_world(11, CorpusConfig(n_train=30, n_val=3, n_test=9))
    splits = make_splits(w)
    buf = dumps_corpus(w, splits)
    w2, splits2 = loads_corpus(buf)
    assert dumps_corpus(w2, splits2) == buf
    assert all(same_pairs(a, b) for a, b in zip(splits, splits2))
    assert w2.config == w.config


@pytest.mark.parametrize("field, value", [
    ("num_classes", 0), ("noise_std", -0.1), ("distractor_rate", 1.5), ("vocab", 5),
    ("region_max", 7), ("m_max", 1),
])
def test_bad_config_names_field(field, value):
    cfg = CorpusConfig(**{field: value})
    with pytest.raises(ValueError, match=field):
        cfg.validate()


def test_prompts_cover_class_concepts():
    w = build_world(0)
    for c, prompt in enumerate(w.prompts()):
        expect = [t for k in w.class_concepts[c] for t in w.concepts[k].tokens]
        assert prompt.token_ids[prompt.mask].tolist() == expect
