import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attendgan import data as D

LEX = D.default_lexicon()


def test_reserved_ids():
    v = D.Vocabulary(["a"])
    assert [v.id(t) for t in D.RESERVED] == [0, 1, 2, 3]
    assert (D.PAD, D.BOS, D.EOS, D.UNK) == (0, 1, 2, 3)


# ---------------------------------------------------------------- scenes


def test_zero_noise_gives_exact_encoding():
    cfg = D.SynthConfig(noise=0.0)
    (scene, feats), = D.synth_scenes(1, cfg, seed=5)
    np.testing.assert_array_equal(feats, D.encode_scene(scene, cfg))
    assert set(np.unique(feats)) <= {0.0, 0.5, 1.0}


def test_scenes_deterministic_per_seed():
    a = D.synth_scenes(4, seed=9)
    b = D.synth_scenes(4, seed=9)
    assert [s for s, _ in a] == [s for s, _ in b]
    for (_, fa), (_, fb) in zip(a, b):
        assert fa.tobytes() == fb.tobytes()


def test_one_object_change_touches_one_region():
    cfg = D.SynthConfig(noise=0.0)
    obj = D.SceneObject("circle", "red", 0, 0)
    s1 = D.Scene("x", (obj, D.SceneObject("star", "blue", 2, 2)), (0, 0))
    s2 = D.Scene("x", (obj, D.SceneObject("heart", "blue", 2, 2)), (0, 0))
    diff = np.any(D.encode_scene(s1, cfg) != D.encode_scene(s2, cfg), axis=1)
    assert np.flatnonzero(diff).tolist() == [8]


def test_feature_dim_too_small():
    with pytest.raises(D.DatasetError, match="feature_dim"):
        D.synth_scenes(1, D.SynthConfig(feature_dim=8))


def test_scene_count_must_be_positive():
    with pytest.raises(D.DatasetError):
        D.synth_scenes(0)


def test_distinct_scenes_have_distinct_features():
    cfg = D.SynthConfig(noise=0.0)
    seen = {}
    for scene, feats in D.synth_scenes(60, cfg, seed=1):
        key = tuple(sorted((o.shape, o.color, o.row, o.col) for o in scene.objects))
        seen.setdefault(feats.tobytes(), set()).add(key)
    assert all(len(v) == 1 for v in seen.values())


# ---------------------------------------------------------------- captions


def _scene():
    return D.Scene("s", (D.SceneObject("circle", "red", 0, 0), D.SceneObject("star", "blue", 2, 1)), (0, 0))


def test_factual_captions_have_no_adjectives():
    caps = D.synth_captions(_scene(), "factual", LEX, np.random.default_rng(0))
    assert caps and all(not (set(c.tokens) & LEX.adjectives()) for c in caps)


@pytest.mark.parametrize("style", ["positive", "negative"])
def test_styled_captions_carry_own_polarity_only(style):
    other = "negative" if style == "positive" else "positive"
    for seed in range(20):
        for c in D.synth_captions(_scene(), style, LEX, np.random.default_rng(seed)):
            assert set(c.tokens) & LEX.adjectives(style)
            assert not set(c.tokens) & LEX.adjectives(other)


def test_captions_reproducible():
    a = D.synth_captions(_scene(), "positive", LEX, np.random.default_rng(4))
    b = D.synth_captions(_scene(), "positive", LEX, np.random.default_rng(4))
    assert [" ".join(c.tokens) for c in a] == [" ".join(c.tokens) for c in b]


def test_lexicon_without_applicable_adjective():
    lex = D.StyleLexicon(positive={"shiny": ["square"]}, negative={"bad": ["square"]})
    scene = D.Scene("s", (D.SceneObject("circle", "red", 0, 0),), (0, 0))
    with pytest.raises(D.DatasetError, match="no positive adjective"):
        D.synth_captions(scene, "positive", lex, np.random.default_rng(0))


def test_lexicon_invariants_and_roundtrip(tmp_path):
    with pytest.raises(D.DatasetError):
        D.StyleLexicon(positive={"odd": ["circle"]}, negative={"odd": ["star"]})
    with pytest.raises(D.DatasetError):
        D.StyleLexicon(positive={}, negative={"bad": ["star"]})
    LEX.save(tmp_path / "lex.json")
    assert D.StyleLexicon.load(tmp_path / "lex.json") == LEX


def test_corpus_style_purity_and_split_disjointness():
    ds = D.synth_corpus(D.CorpusPlan.uniform(12), seed=2)
    splits = {}
    for img, cap in ds.pairs():
        splits.setdefault(img.image_id, set()).add(cap.split)
        words = set(cap.tokens)
        if cap.style == "factual":
            assert not words & LEX.adjectives()
        else:
            other = "negative" if cap.style == "positive" else "positive"
            assert words & LEX.adjectives(cap.style) and not words & LEX.adjectives(other)
    assert all(len(s) == 1 for s in splits.values())


def test_corpus_plan_uniform_keeps_two_eval_images():
    plan = D.CorpusPlan.uniform(10)
    assert plan.counts["factual"] == {"train": 6, "val": 2, "test": 2}


def test_default_plan_sizes():
    c = D.CorpusPlan().counts
    assert c["factual"]["train"] == 400
    assert c["positive"] == {"train": 100, "val": 25, "test": 40}


# ---------------------------------------------------------------- vocabulary


def test_vocab_frequency_order():
    v = D.build_vocab([["a", "b"], ["a"]])
    assert v.id("a") < v.id("b")
    assert D.build_vocab([["a", "b"], ["a"]]) == v


def test_vocab_ties_lexicographic():
    v = D.build_vocab([["zeta", "alpha"]])
    assert v.itos[4:] == ["alpha", "zeta"]


def test_vocab_empty_corpus():
    with pytest.raises(D.DatasetError):
        D.build_vocab([])


def test_vocab_roundtrip_list():
    v = D.build_vocab([["x", "y", "y"]])
    assert D.Vocabulary.from_list(v.to_list()) == v


def test_encode_decode_roundtrip(small_corpus, vocab):
    for caption in small_corpus.all_tokens():
        assert vocab.decode(D.encode_caption(caption, vocab, 16)) == caption


def test_encode_empty_and_unknown(vocab):
    np.testing.assert_array_equal(D.encode_caption([], vocab, 5), [D.BOS, D.EOS, D.PAD, D.PAD, D.PAD])
    assert D.encode_caption(["qwerty"], vocab, 5)[1] == D.UNK


def test_encode_rejects_overlong(vocab):
    with pytest.raises(D.CaptionTooLongError):
        D.encode_caption(["a"] * 4, vocab, 5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["a", "red", "circle", "above", "star"]), max_size=14))
def test_encode_layout(tokens):
    v = D.build_vocab([["a", "red", "circle", "above", "star"]])
    ids = D.encode_caption(tokens, v, 16)
    assert ids[0] == D.BOS and ids[len(tokens) + 1] == D.EOS
    assert np.all(ids[len(tokens) + 2:] == D.PAD)
    assert v.decode(ids) == tokens


# ---------------------------------------------------------------- batches


def test_batches_partition_and_determinism(encoded):
    order = lambda seed, epoch: [i for b in D.batches(encoded, 5, seed, epoch) for i in b.image_ids]  # noqa: E731
    ids = order(1, 0)
    assert sorted(ids) == sorted(encoded.image_ids)
    assert ids == order(1, 0)
    assert ids != order(1, 1)
    sizes = [len(b) for b in D.batches(encoded, 5, 1, 0)]
    assert sum(sizes) == len(encoded) and sizes[-1] == len(encoded) - 5 * (len(sizes) - 1)


def test_single_batch_when_large(encoded):
    assert len(list(D.batches(encoded, 10_000, 0, 0))) == 1


def test_batches_rows_aligned(encoded):
    for b in D.batches(encoded, 7, 0, 0):
        for feats, toks, img in zip(b.features, b.tokens, b.image_ids):
            i = encoded.image_ids.index(img)
            assert feats.tobytes() == encoded.features[i].tobytes()


def test_batch_size_must_be_positive(encoded):
    with pytest.raises(ValueError):
        list(D.batches(encoded, 0, 0, 0))


# ---------------------------------------------------------------- JSONL


def test_jsonl_roundtrip(tmp_path, small_corpus):
    path = tmp_path / "d.jsonl"
    D.dump_jsonl(small_corpus, path)
    back = D.load_jsonl(path)
    assert [i.image_id for i in back.images] == [i.image_id for i in small_corpus.images]
    for a, b in zip(back.images, small_corpus.images):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.captions == b.captions


def test_jsonl_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert len(D.load_jsonl(p)) == 0


def _record(image_id="a", k=2, d=3, split="train", style="factual"):
    return {"image_id": image_id, "features": np.zeros((k, d)).tolist(),
            "captions": [{"tokens": ["a", "b"], "style": style, "split": split}]}


def test_jsonl_shape_mismatch_cites_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(_record("a")) + "\n" + json.dumps(_record("b", k=3)) + "\n")
    with pytest.raises(D.DatasetError, match=r"line 2.*\(3, 3\)"):
        D.load_jsonl(p)


@pytest.mark.parametrize("bad, msg", [
    ('{"image_id": "a"', "line 1: malformed"),
    (json.dumps(_record(split="dev")), "unknown split"),
    (json.dumps(_record(style="happy")), "unknown style"),
])
def test_jsonl_rejects_bad_records(tmp_path, bad, msg):
    p = tmp_path / "bad.jsonl"
    p.write_text(bad + "\n")
    with pytest.raises(D.DatasetError, match=msg):
        D.load_jsonl(p)


def test_jsonl_duplicate_ids(tmp_path):
    p = tmp_path / "dup.jsonl"
    p.write_text((json.dumps(_record("a")) + "\n") * 2)
    with pytest.raises(D.DatasetError, match="line 2: duplicate"):
        D.load_jsonl(p)


def test_jsonl_expected_regions(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(_record("a", k=2)) + "\n")
    with pytest.raises(D.DatasetError, match="line 1"):
        D.load_jsonl(p, regions=9)
