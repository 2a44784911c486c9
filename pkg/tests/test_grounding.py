"""Grounding pipeline: box-word pairing, span expansion, corpus building."""

import base64
import json

import numpy as np
import pytest

from covlm import grammar as G
from covlm.grounding import (BOX_SIM_THRESHOLD, WORD_SIM_THRESHOLD, GroundedBox,
                             OracleGrounder, TemplateParser, ToyGrounder,
                             build_corpus, build_training_corpus, expand_spans,
                             expansion_head, pair_boxes_words)
from covlm.scenes import (RELATIONS, generate_scene, parse_ppm, render,
                          render_scene, sample_holdout)
from covlm.util import rng_for
from covlm.vision import iou


def sims_for(words, **scores):
    out = np.full(len(words), 0.05)
    for w, s in scores.items():
        out[words.index(w)] = s
    return out


# -- step 1 -------------------------------------------------------------------

def test_low_sim_box_dropped():
    words = ["the", "red", "circle"]
    report = [((0.5, 0.5, 0.2, 0.2), sims_for(words, red=0.30))]
    assert pair_boxes_words(report, words) == []


def test_sim_thresholds_and_linking():
    words = ["red", "circle", "square"]
    report = [((0.5, 0.5, 0.2, 0.2), sims_for(words, red=0.4, circle=0.27, square=0.1))]
    out = pair_boxes_words(report, words)
    assert len(out) == 1
    assert out[0].words == (0, 1)  # red and circle clear 0.25; square does not
    assert out[0].head == 0 and abs(out[0].sim - 0.4) < 1e-12


def test_threshold_boundaries_are_strict():
    words = ["circle"]
    keep = pair_boxes_words([((0.5, 0.5, 0.2, 0.2), np.array([0.351]))], words)
    drop = pair_boxes_words([((0.5, 0.5, 0.2, 0.2), np.array([0.349]))], words)
    assert len(keep) == 1 and drop == []
    words2 = ["red", "circle"]
    linked = pair_boxes_words([((0.5, 0.5, 0.2, 0.2), np.array([0.4, 0.251]))], words2)
    unlinked = pair_boxes_words([((0.5, 0.5, 0.2, 0.2), np.array([0.4, 0.249]))], words2)
    assert linked[0].words == (0, 1)
    assert unlinked[0].words == (0,)


def test_overlapping_boxes_same_word_nms():
    words = ["circle"]
    a = ((0.50, 0.50, 0.40, 0.40), np.array([0.9]))
    b = ((0.52, 0.50, 0.40, 0.40), np.array([0.8]))  # IoU ~ 0.9 with a
    out = pair_boxes_words([b, a], words)
    assert len(out) == 1 and out[0].sim == 0.9
    far = ((0.2, 0.2, 0.1, 0.1), np.array([0.8]))
    out2 = pair_boxes_words([a, far], words)
    assert len(out2) == 2


def test_nms_tie_keeps_lower_index():
    words = ["circle"]
    a = ((0.50, 0.50, 0.40, 0.40), np.array([0.8]))
    b = ((0.52, 0.50, 0.40, 0.40), np.array([0.8]))
    out = pair_boxes_words([a, b], words)
    assert len(out) == 1 and out[0].box == a[0]


def test_empty_report_and_shape_check():
    assert pair_boxes_words([], ["red"]) == []
    with pytest.raises(ValueError):
        pair_boxes_words([((0.5, 0.5, 0.2, 0.2), np.array([0.4, 0.4]))], ["red"])


def test_nms_loser_stays_dead_when_thresholds_rise():
    # B loses the "circle" group to A; raising the box threshold past A's best
    # similarity must not bring B back
    words = ["circle", "red"]
    a = ((0.50, 0.50, 0.40, 0.40), np.array([0.40, 0.00]))
    b = ((0.52, 0.50, 0.40, 0.40), np.array([0.30, 0.50]))
    base = pair_boxes_words([a, b], words)
    assert [g.box for g in base] == [a[0]]
    tight = pair_boxes_words([a, b], words, box_threshold=0.45)
    assert tight == []


def test_step1_monotone_in_thresholds():
    words = ["the", "red", "circle", "is", "blue"]
    for seed in range(20):
        rng = rng_for(seed, "mono")
        report = [(tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.3, 2)),
                   rng.uniform(0, 1, len(words))) for _ in range(6)]
        base = pair_boxes_words(report, words)
        for bt, wt in [(0.5, 0.25), (0.35, 0.4), (0.6, 0.5)]:
            tight = pair_boxes_words(report, words, box_threshold=max(bt, 0.35),
                                     word_threshold=max(wt, 0.25))
            base_boxes = {g.box for g in base}
            for g in tight:
                assert g.box in base_boxes
                match = next(b for b in base if b.box == g.box)
                assert set(g.words) <= set(match.words)


# -- step 2 -------------------------------------------------------------------

def test_expand_det_amod():
    words = ["the", "red", "circle"]
    tree = [(2, "det"), (2, "amod"), (-1, "root")]
    assert expand_spans(words, [2], tree) == [(0, 3)]


def test_expand_no_eligible_children():
    words = ["see", "the", "circle"]
    tree = [(-1, "root"), (2, "det"), (0, "dobj")]
    assert expand_spans(words, [0], tree) == [(0, 1)]


def test_expansion_never_crosses_other_head():
    words = ["red", "circle"]
    tree = [(1, "amod"), (-1, "root")]
    spans = expand_spans(words, [0, 1], tree)
    assert spans == [(0, 1), (1, 2)]


def test_expansion_contiguity():
    # eligible child separated from the head by an ineligible word stays out
    words = ["red", "fake", "circle"]
    tree = [(2, "amod"), (2, "nmod"), (-1, "root")]
    assert expand_spans(words, [2], tree) == [(2, 3)]  # "red" is not adjacent


def test_expansion_head_is_topmost_linked():
    words = "the red square is left of the blue circle".split()
    tree = TemplateParser().parse(words)
    assert expansion_head((0, 1, 2), tree) == 2
    assert expansion_head((1, 2), tree) == 2
    assert expansion_head((7, 8), tree) == 8
    assert expansion_head((2,), tree) == 2
    assert expansion_head((1, 4), tree) == 1  # disjoint subtrees: lowest index


def test_malformed_trees_rejected():
    words = ["a", "b"]
    with pytest.raises(ValueError):
        expand_spans(words, [0], [(-1, "root")])  # wrong length
    with pytest.raises(ValueError):
        expand_spans(words, [0], [(-1, "root"), (-1, "root")])  # two roots
    with pytest.raises(ValueError):
        expand_spans(words, [0], [(1, "det"), (0, "amod")])  # cycle
    with pytest.raises(ValueError):
        expand_spans(words, [0], [(-1, "root"), (5, "det")])  # orphan head


def test_template_parser_full_caption():
    parser = TemplateParser()
    words = "the red square is left of the blue circle".split()
    tree = parser.parse(words)
    assert tree[3] == (-1, "root")
    assert expand_spans(words, [2, 8], tree) == [(0, 3), (6, 9)]


def test_template_parser_all_relations_and_negation():
    parser = TemplateParser()
    for rel in RELATIONS:
        for neg in ("", "not "):
            caption = f"the red square is {neg}{rel} the blue circle"
            words = caption.split()
            tree = parser.parse(words)
            shapes = [i for i, w in enumerate(words) if w in ("square", "circle")]
            spans = expand_spans(words, shapes, tree)
            assert spans[0] == (0, 3)
            assert spans[1] == (len(words) - 3, len(words))


def test_template_parser_rejects_garbage():
    parser = TemplateParser()
    with pytest.raises(ValueError):
        parser.parse("xyzzy broken caption".split())
    with pytest.raises(ValueError):
        parser.parse("the red square is near the blue circle".split())


# -- oracle grounder ----------------------------------------------------------

def test_oracle_true_pairs_survive():
    for seed in range(10):
        scene = generate_scene(seed)
        words = scene["caption"].split()
        report = OracleGrounder().ground(scene, words, seed)
        out = pair_boxes_words(report, words)
        assert len(out) == 2  # caption entities only; distractors fall below 0.35
        subj, obj = out if out[0].head < out[1].head else (out[1], out[0])
        n = len(words)
        assert subj.words == (1, 2) and subj.sim == 1.0
        assert obj.words == (n - 2, n - 1) and obj.sim == 1.0
        assert iou(subj.box, scene["entities"][0]["box"]) > 0.5
        assert iou(obj.box, scene["entities"][1]["box"]) > 0.5


def test_oracle_noise_seeded():
    scene = generate_scene(3)
    words = scene["caption"].split()
    g = OracleGrounder()
    r1 = g.ground(scene, words, 7)
    r2 = g.ground(scene, words, 7)
    r3 = g.ground(scene, words, 8)
    assert all(np.array_equal(a[1], b[1]) and a[0] == b[0] for a, b in zip(r1, r2))
    assert any(a[0] != b[0] for a, b in zip(r1, r3))


def test_oracle_disambiguates_repeated_color():
    scene = generate_scene(11, force_tuple=("red", "square", "left of", "red", "circle"))
    words = scene["caption"].split()
    out = pair_boxes_words(OracleGrounder().ground(scene, words, 0), words)
    tree = TemplateParser().parse(words)
    word_sets = sorted(g.words for g in out)
    assert word_sets == [(1, 2), (7, 8)]  # each box linked only to its own phrase
    assert sorted(expansion_head(ws, tree) for ws in word_sets) == [2, 8]


# -- toy grounder -------------------------------------------------------------

def test_toy_grounder_finds_caption_entities():
    hits = 0
    for seed in range(8):
        scene = generate_scene(seed, n_entities=2)
        words = scene["caption"].split()
        out = pair_boxes_words(ToyGrounder().ground(scene, words, 0), words)
        for ent, head in ((scene["entities"][0], 2), (scene["entities"][1], len(words) - 1)):
            match = [g for g in out if iou(g.box, ent["box"]) > 0.6]
            hits += bool(match)
    assert hits >= 12  # 16 entity mentions; the heuristic may drop a few


def test_toy_grounder_shape_classification():
    for shape, color in (("square", "red"), ("circle", "blue"), ("triangle", "green")):
        ent = {"shape": shape, "color": color, "box": (0.5, 0.5, 0.3, 0.3)}
        img = render([ent])
        words = ["the", color, shape]
        report = ToyGrounder().ground({"entities": [ent]}, words, 0, image=img)
        assert len(report) == 1
        box, sims = report[0]
        assert sims[words.index(shape)] == 0.85  # classified correctly
        assert sims[words.index(color)] == 0.90


# -- corpus building ----------------------------------------------------------

def make_scenes(n, holdout=(), start=0):
    return [dict(generate_scene(start + i, holdout=holdout), id=f"s{start + i:05d}")
            for i in range(n)]


def test_build_corpus_oracle_zero_skips():
    scenes = make_scenes(50)
    records, stats, skipped = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=1)
    assert len(records) == 50 and skipped == []
    assert stats["records"] == 50 and stats["skipped"] == 0
    for rec, scene in zip(records, scenes):
        assert set(rec) == {"id", "image", "caption", "comm_text", "spans"}
        assert rec["caption"] == scene["caption"]
        assert len(rec["spans"]) == 2
        els = G.from_text(rec["comm_text"])
        assert G.is_valid(els)
        roi_vals = [el.value for el in els if el.kind == G.ROI]
        assert roi_vals == [0, 1]
        for span in rec["spans"]:
            assert span["sim"] > BOX_SIM_THRESHOLD
        starts = [s["start"] for s in rec["spans"]]
        assert starts == sorted(starts)


def test_char_spans_slice_caption():
    scenes = make_scenes(10)
    records, _, _ = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=2)
    for rec in records:
        for span in rec["spans"]:
            text = rec["caption"][span["start"]:span["end"]]
            assert text.startswith("the ")
            assert not text.startswith(" ") and not text.endswith(" ")
            assert text.split()[-1] in ("circle", "square", "triangle")


def test_build_corpus_deterministic():
    scenes = make_scenes(20)
    a = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=5)
    b = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=5)
    assert json.dumps(a[0], sort_keys=True) == json.dumps(b[0], sort_keys=True)
    c = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=6)
    assert any(x["comm_text"] != y["comm_text"] for x, y in zip(a[0], c[0]))


def test_build_corpus_skips_bad_records():
    scenes = make_scenes(10)
    scenes[4] = dict(scenes[4], caption="xyzzy broken caption")
    records, stats, skipped = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=1)
    assert len(records) == 9
    assert len(skipped) == 1 and skipped[0]["id"] == scenes[4]["id"]


def test_form_coin_balanced():
    scenes = make_scenes(300)
    records, stats, _ = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=9)
    assert 0.40 < stats["form_b_ratio_rest"] < 0.60


def test_image_field_roundtrips():
    scenes = make_scenes(3)
    records, _, _ = build_corpus(scenes, OracleGrounder(), TemplateParser(), seed=1)
    for rec, scene in zip(records, scenes):
        img = parse_ppm(base64.b64decode(rec["image"]))
        assert img.shape == (64, 64, 3)
        assert np.abs(img - render_scene(scene)).max() <= 0.5 / 255 + 1e-6


def test_training_corpus_mix_and_holdout():
    holdout = sample_holdout(0)
    scenes = make_scenes(300, holdout=holdout)
    records, stats, skipped = build_training_corpus(
        scenes, OracleGrounder(), TemplateParser(), seed=3, holdout=holdout)
    assert skipped == []
    assert stats["records"] == 300
    assert 0.08 <= stats["qa"] / 300 <= 0.22
    assert 0.04 <= stats["negated"] / 300 <= 0.17
    n_qa = n_neg = 0
    for rec in records:
        if rec["spans"] == []:
            n_qa += 1
            assert rec["comm_text"] == rec["caption"]
            assert rec["caption"].startswith("question:")
            assert "short answer:" in rec["caption"]
        elif " not " in rec["caption"]:
            n_neg += 1
            w = rec["caption"].split()
            rel = " ".join(w[5:-3])
            tup = (w[1], w[2], rel, w[-2], w[-1])
            assert rel in RELATIONS
            assert tup not in holdout
            assert len(rec["spans"]) == 2
    assert n_qa == stats["qa"] and n_neg == stats["negated"]


def test_training_corpus_deterministic():
    holdout = sample_holdout(0)
    scenes = make_scenes(40, holdout=holdout)
    a = build_training_corpus(scenes, OracleGrounder(), TemplateParser(), seed=4, holdout=holdout)
    b = build_training_corpus(scenes, OracleGrounder(), TemplateParser(), seed=4, holdout=holdout)
    assert json.dumps(a[0], sort_keys=True) == json.dumps(b[0], sort_keys=True)
