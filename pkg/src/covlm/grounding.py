"""Caption grounding: candidate boxes with word similarities survive fixed
thresholds, grounded words expand along their dependency subtrees, and the
resulting spans get communication tokens inserted to form the training
corpus. Grounder and parser are interfaces with two backends each: an oracle
that reads scene ground truth, and rule-based toy implementations working
from pixels / the closed caption grammar."""

from __future__ import annotations

import base64
import logging
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import grammar as G
from .scenes import (COLORS, COLOR_RGB, RELATIONS, SHAPES, make_negated_caption,
                     make_qa, ppm_bytes, render_scene)
from .util import rng_for

log = logging.getLogger("covlm.ground")

BOX_SIM_THRESHOLD = 0.35
WORD_SIM_THRESHOLD = 0.25
PAIR_NMS_IOU = 0.5
ELIGIBLE_RELATIONS = frozenset({"det", "amod", "compound", "prep"})


@dataclass
class GroundedBox:
    box: tuple          # (cx, cy, w, h)
    words: tuple        # linked caption word indices, ascending
    head: int           # highest-similarity word index
    sim: float          # that similarity


def _iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


# -- step 1: box-word pairing -------------------------------------------------

def pair_boxes_words(report, words, box_threshold: float = BOX_SIM_THRESHOLD,
                     word_threshold: float = WORD_SIM_THRESHOLD,
                     nms_iou: float = PAIR_NMS_IOU):
    """report: list of (box, sims) with sims a float array over caption word
    positions. Keeps boxes whose best word similarity clears `box_threshold`,
    links each kept box to all words above `word_threshold`, and among boxes
    linked to the same word removes the lower-similarity one of any pair
    overlapping by more than `nms_iou`. Returns GroundedBox list in input
    order.

    Overlap elimination always runs on the canonical-threshold groups so that
    raising `box_threshold`/`word_threshold` only filters the output: a box's
    eliminator dropping below a raised cut can never resurrect it. Thresholds
    below the canonical values behave as the canonical values."""
    rows = []
    for box, sims in report:
        sims = np.asarray(sims, dtype=np.float64)
        if sims.shape != (len(words),):
            raise ValueError(f"similarity row has shape {sims.shape}, caption has {len(words)} words")
        rows.append((tuple(float(c) for c in box), sims))

    cand = [i for i, (_, sims) in enumerate(rows)
            if sims.size and sims.max() > BOX_SIM_THRESHOLD]
    eliminated = set()
    for w in range(len(words)):
        group = [i for i in cand
                 if i not in eliminated and rows[i][1][w] > WORD_SIM_THRESHOLD]
        group.sort(key=lambda i: (-rows[i][1][w], i))
        chosen = []
        for i in group:
            if any(_iou(rows[i][0], rows[j][0]) > nms_iou for j in chosen):
                eliminated.add(i)
            else:
                chosen.append(i)

    out = []
    for i in cand:
        if i in eliminated:
            continue
        box, sims = rows[i]
        if sims.max() <= box_threshold:
            continue
        linked = tuple(int(w) for w in np.nonzero(sims > word_threshold)[0])
        if not linked:
            continue
        out.append(GroundedBox(box=box, words=linked, head=int(np.argmax(sims)),
                               sim=float(sims.max())))
    return out


# -- step 2: span expansion ---------------------------------------------------

def _check_tree(words, tree):
    if len(tree) != len(words):
        raise ValueError(f"tree has {len(tree)} nodes for {len(words)} words")
    roots = [i for i, (h, _) in enumerate(tree) if h == -1]
    if len(roots) != 1:
        raise ValueError(f"tree must have exactly one root, found {len(roots)}")
    for i, (h, _) in enumerate(tree):
        if h != -1 and not (0 <= h < len(tree)):
            raise ValueError(f"node {i} has orphan head {h}")
        seen, j = set(), i
        while j != -1:
            if j in seen:
                raise ValueError(f"tree has a cycle through node {i}")
            seen.add(j)
            j = tree[j][0]


def expansion_head(linked, tree) -> int:
    """The word to expand a grounded box around: the linked word none of whose
    tree ancestors is itself linked (the syntactic head of the linked set).
    Ties break toward the lowest index."""
    lset = set(linked)
    for i in sorted(lset):
        j = tree[i][0]
        while j != -1 and j not in lset:
            j = tree[j][0]
        if j == -1:
            return i
    return min(lset)


def expand_spans(words, heads, tree, eligible=ELIGIBLE_RELATIONS):
    """Each grounded head word grows to the maximal contiguous span of its
    dependency subtree restricted to `eligible` child relations; expansion
    never includes another grounded head. Returns (start, end) word spans
    aligned with `heads`."""
    _check_tree(words, tree)
    children = {}
    for i, (h, label) in enumerate(tree):
        if h != -1:
            children.setdefault(h, []).append((i, label))

    spans = []
    head_set = set(heads)
    for h in heads:
        blocked = head_set - {h}
        collected = set()

        def grow(i):
            collected.add(i)
            for c, label in children.get(i, ()):
                if label in eligible and c not in blocked and c not in collected:
                    grow(c)

        grow(h)
        s = e = h
        while s - 1 in collected:
            s -= 1
        while e + 1 in collected:
            e += 1
        spans.append((s, e + 1))
    return spans


# -- grounder backends --------------------------------------------------------

class OracleGrounder:
    """Reads scene ground truth. Caption entities report their true box with
    seeded coordinate noise and similarity 1.0 at their own noun phrase's
    color and shape words; every other (box, word) score is U(0, 0.2), below
    the keep threshold."""

    def __init__(self, noise: float = 0.02):
        self.noise = noise

    def ground(self, scene, words, seed: int, image=None):
        rng = rng_for(seed, "oracle")
        np_of_entity = {}
        used = set()
        for i in range(len(words) - 2):
            if words[i] != "the":
                continue
            for ei, ent in enumerate(scene["entities"]):
                if (ei not in used and words[i + 1] == ent["color"]
                        and words[i + 2] == ent["shape"]):
                    np_of_entity[ei] = i
                    used.add(ei)
                    break
        report = []
        for ei, ent in enumerate(scene["entities"]):
            sims = rng.uniform(0.0, 0.2, len(words))
            box = np.array(ent["box"], dtype=np.float64) + rng.normal(0.0, self.noise, 4)
            box[2:] = np.maximum(box[2:], 0.02)
            box[0] = np.clip(box[0], box[2] / 2, 1 - box[2] / 2)
            box[1] = np.clip(box[1], box[3] / 2, 1 - box[3] / 2)
            if ei in np_of_entity:
                start = np_of_entity[ei]
                sims[start + 1] = 1.0
                sims[start + 2] = 1.0
            report.append((tuple(box), sims))
        return report


class ToyGrounder:
    """Pixel-level grounding without ground truth: connected components of
    each palette color become candidate boxes; the fill ratio of a component
    against its bounding box classifies the shape (square 1.0, circle 0.79,
    triangle 0.5). Similarities reward matching color and shape words."""

    MIN_PIXELS = 25

    def ground(self, scene, words, seed: int, image=None):
        if image is None:
            image = render_scene(scene)
        px = np.asarray(image) * 255.0
        report = []
        for color, rgb in COLOR_RGB.items():
            mask = np.all(np.abs(px - np.array(rgb, dtype=np.float64)) < 30.0, axis=-1)
            labels, n = ndimage.label(mask)
            for comp in range(1, n + 1):
                ys, xs = np.nonzero(labels == comp)
                if ys.size < self.MIN_PIXELS:
                    continue
                h_img, w_img = mask.shape
                x1, x2 = xs.min(), xs.max() + 1
                y1, y2 = ys.min(), ys.max() + 1
                fill = ys.size / ((x2 - x1) * (y2 - y1))
                shape = "square" if fill > 0.88 else ("circle" if fill > 0.65 else "triangle")
                box = ((x1 + x2) / (2 * w_img), (y1 + y2) / (2 * h_img),
                       (x2 - x1) / w_img, (y2 - y1) / h_img)
                sims = np.full(len(words), 0.10)
                for i, w in enumerate(words):
                    if w == color:
                        sims[i] = 0.90
                    elif w == shape:
                        sims[i] = 0.85
                    elif w in COLORS or w in SHAPES:
                        sims[i] = 0.05
                report.append((box, sims))
        return report


# -- parser backend -----------------------------------------------------------

class TemplateParser:
    """Dependency trees for the closed caption grammar:
    "the C S is [not] REL the C S" with REL one of the five relations."""

    def parse(self, words):
        n = len(words)
        tree = [None] * n

        def np_at(i):
            if (i + 2 < n and words[i] == "the" and words[i + 1] in COLORS
                    and words[i + 2] in SHAPES):
                return i + 2  # head of the phrase is the shape word
            return None

        s_head = np_at(0)
        if s_head is None or n < 4 or words[3] != "is":
            raise ValueError(f"cannot parse caption: {' '.join(words)!r}")
        root = 3
        tree[0] = (s_head, "det")
        tree[1] = (s_head, "amod")
        tree[s_head] = (root, "nsubj")
        tree[root] = (-1, "root")

        i = 4
        if i < n and words[i] == "not":
            tree[i] = (root, "neg")
            i += 1
        rel2 = " ".join(words[i:i + 2]) if i + 1 < n else ""
        rel1 = words[i] if i < n else ""
        if rel2 in RELATIONS:
            tree[i] = (root, "acomp")
            tree[i + 1] = (i, "prep")
            prep = i + 1
            i += 2
        elif rel1 in RELATIONS:
            tree[i] = (root, "prep")
            prep = i
            i += 1
        else:
            raise ValueError(f"cannot parse relation in: {' '.join(words)!r}")
        o_head = np_at(i)
        if o_head is None or i + 3 != n:
            raise ValueError(f"cannot parse object phrase in: {' '.join(words)!r}")
        tree[i] = (o_head, "det")
        tree[i + 1] = (o_head, "amod")
        tree[o_head] = (prep, "pobj")
        return tree


# -- step 3: corpus building --------------------------------------------------

def inline_image(scene, image) -> str:
    return base64.b64encode(ppm_bytes(image)).decode("ascii")


def _char_span(words, s, e):
    start = 0 if s == 0 else len(" ".join(words[:s])) + 1
    return start, len(" ".join(words[:e]))


def record_seed(seed: int, rid: str) -> int:
    return zlib.crc32(f"{seed}:{rid}".encode())


def _grounded_record(rid, scene, words, image, grounder, parser, seed, n_rois):
    rseed = record_seed(seed, rid)
    report = grounder.ground(scene, words, rseed, image)
    pairs = pair_boxes_words(report, words)
    if not pairs:
        raise ValueError("no grounded boxes survive the similarity thresholds")
    tree = parser.parse(words)
    _check_tree(words, tree)
    spans = expand_spans(words, [expansion_head(p.words, tree) for p in pairs], tree)
    order = sorted(range(len(pairs)), key=lambda k: spans[k])
    spans = [spans[k] for k in order]
    pairs = [pairs[k] for k in order]
    elements, forms = G.insert_tokens(words, spans, rseed, n_rois=n_rois)
    span_rows = []
    for (s, e), p in zip(spans, pairs):
        cs, ce = _char_span(words, s, e)
        span_rows.append({"start": cs, "end": ce, "box": [round(c, 6) for c in p.box],
                          "sim": round(p.sim, 6)})
    return {
        "id": rid,
        "image": inline_image(scene, image),
        "caption": " ".join(words),
        "comm_text": G.to_text(elements),
        "spans": span_rows,
    }, forms


def build_corpus(scenes, grounder, parser, seed: int, n_rois: int = 1):
    """Grounded caption records for every scene; failures are logged and
    skipped. Returns (records, stats, skipped)."""
    records, skipped = [], []
    form_counts = {"first_a": 0, "rest_a": 0, "rest_b": 0}
    for idx, scene in enumerate(scenes):
        rid = scene.get("id", f"r{idx:06d}")
        try:
            words = scene["caption"].split()
            image = render_scene(scene)
            rec, forms = _grounded_record(rid, scene, words, image, grounder,
                                          parser, seed, n_rois)
        except Exception as e:
            log.warning("skipping %s: %s", rid, e)
            skipped.append({"id": rid, "error": str(e)})
            continue
        records.append(rec)
        if forms:
            form_counts["first_a"] += 1
            for f in forms[1:]:
                form_counts["rest_b" if f == G.FORM_B else "rest_a"] += 1
    rest = form_counts["rest_a"] + form_counts["rest_b"]
    stats = {
        "records": len(records),
        "skipped": len(skipped),
        "spans": sum(len(r["spans"]) for r in records),
        "form_b_ratio_rest": (form_counts["rest_b"] / rest) if rest else None,
    }
    return records, stats, skipped


def build_training_corpus(scenes, grounder, parser, seed: int, holdout=(),
                          qa_fraction: float = 0.15, neg_fraction: float = 0.10,
                          n_rois: int = 1):
    """Training mix: grounded captions, with a slice of negated grounded
    captions (false relation, "not" inserted) and a slice of plain-text
    question-answer records (no communication tokens, empty spans). Negation
    and QA fall back to the plain caption when the holdout filter rejects
    them. Returns (records, stats, skipped)."""
    records, skipped = [], []
    kinds = {"caption": 0, "negated": 0, "qa": 0}
    for idx, scene in enumerate(scenes):
        rid = scene.get("id", f"r{idx:06d}")
        rng = rng_for(seed, "mix", idx)
        draw = rng.random()
        try:
            image = render_scene(scene)
            rec = None
            kind = "caption"
            if draw < qa_fraction:
                qa = make_qa(scene, rng, holdout)
                if qa is not None:
                    q_words, answer = qa
                    text = " ".join(["question:"] + q_words + ["short", "answer:", answer])
                    rec = {"id": rid, "image": inline_image(scene, image),
                           "caption": text, "comm_text": text, "spans": []}
                    kind = "qa"
            elif draw < qa_fraction + neg_fraction:
                neg = make_negated_caption(scene, rng, holdout)
                if neg is not None:
                    n_words, _ = neg
                    rec, _ = _grounded_record(rid, scene, n_words, image, grounder,
                                              parser, seed, n_rois)
                    kind = "negated"
            if rec is None:
                kind = "caption"
                words = scene["caption"].split()
                rec, _ = _grounded_record(rid, scene, words, image, grounder,
                                          parser, seed, n_rois)
            kinds[kind] += 1
        except Exception as e:
            log.warning("skipping %s: %s", rid, e)
            skipped.append({"id": rid, "error": str(e)})
            continue
        records.append(rec)
    stats = {"records": len(records), "skipped": len(skipped), **kinds}
    return records, stats, skipped
