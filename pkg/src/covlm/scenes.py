"""Synthetic compositional micro-world.

Scenes are 64x64 images of colored shapes with one declared spatial
relation between the first two entities. Captions follow the template
"the {color} {shape} is {relation} the {color} {shape}". Entity
descriptors (color, shape) are unique within a scene so every referring
expression is unambiguous.

All geometry uses normalized (cx, cy, w, h) boxes; pixel placement works
on integer corners, and 64 being a power of two keeps the normalized
coordinates exact binary fractions, so records round-trip losslessly.
"""

from __future__ import annotations

import numpy as np

from .util import rng_for

IMAGE_SIZE = 64
MIN_SIDE = 12
MAX_SIDE = 24
GAP = 0.05          # minimum normalized edge gap for directional relations
ON_TOL = 0.03       # max normalized vertical slack for "on"
PIXEL_GAP = 4       # placement gap in pixels; 4/64 = 0.0625 > GAP

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATIONS = ("left of", "right of", "above", "below", "on")

COLOR_RGB = {
    "red": (220, 50, 47),
    "green": (64, 171, 74),
    "blue": (48, 96, 212),
    "yellow": (235, 210, 60),
}
BACKGROUND_RGB = (128, 128, 128)


class SceneError(RuntimeError):
    pass


# -- box helpers ----------------------------------------------------------------


def box_edges(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = box_edges(a)
    bx1, by1, bx2, by2 = box_edges(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _px_to_norm(x1, y1, x2, y2):
    s = float(IMAGE_SIZE)
    return [(x1 + x2) / (2 * s), (y1 + y2) / (2 * s), (x2 - x1) / s, (y2 - y1) / s]


def _norm_to_px(box):
    x1, y1, x2, y2 = box_edges(box)
    s = IMAGE_SIZE
    return (int(round(x1 * s)), int(round(y1 * s)), int(round(x2 * s)), int(round(y2 * s)))


# -- relation predicates ----------------------------------------------------------


def relation_holds(rel: str, sub_box, obj_box) -> bool:
    """Is `sub rel obj` geometrically true of the two normalized boxes?"""
    sx1, sy1, sx2, sy2 = box_edges(sub_box)
    ox1, oy1, ox2, oy2 = box_edges(obj_box)
    scx, scy = sub_box[0], sub_box[1]
    ocx, ocy = obj_box[0], obj_box[1]
    eps = 1e-9
    if rel == "left of":
        return scx < ocx and (ox1 - sx2) >= GAP - eps
    if rel == "right of":
        return scx > ocx and (sx1 - ox2) >= GAP - eps
    if rel == "above":
        return scy < ocy and (oy1 - sy2) >= GAP - eps
    if rel == "below":
        return scy > ocy and (sy1 - oy2) >= GAP - eps
    if rel == "on":
        overlap = min(sx2, ox2) - max(sx1, ox1)
        return (scy < ocy and abs(oy1 - sy2) <= ON_TOL
                and overlap >= 0.4 * min(sub_box[2], obj_box[2]))
    raise ValueError(f"unknown relation {rel!r}")


# -- captions ---------------------------------------------------------------------


def caption_words(tup) -> list:
    c1, s1, rel, c2, s2 = tup
    return ["the", c1, s1, "is"] + rel.split() + ["the", c2, s2]


def caption_spans(tup):
    """Word-index spans of the two noun phrases in caption_words(tup)."""
    rel_len = len(tup[2].split())
    return [(0, 3), (4 + rel_len, 7 + rel_len)]


def all_tuples() -> list:
    """Every (color, shape, relation, color, shape) with distinct descriptors."""
    out = []
    for c1 in COLORS:
        for s1 in SHAPES:
            for rel in RELATIONS:
                for c2 in COLORS:
                    for s2 in SHAPES:
                        if (c1, s1) != (c2, s2):
                            out.append((c1, s1, rel, c2, s2))
    return out


def sample_holdout(seed: int, n: int = 40) -> set:
    """Compositional holdout: n caption tuples reserved for evaluation."""
    pool = all_tuples()
    rng = rng_for(seed, "holdout")
    idx = rng.choice(len(pool), size=n, replace=False)
    return {pool[i] for i in sorted(idx)}


# -- generation -------------------------------------------------------------------


def generate_scene(seed: int, n_entities: int | None = None, holdout=(),
                   force_tuple=None) -> dict:
    """Deterministic scene for `seed`. Entity 0 is the caption subject,
    entity 1 the object; any further entities are distractors. Caption
    tuples in `holdout` are never produced unless forced explicitly."""
    holdout = set(map(tuple, holdout))
    for attempt in range(64):
        rng = rng_for(seed, "scene", attempt)
        scene = _try_generate(rng, n_entities, holdout, force_tuple)
        if scene is not None:
            scene["seed"] = int(seed)
            return scene
    raise SceneError(f"placement failed for seed {seed} after derived-seed retries")


def _try_generate(rng, n_entities, holdout, force_tuple):
    n = int(n_entities) if n_entities is not None else int(rng.integers(2, 5))
    if force_tuple is not None:
        tup = tuple(force_tuple)
    else:
        pool = [t for t in all_tuples() if t not in holdout]
        tup = pool[int(rng.integers(0, len(pool)))]
    c1, s1, rel, c2, s2 = tup

    for _ in range(100):
        sides = [int(rng.integers(MIN_SIDE, MAX_SIDE + 1)) for _ in range(n)]
        placed = _place_pair(rng, rel, sides[0], sides[1])
        if placed is None:
            continue
        boxes_px = list(placed)
        ok = True
        # distractor descriptors must not collide with the caption entities
        used = {(c1, s1), (c2, s2)}
        combos = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in used]
        descs = [(c1, s1), (c2, s2)]
        for i in range(2, n):
            pick = combos[int(rng.integers(0, len(combos)))]
            combos.remove(pick)
            descs.append(pick)
            spot = _place_clear(rng, sides[i], boxes_px)
            if spot is None:
                ok = False
                break
            boxes_px.append(spot)
        if not ok:
            continue
        entities = [{"shape": s, "color": c, "box": _px_to_norm(*b)}
                    for (c, s), b in zip(descs, boxes_px)]
        if not relation_holds(rel, entities[0]["box"], entities[1]["box"]):
            continue
        return {
            "entities": entities,
            "relation": [0, rel, 1],
            "tuple": list(tup),
            "caption": " ".join(caption_words(tup)),
        }
    return None


def _place_pair(rng, rel, s_sub, s_obj):
    """Pixel corners for subject and object honoring the relation."""
    S, m = IMAGE_SIZE, 1
    for _ in range(30):
        ox1 = int(rng.integers(m, S - m - s_obj + 1))
        oy1 = int(rng.integers(m, S - m - s_obj + 1))
        ox2, oy2 = ox1 + s_obj, oy1 + s_obj

        def within(lo, hi):
            if hi < lo:
                return None
            return int(rng.integers(lo, hi + 1))

        if rel == "left of":
            sx1 = within(m, ox1 - PIXEL_GAP - s_sub)
            sy1 = within(m, S - m - s_sub)
        elif rel == "right of":
            sx1 = within(ox2 + PIXEL_GAP, S - m - s_sub)
            sy1 = within(m, S - m - s_sub)
        elif rel == "above":
            sx1 = within(m, S - m - s_sub)
            sy1 = within(m, oy1 - PIXEL_GAP - s_sub)
        elif rel == "below":
            sx1 = within(m, S - m - s_sub)
            sy1 = within(oy2 + PIXEL_GAP, S - m - s_sub)
        elif rel == "on":
            sy1 = oy1 - s_sub
            if sy1 < m:
                sy1 = None
            # keep at least half the smaller width overlapping
            minov = (min(s_sub, s_obj) + 1) // 2
            sx1 = within(max(m, ox1 - s_sub + minov), min(S - m - s_sub, ox2 - minov))
        else:
            raise ValueError(f"unknown relation {rel!r}")

        if sx1 is None or sy1 is None:
            continue
        return (sx1, sy1, sx1 + s_sub, sy1 + s_sub), (ox1, oy1, ox2, oy2)
    return None


def _place_clear(rng, side, taken_px, max_iou=0.1):
    S, m = IMAGE_SIZE, 1
    for _ in range(60):
        x1 = int(rng.integers(m, S - m - side + 1))
        y1 = int(rng.integers(m, S - m - side + 1))
        cand = (x1, y1, x1 + side, y1 + side)
        if all(_px_iou(cand, t) <= max_iou for t in taken_px):
            return cand
    return None


def _px_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


# -- rendering --------------------------------------------------------------------


def render(entities) -> np.ndarray:
    """(IMAGE_SIZE, IMAGE_SIZE, 3) float32 in [0,1]. Deterministic; later
    entities paint over earlier ones (overlaps are capped at IoU 0.1)."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = np.array(BACKGROUND_RGB, dtype=np.float32) / 255.0
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    for ent in entities:
        x1, y1, x2, y2 = _norm_to_px(ent["box"])
        color = np.array(COLOR_RGB[ent["color"]], dtype=np.float32) / 255.0
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        if ent["shape"] == "circle":
            r = (x2 - x1) / 2.0
            mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
        elif ent["shape"] == "square":
            mask = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
        elif ent["shape"] == "triangle":
            # apex at top center, base along the bottom edge
            h = max(y2 - y1, 1)
            frac = (yy + 0.5 - y1) / h
            half = frac * (x2 - x1) / 2.0
            mask = (yy >= y1) & (yy < y2) & (np.abs(xx + 0.5 - cx) <= half)
        else:
            raise ValueError(f"unknown shape {ent['shape']!r}")
        img[mask] = color
    return img


def render_scene(scene) -> np.ndarray:
    return render(scene["entities"])


# -- question-answer and negation templates ------------------------------------


QA_WORDS = ("question:", "short", "answer:", "what", "color", "shape", "is",
            "thing", "?", "yes", "no", "not")


def vocabulary_words() -> list:
    """Every word the micro-world can emit, in a fixed order."""
    words = ["the", "is"]
    words += [w for rel in RELATIONS for w in rel.split()]
    words += list(COLORS) + list(SHAPES)
    words += list(QA_WORDS)
    seen = set()
    out = []
    for w in words:
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def make_qa(scene, rng, holdout=()):
    """One (question words, answer word) pair for the scene, or None.

    Three templates: color of a uniquely-shaped entity, shape of a uniquely-
    colored entity, and a yes/no relation probe. Relation probes whose
    positive 5-tuple sits in the compositional holdout are skipped so QA
    text never leaks held-out compositions into training."""
    holdout = set(map(tuple, holdout))
    ents = scene["entities"]
    options = []

    shape_counts = {}
    color_counts = {}
    for e in ents:
        shape_counts[e["shape"]] = shape_counts.get(e["shape"], 0) + 1
        color_counts[e["color"]] = color_counts.get(e["color"], 0) + 1
    for e in ents:
        if shape_counts[e["shape"]] == 1:
            options.append((["what", "color", "is", "the", e["shape"], "?"], e["color"]))
        if color_counts[e["color"]] == 1:
            options.append((["what", "shape", "is", "the", e["color"], "thing", "?"], e["shape"]))

    si, rel, oi = scene["relation"]
    sub, obj = ents[si], ents[oi]
    tup_true = (sub["color"], sub["shape"], rel, obj["color"], obj["shape"])
    if tup_true not in holdout:
        q = ["is", "the", sub["color"], sub["shape"]] + rel.split() + \
            ["the", obj["color"], obj["shape"], "?"]
        options.append((q, "yes"))
    false_rels = [r for r in RELATIONS
                  if not relation_holds(r, sub["box"], obj["box"])
                  and (sub["color"], sub["shape"], r, obj["color"], obj["shape"]) not in holdout]
    if false_rels:
        r = false_rels[int(rng.integers(0, len(false_rels)))]
        q = ["is", "the", sub["color"], sub["shape"]] + r.split() + \
            ["the", obj["color"], obj["shape"], "?"]
        options.append((q, "no"))

    if not options:
        return None
    return options[int(rng.integers(0, len(options)))]


def make_negated_caption(scene, rng, holdout=()):
    """Words of "the A is not REL the B" for a relation false of the pair,
    with the same two noun phrases (and spans) as the true caption."""
    holdout = set(map(tuple, holdout))
    ents = scene["entities"]
    si, rel, oi = scene["relation"]
    sub, obj = ents[si], ents[oi]
    false_rels = [r for r in RELATIONS
                  if not relation_holds(r, sub["box"], obj["box"])
                  and (sub["color"], sub["shape"], r, obj["color"], obj["shape"]) not in holdout]
    if not false_rels:
        return None
    r = false_rels[int(rng.integers(0, len(false_rels)))]
    words = ["the", sub["color"], sub["shape"], "is", "not"] + r.split() + \
            ["the", obj["color"], obj["shape"]]
    rel_len = len(r.split())
    spans = [(0, 3), (5 + rel_len, 8 + rel_len)]
    return words, spans


# -- image files ------------------------------------------------------------------


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary PPM (P6); no imaging dependency needed for a 64x64 dump."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def parse_ppm(data: bytes, name: str = "<bytes>") -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{name}: not a binary PPM")
    w, h = map(int, parts[1].split())
    arr = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_ppm(fh.read(), name=path)
