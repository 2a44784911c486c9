"""Zero-shot evaluation protocols over the synthetic micro-world.

Five tasks, all built on teacher-forced scoring and communicative decoding:
relation-candidate ranking, caption-image matching by perplexity, interaction
detection with mean average precision, referring-expression localization with
perplexity reranking, and short-answer QA. Every report carries per-item
records sufficient to recompute its aggregate metrics (the audit property).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import grammar as G
from . import vocab as V
from .decoder import (DecodeConfig, communicative_decode, perplexity,
                      score_box_candidate, teacher_forced_nlls)
from .scenes import COLORS, RELATIONS, SHAPES, make_qa, render_scene
from .util import rng_for
from .vision import iou

log = logging.getLogger("covlm.evals")

ALL_PHRASES = tuple(f"the {c} {s}" for c in COLORS for s in SHAPES)


def _check_box(box, what):
    cx, cy, w, h = box
    if not all(np.isfinite([cx, cy, w, h])) or w <= 0 or h <= 0 or w > 1 or h > 1 \
            or not (0 <= cx <= 1 and 0 <= cy <= 1):
        raise ValueError(f"{what} is not a valid box: {box}")


# -- items ----------------------------------------------------------------------

@dataclass
class AroItem:
    image: np.ndarray
    subject: str        # e.g. "the red square"
    relation: str       # connecting text between the two phrases, e.g. "is left of"
    gt_object: str
    candidates: list

    def __post_init__(self):
        if len(self.candidates) != len(set(self.candidates)):
            raise ValueError("candidate list contains duplicates")
        if len(self.candidates) < 2:
            raise ValueError("need at least two candidates to rank")
        if self.gt_object not in self.candidates:
            raise ValueError(f"ground truth {self.gt_object!r} not among candidates")
        if not self.subject.split() or not self.relation.split():
            raise ValueError("subject and relation must be non-empty")


@dataclass
class ColaPair:
    image_a: np.ndarray
    caption_a: str
    image_b: np.ndarray
    caption_b: str

    def __post_init__(self):
        # identical images are allowed (the pair can then never score correct);
        # identical captions would make the assignment meaningless
        if self.caption_a == self.caption_b:
            raise ValueError("pair captions must be distinct")


@dataclass
class HoiItem:
    image: np.ndarray
    subject: str                        # shared subject phrase, e.g. "the red square"
    gts: list                           # (subject box, verb, object phrase, object box)
    verbs: tuple = RELATIONS

    def __post_init__(self):
        if len(set(self.verbs)) != len(self.verbs) or not self.verbs:
            raise ValueError("verb vocabulary must be non-empty and unique")
        for sb, verb, obj, ob in self.gts:
            _check_box(sb, "subject box")
            _check_box(ob, "object box")
            if verb not in self.verbs:
                raise ValueError(f"gt verb {verb!r} not in the verb vocabulary")
            if not str(obj).split():
                raise ValueError("gt object phrase must be non-empty")


@dataclass
class RefExpItem:
    image: np.ndarray
    expression: str
    gt_box: tuple

    def __post_init__(self):
        _check_box(self.gt_box, "gt box")
        if not self.expression.split():
            raise ValueError("expression must be non-empty")


@dataclass
class VqaItem:
    image: np.ndarray
    question: str
    answer: str

    def __post_init__(self):
        if not self.question.split() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")


# -- report ---------------------------------------------------------------------

@dataclass
class MetricReport:
    task: str
    metrics: dict
    items: list
    info: dict = field(default_factory=dict)

    def audit(self) -> bool:
        """Aggregates recomputed from the per-item records match exactly."""
        return aggregate(self.task, self.items, self.info) == self.metrics

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": self.metrics,
                "info": self.info, "items": self.items}


def report_from_dict(d) -> MetricReport:
    return MetricReport(task=d["task"], metrics=d["metrics"],
                        items=d["items"], info=d.get("info", {}))


def aggregate(task, items, info=None) -> dict:
    """Recompute a report's metrics map from its per-item records."""
    info = info or {}
    if task == "aro":
        top1 = [rec["ranking"][0][0] == rec["gt"] for rec in items]
        k = info.get("top_k", 5)
        topk = [rec["gt"] in [c for c, _ in rec["ranking"][:k]] for rec in items]
        return {"top1": _mean(top1), "top5": _mean(topk)}
    if task == "cola":
        correct = [_cola_correct(rec["ppl"]) for rec in items]
        return {"pair_acc": _mean(correct)}
    if task == "hoi":
        maps, _ = _hoi_maps(items, info["iou_threshold"],
                            {tuple(c) for c in info.get("rare", [])})
        return maps
    if task == "refexp":
        final = [rec["iou_final"] >= 0.5 for rec in items]
        raw = [rec["iou_raw"] >= 0.5 for rec in items]
        return {"acc": _mean(final), "raw_acc": _mean(raw),
                "mean_iou": _mean([rec["iou_final"] for rec in items])}
    if task == "vqa":
        correct = [rec["prediction"] == rec["answer"] for rec in items]
        return {"acc": _mean(correct)}
    raise ValueError(f"unknown task {task!r}")


def _mean(xs):
    return float(np.mean([float(x) for x in xs])) if xs else 0.0


# -- relation-candidate ranking ---------------------------------------------------

def eval_aro(model, items, cfg: DecodeConfig | None = None,
             comm: bool = True) -> MetricReport:
    """Rank candidate object phrases as continuations of
    `<obj> subject </obj> <visual> <box> [roi] relation <previsual> <prebox>
    [roi ...] <obj> candidate </obj>` by mean NLL of the candidate's words.
    Detection fills all roi slots. Ranking ties break on the phrase string, so
    the result is invariant to candidate order. `comm=False` scores the plain
    word sequence instead (the no-communication control; the detector is
    never invoked)."""
    cfg = cfg or DecodeConfig()
    records = []
    for idx, item in enumerate(items):
        if comm:
            prefix = ([G.special(V.OBJ)] + [G.word(w) for w in item.subject.split()]
                      + [G.special(V.OBJ_END), G.special(V.VISUAL), G.special(V.BOX), G.roi(0)]
                      + [G.word(w) for w in item.relation.split()]
                      + [G.special(V.PREVISUAL), G.special(V.PREBOX)]
                      + [G.roi(1) for _ in range(cfg.m_prebox)])
        else:
            prefix = [G.word(w) for w in item.subject.split() + item.relation.split()]
        scored = []
        for cand in item.candidates:
            cand_words = [G.word(w) for w in cand.split()]
            if comm:
                els = prefix + [G.special(V.OBJ)] + cand_words + [G.special(V.OBJ_END)]
                word_idxs = range(len(prefix) + 1, len(els) - 1)
            else:
                els = prefix + cand_words
                word_idxs = range(len(prefix), len(els))
            nll, _, _ = teacher_forced_nlls(model, item.image, els, cfg)
            scored.append((cand, float(np.mean([nll[i] for i in word_idxs]))))
        ranking = sorted(scored, key=lambda cn: (cn[1], cn[0]))
        records.append({"index": idx, "gt": item.gt_object,
                        "ranking": [[c, n] for c, n in ranking]})
    info = {"top_k": 5, "comm": bool(comm)}
    return MetricReport("aro", aggregate("aro", records, info), records, info)


# -- caption-image matching -------------------------------------------------------

def _cola_correct(ppl) -> bool:
    # caption c picks the strictly lower-perplexity image; ties lose
    pick_a = 0 if ppl[0][0] < ppl[1][0] else (1 if ppl[1][0] < ppl[0][0] else None)
    pick_b = 0 if ppl[0][1] < ppl[1][1] else (1 if ppl[1][1] < ppl[0][1] else None)
    return pick_a == 0 and pick_b == 1


def eval_cola(model, pairs, cfg: DecodeConfig | None = None) -> MetricReport:
    """2x2 perplexity matrix per pair (rows: images, columns: captions); a
    pair counts only when both captions pick their own image, ties as
    incorrect. Captions are scored as given, so grounded caption text runs
    the detector at its communication tokens."""
    cfg = cfg or DecodeConfig()
    records = []
    for idx, pair in enumerate(pairs):
        caps = [G.from_text(pair.caption_a), G.from_text(pair.caption_b)]
        ppl = [[perplexity(model, img, els, cfg) for els in caps]
               for img in (pair.image_a, pair.image_b)]
        records.append({"index": idx, "ppl": ppl, "correct": _cola_correct(ppl)})
    return MetricReport("cola", aggregate("cola", records), records)


# -- interaction detection --------------------------------------------------------

def average_precision(tp_flags, n_gt: int) -> float:
    """All-points interpolated AP for a ranked prediction list."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth instance")
    if not len(tp_flags):
        return 0.0
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev = 0.0, 0.0
    for i in np.nonzero(flags)[0]:
        ap += (recall[i] - prev) * envelope[i]
        prev = recall[i]
    return float(ap)


def _hoi_maps(items, iou_threshold, rare_cats):
    """(metrics map, excluded category list) from per-item HOI records."""
    gt_by_cat, pred_by_cat = {}, {}
    for rec in items:
        for g in rec["gts"]:
            gt_by_cat.setdefault((g["verb"], g["object"]), []).append(
                dict(g, item=rec["index"], matched=False))
        for k, p in enumerate(rec["predictions"]):
            pred_by_cat.setdefault((p["verb"], p["object"]), []).append(
                dict(p, item=rec["index"], order=k))

    ap_by_cat = {}
    for cat, gts in sorted(gt_by_cat.items()):
        preds = sorted(pred_by_cat.get(cat, []),
                       key=lambda p: (-p["score"], p["item"], p["order"]))
        for g in gts:
            g["matched"] = False
        flags = []
        for p in preds:
            best, best_q = None, 0.0
            for g in gts:
                if g["matched"] or g["item"] != p["item"]:
                    continue
                qs = iou(p["sub_box"], g["sub_box"])
                qo = iou(p["obj_box"], g["obj_box"])
                if qs >= iou_threshold and qo >= iou_threshold and min(qs, qo) > best_q:
                    best, best_q = g, min(qs, qo)
            if best is not None:
                best["matched"] = True
            flags.append(best is not None)
        ap_by_cat[cat] = average_precision(flags, len(gts))

    excluded = sorted(set(pred_by_cat) - set(gt_by_cat))
    metrics = {"map_full": _mean(list(ap_by_cat.values()))}
    rare = [ap for cat, ap in ap_by_cat.items() if cat in rare_cats]
    nonrare = [ap for cat, ap in ap_by_cat.items() if cat not in rare_cats]
    if rare:
        metrics["map_rare"] = _mean(rare)
    if nonrare:
        metrics["map_nonrare"] = _mean(nonrare)
    return metrics, excluded


def eval_hoi(model, items, iou_threshold: float = 0.5, train_counts=None,
             cfg: DecodeConfig | None = None) -> MetricReport:
    """Verb prediction by perplexity contrast ("{subject} is {verb}" vs
    "{subject} is not {verb}"), then for each predicted verb a constrained
    decode localizes the subject at `<visual>` and the object at
    `<previsual>`, reading the object phrase from the generated span. A
    prediction is a true positive iff the verb matches and both boxes reach
    the IoU threshold against an unmatched ground truth. AP per
    (verb, object) category; categories rarer than 10 training instances
    (per `train_counts`) aggregate into the rare split."""
    cfg = cfg or DecodeConfig()
    train_counts = train_counts or {}
    records = []
    for idx, item in enumerate(items):
        subj_words = item.subject.split()
        subj_els = [G.special(V.OBJ)] + [G.word(w) for w in subj_words] + [G.special(V.OBJ_END)]

        res1 = communicative_decode(model, item.image, subj_els + [G.special(V.VISUAL)],
                                    replace(cfg, max_tokens=0, m_box=1))
        sub_prop = res1.boxes[min(res1.boxes)][0]

        predicted = []
        for verb in item.verbs:
            pos = [G.word(w) for w in subj_words + ["is"] + verb.split()]
            neg = [G.word(w) for w in subj_words + ["is", "not"] + verb.split()]
            if perplexity(model, item.image, pos, cfg) < perplexity(model, item.image, neg, cfg):
                predicted.append(verb)

        predictions = []
        for verb in predicted:
            prompt = (subj_els + [G.special(V.VISUAL), G.special(V.BOX), G.roi(0)]
                      + [G.word(w) for w in ["is"] + verb.split()]
                      + [G.special(V.PREVISUAL), G.special(V.PREBOX)])
            res2 = communicative_decode(model, item.image, prompt,
                                        replace(cfg, max_tokens=8, m_prebox=1),
                                        prompt_boxes=(sub_prop.box,))
            obj_prop = res2.boxes[min(res2.boxes)][0]
            tail = res2.sequence[len(prompt):]
            obj_words = []
            in_span = False
            for el in tail:
                if el.kind == G.SPECIAL and el.value == V.OBJ:
                    in_span = True
                elif el.kind == G.SPECIAL and el.value == V.OBJ_END:
                    break
                elif in_span and el.kind == G.WORD:
                    obj_words.append(el.value)
            predictions.append({
                "verb": verb,
                "object": " ".join(obj_words),
                "sub_box": [float(c) for c in sub_prop.box],
                "obj_box": [float(c) for c in obj_prop.box],
                "score": float((sub_prop.score + obj_prop.score) / 2),
            })

        records.append({
            "index": idx,
            "verbs_predicted": predicted,
            "predictions": predictions,
            "gts": [{"verb": verb, "object": obj,
                     "sub_box": [float(c) for c in sb],
                     "obj_box": [float(c) for c in ob]}
                    for sb, verb, obj, ob in item.gts],
        })

    rare = sorted({(g["verb"], g["object"]) for rec in records for g in rec["gts"]
                   if train_counts.get((g["verb"], g["object"]), 0) < 10})
    info = {"iou_threshold": float(iou_threshold), "rare": [list(c) for c in rare]}
    metrics, excluded = _hoi_maps(records, iou_threshold, set(rare))
    info["excluded"] = [list(c) for c in excluded]
    if excluded:
        log.info("hoi: %d predicted categories had no ground truth: %s",
                 len(excluded), excluded)
    return MetricReport("hoi", metrics, records, info)


# -- referring expressions --------------------------------------------------------

REFEXP_POOL = 16    # proposal pool size fed to the candidate rule


def eval_refexp(model, items, cfg: DecodeConfig | None = None) -> MetricReport:
    """Detect with `<obj> expression </obj> <visual>`, keep boxes scoring at
    least half the top score, rerank the candidates by the perplexity of the
    expression when looking at each box first, and measure IoU >= 0.5
    accuracy of the final pick. Zero proposals fall back to the whole image,
    which still counts as a prediction."""
    cfg = cfg or DecodeConfig()
    records = []
    for idx, item in enumerate(items):
        words = item.expression.split()
        prompt = ([G.special(V.OBJ)] + [G.word(w) for w in words]
                  + [G.special(V.OBJ_END), G.special(V.VISUAL)])
        res = communicative_decode(model, item.image, prompt,
                                   replace(cfg, max_tokens=0, m_box=REFEXP_POOL))
        props = [res.boxes[k][0] for k in sorted(res.boxes)]
        top = props[0]
        cands = [p for p in props if p.score >= 0.5 * top.score]
        ppls = [score_box_candidate(model, item.image, words, p.box, cfg) for p in cands]
        final = cands[int(np.argmin(ppls))]
        records.append({
            "index": idx,
            "candidates": [[list(map(float, p.box)), float(p.score), float(q)]
                           for p, q in zip(cands, ppls)],
            "raw_box": [float(c) for c in top.box],
            "final_box": [float(c) for c in final.box],
            "gt_box": [float(c) for c in item.gt_box],
            "iou_raw": float(iou(top.box, item.gt_box)),
            "iou_final": float(iou(final.box, item.gt_box)),
            "fallback": bool(res.no_detection),
        })
    return MetricReport("refexp", aggregate("refexp", records), records)


# -- short-answer QA --------------------------------------------------------------

def eval_vqa(model, items, cfg: DecodeConfig | None = None) -> MetricReport:
    """Greedy decode after "question: {question} short answer:"; exact match
    on the lowercased, trimmed answer."""
    cfg = cfg or DecodeConfig()
    records = []
    for idx, item in enumerate(items):
        prompt = [G.word(w) for w in
                  ["question:"] + item.question.lower().split() + ["short", "answer:"]]
        res = communicative_decode(model, item.image, prompt,
                                   replace(cfg, max_tokens=6, greedy=True))
        answer_words = G.strip_special(res.sequence[len(prompt):])
        records.append({"index": idx,
                        "prediction": " ".join(answer_words).lower().strip(),
                        "answer": item.answer.lower().strip()})
        records[-1]["correct"] = records[-1]["prediction"] == records[-1]["answer"]
    return MetricReport("vqa", aggregate("vqa", records), records)


# -- synthetic eval sets ----------------------------------------------------------

def _phrase(ent) -> str:
    return f"the {ent['color']} {ent['shape']}"


def make_aro_items(scenes, seed: int, n_candidates: int = 6):
    """One ranking item per scene: the caption's object phrase among sampled
    distractor phrases."""
    items = []
    for idx, scene in enumerate(scenes):
        words = scene["caption"].split()
        gt = " ".join(words[-3:])
        rng = rng_for(seed, "aro-item", idx)
        pool = [p for p in ALL_PHRASES if p != gt]
        cands = [pool[i] for i in rng.permutation(len(pool))[:n_candidates - 1]] + [gt]
        cands = [cands[i] for i in rng.permutation(len(cands))]
        items.append(AroItem(image=render_scene(scene), subject=" ".join(words[:3]),
                             relation=" ".join(words[3:-3]), gt_object=gt,
                             candidates=cands))
    return items


def make_cola_pairs(scenes):
    """Consecutive scenes with distinct captions become pairs."""
    pairs, pending = [], None
    for scene in scenes:
        if pending is None:
            pending = scene
        elif scene["caption"] != pending["caption"]:
            pairs.append(ColaPair(image_a=render_scene(pending),
                                  caption_a=pending["caption"],
                                  image_b=render_scene(scene),
                                  caption_b=scene["caption"]))
            pending = None
    return pairs


def make_hoi_items(scenes):
    items = []
    for scene in scenes:
        si, rel, oi = scene["relation"]
        ents = scene["entities"]
        items.append(HoiItem(image=render_scene(scene), subject=_phrase(ents[si]),
                             gts=[(tuple(ents[si]["box"]), rel, _phrase(ents[oi]),
                                   tuple(ents[oi]["box"]))],
                             verbs=RELATIONS))
    return items


def make_refexp_items(scenes):
    """Entity descriptors are unique within a scene by construction, so every
    entity is a valid referring-expression target; the subject is used."""
    return [RefExpItem(image=render_scene(s), expression=_phrase(s["entities"][0]),
                       gt_box=tuple(s["entities"][0]["box"]))
            for s in scenes]


def make_vqa_items(scenes, seed: int, holdout=()):
    items = []
    for idx, scene in enumerate(scenes):
        qa = make_qa(scene, rng_for(seed, "vqa-item", idx), holdout)
        if qa is None:
            continue
        q_words, answer = qa
        items.append(VqaItem(image=render_scene(scene), question=" ".join(q_words),
                             answer=answer))
    return items


def hoi_train_counts(records) -> dict:
    """(verb, object phrase) instance counts over a training corpus, for the
    rare/non-rare split. Counts the caption relation of grounded records."""
    counts = {}
    for rec in records:
        words = rec["caption"].split()
        if not rec.get("spans") or len(words) < 8 or "question:" in rec["caption"]:
            continue
        neg = 1 if words[4] == "not" else 0
        verb = " ".join(words[4 + neg:len(words) - 3])
        if verb not in RELATIONS or neg:
            continue
        cat = (verb, " ".join(words[-3:]))
        counts[cat] = counts.get(cat, 0) + 1
    return counts
