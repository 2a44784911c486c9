"""Communicative decoding and teacher-forced scoring.

Generation alternates between the language model and the detector: the LM
emits tokens under a grammar mask; at `<visual>`/`<previsual>` the detector
runs on the hidden state at that position, the box token is force-inserted,
and the pooled features of the top proposals are appended as roi slots that
condition further generation. Teacher-forced scoring walks a fixed sequence
the same way and reports per-token NLLs, which every evaluation protocol
builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grammar as G
from . import tensor as T
from . import vocab as V
from .tensor import Tensor
from .util import rng_for
from .vision import (NMS_IOU, SCORE_FLOOR, BoxProposal, decode_proposals, nms,
                     roi_pool, top_m, whole_image_box)


@dataclass
class DecodeConfig:
    max_tokens: int = 48    # free picks; 0 = forced structure and detections only
    m_box: int = 1
    m_prebox: int = 3
    greedy: bool = True
    temperature: float = 1.0
    nms_iou: float = NMS_IOU
    score_floor: float = SCORE_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.m_box < 1 or self.m_prebox < 1:
            raise ValueError(f"m_box and m_prebox must be >= 1, got {self.m_box}, {self.m_prebox}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_tokens < 0:
            raise ValueError(f"max_tokens must be >= 0, got {self.max_tokens}")


@dataclass
class DecodeResult:
    sequence: list                      # grammar elements, prompt included
    boxes: dict                         # roi-slot element index -> [BoxProposal]
    text: str
    per_token_nll: list = field(default_factory=list)  # generated tokens, roi slots excluded
    no_detection: list = field(default_factory=list)   # comm-token element indices that fell back


class _Stream:
    """Mutable decode state: elements, roi features by element index, and the
    grammar machine position."""

    def __init__(self, model):
        self.model = model
        self.elements = []
        self.feats = {}
        self.state = G.START
        self.first_done = False

    def push(self, el):
        self.state = G.step(self.state, el, pos=len(self.elements),
                            first_span_done=self.first_done)
        if self.state == G.BOX_ROIS:
            self.first_done = True
        self.elements.append(el)

    def forward(self, grid3):
        """Run the LM over the current elements; numpy (S, vocab) logits and
        (S, D) hidden for the full stream including BOS and patches."""
        vocab = self.model.vocab
        pad = vocab.id(V.PAD)
        ids = np.array([[pad if el.kind == G.ROI else vocab.id(el.value)
                         for el in self.elements]], dtype=np.intp).reshape(1, len(self.elements))
        entries = [(0, i, f) for i, f in sorted(self.feats.items())]
        x = self.model.lm.embed_batch(grid3, ids, entries)
        logits, hidden = self.model.lm.forward(x)
        return logits.data[0], hidden.data[0]


def _prep_grid(model, image):
    """image -> ((n*n, D) grid for pooling, (1, n*n, D) view for the head)."""
    grid = model.encoder.encode(np.asarray(image, dtype=np.float32))
    n2, d = grid.shape
    return grid, grid.reshape(1, n2, d)


def _detect(model, grid3, hidden_vec, cfg, m):
    """Proposals at one communication token: decode, NMS, keep top m. Empty
    survivor set falls back to the whole image and flags no-detection."""
    h = Tensor(hidden_vec.reshape(1, -1))
    logits = model.head.logits(grid3, h)
    props = decode_proposals(logits.data[0], model.cfg.n_grid)
    kept = nms(props, cfg.nms_iou, cfg.score_floor)
    if not kept:
        return [BoxProposal(whole_image_box(), 0.0)], True
    return top_m(kept, m), False


def _legal_mask(vocab, legal, words_only=False):
    mask = np.zeros(len(vocab), dtype=bool)
    if legal["words"]:
        mask[len(V.SPECIALS):] = True
    if not words_only:
        for s in legal["specials"]:
            mask[vocab.id(s)] = True
        if legal["eos"]:
            mask[vocab.id(V.EOS)] = True
    return mask


def _pick(logits_row, mask, cfg, rng):
    """Choose a token among the legal set; returns (token id, NLL under the
    mask-renormalized model distribution)."""
    masked = logits_row.astype(np.float64).copy()
    masked[~mask] = -np.inf
    top = masked.max()
    logp = masked - (top + np.log(np.exp(masked - top).sum()))
    if cfg.greedy:
        tid = int(np.argmax(masked))
    else:
        p = np.exp((masked - top) / cfg.temperature)
        p[~mask] = 0.0
        tid = int(rng.choice(len(p), p=p / p.sum()))
    return tid, float(-logp[tid])


def communicative_decode(model, image, prompt, cfg: DecodeConfig | None = None,
                         prompt_boxes=()) -> DecodeResult:
    """Generate from `prompt` (a legal grammar prefix; its roi slots take
    features pooled from `prompt_boxes`, one box per slot in order)."""
    cfg = cfg or DecodeConfig()
    vocab = model.vocab
    rng = rng_for(cfg.seed, "decode")
    with T.no_grad():
        grid, grid3 = _prep_grid(model, image)
        st = _Stream(model)
        next_box = 0
        for el in prompt:
            st.push(el)
            if el.kind == G.ROI:
                if next_box >= len(prompt_boxes):
                    raise ValueError(f"prompt roi slot {next_box} has no box supplied")
                st.feats[len(st.elements) - 1] = roi_pool(grid, prompt_boxes[next_box],
                                                          model.cfg.n_grid)
                next_box += 1
        event = sum(1 for el in prompt if el.kind == G.ROI)

        head = 1 + model.cfg.n_grid * model.cfg.n_grid
        boxes, no_det, nlls = {}, [], []
        emitted = 0
        while True:
            if st.state in (G.AFTER_VISUAL, G.PREVIS, G.BOX_ROIS_OPEN, G.PREBOX_OPEN):
                # detection event; the box token may already sit in the prompt
                box_pushed = st.state in (G.BOX_ROIS_OPEN, G.PREBOX_OPEN)
                is_box = st.state in (G.AFTER_VISUAL, G.BOX_ROIS_OPEN)
                comm_idx = len(st.elements) - (2 if box_pushed else 1)
                _, hidden = st.forward(grid3)
                m = cfg.m_box if is_box else cfg.m_prebox
                props, fell = _detect(model, grid3, hidden[head + comm_idx], cfg, m)
                if fell:
                    no_det.append(comm_idx)
                if not box_pushed:
                    st.push(G.special(V.BOX if is_box else V.PREBOX))
                    nlls.append(0.0)
                for p in props:
                    idx = len(st.elements)
                    st.push(G.roi(event))
                    st.feats[idx] = roi_pool(grid, p.box, model.cfg.n_grid)
                    boxes[idx] = [p]
                event += 1
                continue

            legal = G.legal_next(st.state, st.first_done)
            specials = legal["specials"]
            if len(specials) == 1 and not legal["words"] and not legal["eos"]:
                st.push(G.special(next(iter(specials))))
                nlls.append(0.0)
                continue

            over = emitted >= cfg.max_tokens
            if over and st.state in G.ACCEPTING:
                break
            if over and V.OBJ_END in specials:
                # budget spent mid-span: close it rather than emit an invalid tail
                st.push(G.special(V.OBJ_END))
                nlls.append(0.0)
                continue

            logits, _ = st.forward(grid3)
            mask = _legal_mask(vocab, legal, words_only=over)
            tid, nll = _pick(logits[-1], mask, cfg, rng)
            nlls.append(nll)
            tok = vocab.token(tid)
            if tok == V.EOS:
                break
            st.push(G.word(tok) if vocab.is_word_id(tid) else G.special(tok))
            emitted += 1

    G.validate(st.elements)
    return DecodeResult(sequence=st.elements, boxes=boxes, text=G.to_text(st.elements),
                        per_token_nll=nlls, no_detection=no_det)


# -- teacher-forced scoring ---------------------------------------------------

def teacher_forced_nlls(model, image, elements, cfg: DecodeConfig | None = None,
                        given_boxes=None, fragment=False, grid_pair=None):
    """Score a fixed sequence. Roi slots take caller boxes when their slot
    occurrence index (0, 1, ... over the sequence) is in `given_boxes`;
    otherwise the detector runs at the owning communication token and its
    proposals fill the event's slots in order. `fragment=True` scores a
    sequence that may open with the look-first form.

    Returns (nll, filled, no_detection): nll maps element index -> NLL of that
    word/special element given its prefix; filled maps roi-slot element index
    -> the box used; no_detection lists comm-token element indices that fell
    back to the whole image."""
    cfg = cfg or DecodeConfig()
    given_boxes = given_boxes or {}
    with T.no_grad():
        if grid_pair is None:
            grid_pair = _prep_grid(model, image)
        grid, grid3 = grid_pair
        head = 1 + model.cfg.n_grid * model.cfg.n_grid
        st = _Stream(model)
        st.first_done = fragment
        filled, no_det = {}, []
        slot = 0
        i = 0
        while i < len(elements):
            el = elements[i]
            if el.kind == G.SPECIAL and el.value in (V.VISUAL, V.PREVISUAL):
                comm_idx = i
                st.push(el)
                if i + 1 >= len(elements):
                    raise G.GrammarError(i + 1, "a box token after the communication token",
                                         "end of sequence")
                st.push(elements[i + 1])  # grammar enforces <box>/<prebox> here
                j = i + 2
                slots = []
                while j < len(elements) and elements[j].kind == G.ROI:
                    slots.append(j)
                    j += 1
                have = [slot + k in given_boxes for k in range(len(slots))]
                if any(have) and not all(have):
                    raise ValueError(
                        f"slots {slot}..{slot + len(slots) - 1} mix given and detected boxes")
                if all(have) and slots:
                    chosen = [given_boxes[slot + k] for k in range(len(slots))]
                else:
                    _, hidden = st.forward(grid3)
                    props, fell = _detect(model, grid3, hidden[head + comm_idx], cfg,
                                          max(len(slots), 1))
                    if fell or len(props) < len(slots):
                        no_det.append(comm_idx)
                    chosen = [props[k].box if k < len(props) else whole_image_box()
                              for k in range(len(slots))]
                for el_idx, box in zip(slots, chosen):
                    st.push(elements[el_idx])
                    st.feats[el_idx] = roi_pool(grid, box, model.cfg.n_grid)
                    filled[el_idx] = box
                slot += len(slots)
                i = j
                continue
            if el.kind == G.ROI:
                # a roi slot outside any detection event: must be caller-given
                if slot not in given_boxes:
                    raise ValueError(f"roi slot {slot} (element {i}) has no box source")
                st.push(el)
                st.feats[i] = roi_pool(grid, given_boxes[slot], model.cfg.n_grid)
                filled[i] = given_boxes[slot]
                slot += 1
                i += 1
                continue
            st.push(el)
            i += 1
        if st.state not in G.ACCEPTING:
            raise G.GrammarError(len(elements), "sequence to continue (ends mid-span)",
                                 f"end of sequence in state {st.state}")

        logits, _ = st.forward(grid3)
        logp = T.log_probs(logits)
        head = 1 + model.cfg.n_grid * model.cfg.n_grid
        nll = {}
        for idx, el in enumerate(elements):
            if el.kind in (G.WORD, G.SPECIAL):
                nll[idx] = float(-logp[head + idx - 1, model.vocab.id(el.value)])
    return nll, filled, no_det


def perplexity(model, image, elements, cfg: DecodeConfig | None = None,
               given_boxes=None, fragment=False, grid_pair=None) -> float:
    """exp(mean NLL over word tokens only); communication tokens and roi
    slots are excluded from the average."""
    nll, _, _ = teacher_forced_nlls(model, image, elements, cfg, given_boxes,
                                    fragment, grid_pair)
    word_nlls = [nll[i] for i, el in enumerate(elements) if el.kind == G.WORD]
    if not word_nlls:
        raise ValueError("caption has no word tokens to score")
    return float(np.exp(np.mean(word_nlls)))


def score_box_candidate(model, image, expression_words, box,
                        cfg: DecodeConfig | None = None, grid_pair=None) -> float:
    """Perplexity of `expression_words` when the model is told to look at
    `box` first: <previsual> <prebox> [roi] <obj> words </obj>. Lower is a
    better region for the expression."""
    els = ([G.special(V.PREVISUAL), G.special(V.PREBOX), G.roi(0), G.special(V.OBJ)]
           + [G.word(w) for w in expression_words] + [G.special(V.OBJ_END)])
    nll, _, _ = teacher_forced_nlls(model, image, els, cfg, given_boxes={0: box},
                                    fragment=True, grid_pair=grid_pair)
    word_nlls = [nll[i] for i, el in enumerate(els) if el.kind == G.WORD]
    return float(np.exp(np.mean(word_nlls)))
