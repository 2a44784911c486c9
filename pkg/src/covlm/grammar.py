"""Stream elements and the communication-token grammar.

A stream is a list of Element values. The grammar accepts free text
interleaved with grounded spans of two shapes:

  form A:  <obj> w+ </obj> <visual> <box> roi+
  form B:  <previsual> <prebox> roi+ <obj> w+ </obj>

Form A names the object first and then looks; form B looks first and then
names what it found. The first span in any sequence is always form A.
"""

from __future__ import annotations

import re

from . import vocab as V
from .util import rng_for

WORD = "word"
SPECIAL = "special"
PATCH = "patch"
ROI = "roi"


class Element:
    """One stream element: a word, a special token, an image patch slot, or
    a pooled-region (roi) slot. value is the token string for word/special,
    an integer index for patch/roi."""

    __slots__ = ("kind", "value")

    def __init__(self, kind: str, value):
        self.kind = kind
        self.value = value

    def __eq__(self, other):
        return isinstance(other, Element) and self.kind == other.kind and self.value == other.value

    def __hash__(self):
        return hash((self.kind, self.value))

    def __repr__(self):
        return f"{self.kind}:{self.value}"


def word(w: str) -> Element:
    return Element(WORD, w)


def special(s: str) -> Element:
    return Element(SPECIAL, s)


def patch(i: int) -> Element:
    return Element(PATCH, int(i))


def roi(k: int) -> Element:
    return Element(ROI, int(k))


class GrammarError(ValueError):
    """Carries the first offense: position, what was legal there, what appeared."""

    def __init__(self, pos: int, expected: str, found):
        super().__init__(f"position {pos}: expected {expected}, found {found!r}")
        self.pos = pos
        self.expected = expected
        self.found = found


# -- state machine ------------------------------------------------------------

TEXT = "TEXT"
OBJ_A_OPEN = "OBJ_A_OPEN"          # saw <obj>, need first word
OBJ_A_WORDS = "OBJ_A_WORDS"        # inside <obj> w+ ; may close
AFTER_OBJ_A = "AFTER_OBJ_A"        # saw </obj>, need <visual>
AFTER_VISUAL = "AFTER_VISUAL"      # need <box>
BOX_ROIS_OPEN = "BOX_ROIS_OPEN"    # saw <box>, need first roi
BOX_ROIS = "BOX_ROIS"              # roi+ done; behaves like TEXT for exits
PREVIS = "PREVIS"                  # saw <previsual>, need <prebox>
PREBOX_OPEN = "PREBOX_OPEN"        # saw <prebox>, need first roi
PREBOX_ROIS = "PREBOX_ROIS"        # roi+ ; need <obj>
OBJ_B_OPEN = "OBJ_B_OPEN"          # form B <obj>, need first word
OBJ_B_WORDS = "OBJ_B_WORDS"        # inside form B words; </obj> returns to TEXT

START = TEXT

# states where the sequence may legally end (and EOS may be emitted)
ACCEPTING = frozenset({TEXT, BOX_ROIS})


def step(state: str, el: Element, pos: int = -1, first_span_done: bool = True) -> str:
    """Advance the machine by one element; raise GrammarError on anything
    illegal. `first_span_done=False` additionally forbids opening form B
    before any form A span has closed."""
    k, v = el.kind, el.value
    if k == PATCH:
        raise GrammarError(pos, "a caption element (patches sit outside the grammar)", el)

    if state == TEXT or state == BOX_ROIS:
        if state == BOX_ROIS and k == ROI:
            return BOX_ROIS
        if k == WORD:
            return TEXT
        if k == SPECIAL and v == V.OBJ:
            return OBJ_A_OPEN
        if k == SPECIAL and v == V.PREVISUAL:
            if not first_span_done:
                raise GrammarError(pos, f"word or {V.OBJ} (first span must name-then-look)", el)
            return PREVIS
        raise GrammarError(pos, f"word, {V.OBJ} or {V.PREVISUAL}", el)

    if state == OBJ_A_OPEN or state == OBJ_B_OPEN:
        if k == WORD:
            return OBJ_A_WORDS if state == OBJ_A_OPEN else OBJ_B_WORDS
        raise GrammarError(pos, "at least one word inside the object span", el)

    if state == OBJ_A_WORDS or state == OBJ_B_WORDS:
        if k == WORD:
            return state
        if k == SPECIAL and v == V.OBJ_END:
            return AFTER_OBJ_A if state == OBJ_A_WORDS else TEXT
        raise GrammarError(pos, f"word or {V.OBJ_END}", el)

    if state == AFTER_OBJ_A:
        if k == SPECIAL and v == V.VISUAL:
            return AFTER_VISUAL
        raise GrammarError(pos, V.VISUAL, el)

    if state == AFTER_VISUAL:
        if k == SPECIAL and v == V.BOX:
            return BOX_ROIS_OPEN
        raise GrammarError(pos, V.BOX, el)

    if state == BOX_ROIS_OPEN or state == PREBOX_OPEN:
        if k == ROI:
            return BOX_ROIS if state == BOX_ROIS_OPEN else PREBOX_ROIS
        raise GrammarError(pos, "at least one roi slot", el)

    if state == PREVIS:
        if k == SPECIAL and v == V.PREBOX:
            return PREBOX_OPEN
        raise GrammarError(pos, V.PREBOX, el)

    if state == PREBOX_ROIS:
        if k == ROI:
            return PREBOX_ROIS
        if k == SPECIAL and v == V.OBJ:
            return OBJ_B_OPEN
        raise GrammarError(pos, f"roi slot or {V.OBJ}", el)

    raise GrammarError(pos, f"reachable state (got machine state {state})", el)


def legal_next(state: str, first_span_done: bool = True) -> dict:
    """What may follow in `state`: a dict with 'words' (bool), 'rois' (bool),
    'specials' (set of token strings), 'eos' (bool). Used to mask decoding."""
    words = state in (TEXT, BOX_ROIS, OBJ_A_OPEN, OBJ_A_WORDS, OBJ_B_OPEN, OBJ_B_WORDS)
    rois = state in (BOX_ROIS_OPEN, BOX_ROIS, PREBOX_OPEN, PREBOX_ROIS)
    specials = set()
    if state in (TEXT, BOX_ROIS):
        specials.add(V.OBJ)
        if first_span_done:
            specials.add(V.PREVISUAL)
    if state in (OBJ_A_WORDS, OBJ_B_WORDS):
        specials.add(V.OBJ_END)
    if state == AFTER_OBJ_A:
        specials.add(V.VISUAL)
    if state == AFTER_VISUAL:
        specials.add(V.BOX)
    if state == PREVIS:
        specials.add(V.PREBOX)
    if state == PREBOX_ROIS:
        specials.add(V.OBJ)
    return {"words": words, "rois": rois, "specials": specials,
            "eos": state in ACCEPTING}


def check(elements):
    """Run the machine over the element list. Returns None if it is a
    sentence of the grammar, otherwise the GrammarError describing the
    first offense. Never raises."""
    state = START
    first_done = False
    for i, el in enumerate(elements):
        try:
            state = step(state, el, pos=i, first_span_done=first_done)
        except GrammarError as e:
            return e
        if state == BOX_ROIS:
            # only a completed form A span unlocks the look-first form
            first_done = True
    if state not in ACCEPTING:
        return GrammarError(len(elements), "sequence to continue (ends mid-span)",
                            f"end of sequence in state {state}")
    return None


def validate(elements) -> None:
    """check() as an assertion: raises the GrammarError instead."""
    err = check(elements)
    if err is not None:
        raise err


def is_valid(elements) -> bool:
    return check(elements) is None


# -- span insertion -----------------------------------------------------------

FORM_A = "A"
FORM_B = "B"


def insert_tokens(words, spans, seed: int, n_rois: int = 1):
    """Wrap the given word-index spans in communication tokens.

    words: list of word strings. spans: list of (start, end) half-open word
    ranges, non-overlapping. Output interleaves the remaining free text with
    one grounded span per input range, with `n_rois` roi placeholders each;
    roi values number the spans 0, 1, ... in sequence order so callers can
    attach region features per span.

    The first span always takes form A; each later span flips a seeded coin
    between forms A and B. Returns (elements, forms).
    """
    spans = sorted((int(s), int(e)) for s, e in spans)
    for (s, e) in spans:
        if not (0 <= s < e <= len(words)):
            raise ValueError(f"span ({s}, {e}) out of range for {len(words)} words")
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        if e1 > s2:
            raise ValueError(f"overlapping spans ({s1},{e1}) and ({s2},{e2})")

    rng = rng_for(seed, "span-forms")
    out = []
    forms = []
    cursor = 0
    for si, (s, e) in enumerate(spans):
        out.extend(word(w) for w in words[cursor:s])
        form = FORM_A if si == 0 else (FORM_B if rng.random() < 0.5 else FORM_A)
        forms.append(form)
        span_words = [word(w) for w in words[s:e]]
        roi_els = [roi(si) for _ in range(n_rois)]
        if form == FORM_A:
            out.append(special(V.OBJ))
            out.extend(span_words)
            out.append(special(V.OBJ_END))
            out.append(special(V.VISUAL))
            out.append(special(V.BOX))
            out.extend(roi_els)
        else:
            out.append(special(V.PREVISUAL))
            out.append(special(V.PREBOX))
            out.extend(roi_els)
            out.append(special(V.OBJ))
            out.extend(span_words)
            out.append(special(V.OBJ_END))
        cursor = e
    out.extend(word(w) for w in words[cursor:])
    return out, forms


def strip_special(elements):
    """Plain word list with all specials and roi slots removed."""
    return [el.value for el in elements if el.kind == WORD]


# -- text serialization -------------------------------------------------------

_ROI_RE = re.compile(r"^\[roi:(\d+)\]$")


def to_text(elements) -> str:
    parts = []
    for el in elements:
        if el.kind == WORD or el.kind == SPECIAL:
            parts.append(el.value)
        elif el.kind == ROI:
            parts.append(f"[roi:{el.value}]")
        else:
            raise ValueError(f"cannot serialize element {el!r}")
    return " ".join(parts)


def from_text(text: str):
    out = []
    for tok in text.split():
        m = _ROI_RE.match(tok)
        if m:
            out.append(roi(int(m.group(1))))
        elif tok in V.SPECIALS:
            out.append(special(tok))
        else:
            out.append(word(tok))
    return out
