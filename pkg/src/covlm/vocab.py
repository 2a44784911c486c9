"""Token vocabulary: nine special tokens plus a closed word list."""

from __future__ import annotations

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
OBJ = "<obj>"
OBJ_END = "</obj>"
VISUAL = "<visual>"
BOX = "<box>"
PREVISUAL = "<previsual>"
PREBOX = "<prebox>"

SPECIALS = (PAD, BOS, EOS, OBJ, OBJ_END, VISUAL, BOX, PREVISUAL, PREBOX)

# the four tokens that open or continue a grounded span
COMM_TOKENS = (OBJ, OBJ_END, VISUAL, BOX, PREVISUAL, PREBOX)


class VocabError(KeyError):
    pass


class Vocab:
    """Bidirectional token <-> id map. Specials occupy the first nine ids in
    a fixed order; word ids follow in the order given. The world is closed:
    unknown strings raise instead of mapping to an unk bucket."""

    def __init__(self, words):
        words = list(words)
        for w in words:
            if w in SPECIALS:
                raise ValueError(f"word list may not contain special token {w!r}")
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.tokens = list(SPECIALS) + words
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.n_special = len(SPECIALS)

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def is_special_id(self, idx: int) -> bool:
        return idx < self.n_special

    def is_word_id(self, idx: int) -> bool:
        return idx >= self.n_special

    @property
    def word_tokens(self):
        return self.tokens[self.n_special:]

    def encode(self, sentence: str) -> list:
        """Whitespace-tokenized sentence to id list."""
        return [self.id(tok) for tok in sentence.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)
