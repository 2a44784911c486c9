"""Decoder-only transformer over mixed streams.

A stream is [BOS] + N*N projected patch features + caption elements, where
caption elements are token embeddings (words and specials) or projected
region features at roi slots. One learned absolute position table covers
the whole stream. The unembedding is tied to the token embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grammar as G
from . import tensor as T
from .tensor import Tensor
from .vocab import BOS, SPECIALS, Vocab

NEG_MASK = -1e9  # additive causal bias; finite so the nan guard stays armed
BOS_ID = SPECIALS.index(BOS)


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    max_len: int = 256
    n_patches: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


class TransformerLM:
    def __init__(self, cfg: LmConfig, rng):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.d_ffn

        def w(*shape, std=0.02):
            return Tensor(rng.normal(0, std, shape).astype(np.float32), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

        p = {
            "tok_emb": w(cfg.vocab_size, d),
            "pos_emb": w(cfg.max_len, d),
            "patch_proj_w": w(d, d), "patch_proj_b": zeros(d),
            "roi_proj_w": w(d, d), "roi_proj_b": zeros(d),
            "patch_type": w(d), "roi_type": w(d),
            "ln_f_g": ones(d), "ln_f_b": zeros(d),
        }
        for i in range(cfg.n_layers):
            p.update({
                f"l{i}.ln1_g": ones(d), f"l{i}.ln1_b": zeros(d),
                f"l{i}.wq": w(d, d), f"l{i}.bq": zeros(d),
                f"l{i}.wk": w(d, d), f"l{i}.bk": zeros(d),
                f"l{i}.wv": w(d, d), f"l{i}.bv": zeros(d),
                f"l{i}.wo": w(d, d), f"l{i}.bo": zeros(d),
                f"l{i}.ln2_g": ones(d), f"l{i}.ln2_b": zeros(d),
                f"l{i}.ffn1_w": w(d, f), f"l{i}.ffn1_b": zeros(f),
                f"l{i}.ffn2_w": w(f, d), f"l{i}.ffn2_b": zeros(d),
            })
        self.p = p

    def params(self, prefix: str = "lm.") -> dict:
        return {prefix + k: v for k, v in self.p.items()}

    # -- stream assembly ------------------------------------------------------

    def embed_batch(self, grids: Tensor, ids: np.ndarray, roi_entries) -> Tensor:
        """grids (B, n_patches, D); ids (B, S_elem) vocab ids with PAD at roi
        slot and padding positions; roi_entries: list of (batch, elem position,
        feature Tensor (D,)). Returns the full (B, 1 + n_patches + S_elem, D)
        embedded stream."""
        p = self.p
        b, s_elem = ids.shape
        d = self.cfg.d_model

        patch_block = grids @ p["patch_proj_w"] + p["patch_proj_b"] + p["patch_type"]
        elem_block = T.embedding(p["tok_emb"], ids)
        if roi_entries:
            feats = T.stack([f for (_, _, f) in roi_entries], axis=0)  # (K, D)
            feats = feats @ p["roi_proj_w"] + p["roi_proj_b"] + p["roi_type"]
            rows = np.array([bi * s_elem + pos for (bi, pos, _) in roi_entries])
            add = T.scatter_rows(feats, rows, b * s_elem).reshape(b, s_elem, d)
            elem_block = elem_block + add

        bos_row = T.embedding(p["tok_emb"], np.full((b, 1), BOS_ID, dtype=np.intp))
        stream = T.concat([bos_row, patch_block, elem_block], axis=1)
        s = stream.shape[1]
        if s > self.cfg.max_len:
            raise T.ShapeError(f"stream length {s} exceeds max_len {self.cfg.max_len}")
        return stream + p["pos_emb"][0:s]

    def embed_sequence(self, vocab: Vocab, elements, grid: Tensor, roi_features=()) -> Tensor:
        """Single-record stream: grid (n_patches, D), roi_features one Tensor (D,)
        per roi slot in sequence order. Returns (1, 1 + n_patches + L, D)."""
        pad = vocab.id("<pad>")
        ids = []
        entries = []
        n_slots = 0
        for el in elements:
            if el.kind == G.ROI:
                if n_slots >= len(roi_features):
                    raise ValueError(f"no feature supplied for roi slot {n_slots}")
                entries.append((0, len(ids), roi_features[n_slots]))
                n_slots += 1
                ids.append(pad)
            elif el.kind in (G.WORD, G.SPECIAL):
                ids.append(vocab.id(el.value))
            else:
                raise ValueError(f"element {el!r} cannot appear in a caption stream")
        ids_arr = np.array(ids, dtype=np.intp).reshape(1, len(ids))
        n = self.cfg.n_patches
        return self.embed_batch(grid.reshape(1, n, grid.shape[-1]), ids_arr, entries)

    # -- transformer ----------------------------------------------------------

    def forward(self, x: Tensor):
        """x (B, S, D) embedded stream -> (logits (B, S, V), hidden (B, S, D)).
        A 2D (S, D) stream is treated as a batch of one and squeezed back."""
        p = self.p
        if len(x.shape) == 2:
            logits, hidden = self.forward(x.reshape(1, *x.shape))
            return (logits.reshape(logits.shape[1:]), hidden.reshape(hidden.shape[1:]))
        b, s, d = x.shape
        nh = self.cfg.n_heads
        dh = d // nh
        mask = Tensor(np.triu(np.full((s, s), NEG_MASK, dtype=np.float32), k=1))
        scale = Tensor(np.float32(dh ** -0.5))

        for i in range(self.cfg.n_layers):
            h = T.layernorm(x) * p[f"l{i}.ln1_g"] + p[f"l{i}.ln1_b"]
            q = (h @ p[f"l{i}.wq"] + p[f"l{i}.bq"]).reshape(b, s, nh, dh).transpose(1, 2)
            k = (h @ p[f"l{i}.wk"] + p[f"l{i}.bk"]).reshape(b, s, nh, dh).transpose(1, 2)
            v = (h @ p[f"l{i}.wv"] + p[f"l{i}.bv"]).reshape(b, s, nh, dh).transpose(1, 2)
            att = q @ k.transpose(2, 3) * scale + mask
            att = T.softmax(att, axis=-1)
            ctx = (att @ v).transpose(1, 2).reshape(b, s, d)
            x = x + ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"]

            h = T.layernorm(x) * p[f"l{i}.ln2_g"] + p[f"l{i}.ln2_b"]
            h = T.gelu(h @ p[f"l{i}.ffn1_w"] + p[f"l{i}.ffn1_b"])
            x = x + h @ p[f"l{i}.ffn2_w"] + p[f"l{i}.ffn2_b"]

        hidden = T.layernorm(x) * p["ln_f_g"] + p["ln_f_b"]
        logits = hidden @ self.p["tok_emb"].transpose(0, 1)
        return logits, hidden


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean NLL over positions with mask set; targets/mask shaped like the
    stream (B, S). Patch, BOS, and roi-slot positions must be masked out by
    the caller; zero included positions is an error."""
    return T.masked_nll(logits, targets, mask)


def stream_ids_and_targets(vocab: Vocab, elements, n_patches: int, with_eos: bool = True):
    """Per-record arrays for embed_batch and lm_loss.

    Returns (elem_ids, roi_positions, targets, loss_mask) where elem_ids has
    PAD at roi slots, roi_positions maps roi-slot order to element positions,
    and targets/loss_mask cover the full stream [BOS, patches, elements]:
    position t learns to predict stream element t+1 iff that element is a
    word or special token."""
    pad = vocab.id("<pad>")
    eos = vocab.id("<eos>")
    elem_ids = []
    roi_positions = []
    for el in elements:
        if el.kind == G.WORD or el.kind == G.SPECIAL:
            elem_ids.append(vocab.id(el.value))
        elif el.kind == G.ROI:
            roi_positions.append(len(elem_ids))
            elem_ids.append(pad)
        else:
            raise ValueError(f"element {el!r} cannot appear in a caption stream")
    if with_eos:
        elem_ids.append(eos)

    head = 1 + n_patches
    stream_len = head + len(elem_ids)
    targets = np.zeros(stream_len, dtype=np.intp)
    mask = np.zeros(stream_len, dtype=bool)
    is_roi = np.zeros(len(elem_ids), dtype=bool)
    for pos in roi_positions:
        is_roi[pos] = True
    for t in range(stream_len - 1):
        nxt = t + 1
        if nxt < head:
            continue  # next is a patch slot
        j = nxt - head
        if is_roi[j]:
            continue
        targets[t] = elem_ids[j]
        mask[t] = True
    return (np.array(elem_ids, dtype=np.intp), roi_positions, targets, mask)
