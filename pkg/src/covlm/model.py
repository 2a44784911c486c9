"""Bundles the patch encoder, detection head, and language model behind one
parameter namespace ("enc.", "det.", "lm.") so training, checkpointing, and
decoding share a single object."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .lm import LmConfig, TransformerLM
from .util import rng_for
from .vision import DetectionHead, PatchEncoder, N_GRID
from .vocab import Vocab


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    max_len: int = 256
    n_grid: int = N_GRID
    image_size: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


class CovlmModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int):
        if len(vocab) != cfg.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} entries, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = PatchEncoder(cfg.d_model, cfg.image_size, rng_for(seed, "init", "enc"), cfg.n_grid)
        self.head = DetectionHead(cfg.d_model, rng_for(seed, "init", "det"), cfg.n_grid)
        self.lm = TransformerLM(
            LmConfig(
                vocab_size=cfg.vocab_size,
                d_model=cfg.d_model,
                n_layers=cfg.n_layers,
                n_heads=cfg.n_heads,
                d_ffn=cfg.d_ffn,
                max_len=cfg.max_len,
                n_patches=cfg.n_grid * cfg.n_grid,
            ),
            rng_for(seed, "init", "lm"),
        )

    def params(self) -> dict:
        out = {}
        out.update(self.encoder.params("enc."))
        out.update(self.head.params("det."))
        out.update(self.lm.params("lm."))
        return out

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params().items()}

    def load_state_arrays(self, arrays: dict) -> None:
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        unknown = sorted(set(arrays) - set(params))
        if missing or unknown:
            raise ValueError(f"parameter set mismatch: missing {missing}, unknown {unknown}")
        for name, tensor in params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"parameter '{name}' has shape {arr.shape}, expected {tensor.data.shape}")
            tensor.data = arr.copy()
            tensor.grad = None
