"""Joint training: next-token loss over grounded caption streams plus a
weighted detection loss at every look-token position, with run configuration,
JSONL step logging, periodic checkpoints, and crash resume.

During training roi slots take features pooled from the record's annotated
boxes (the detector only drives inference), so language modeling never waits
on detector quality. The `no_comm` switch strips communication tokens from
the corpus and trains the identical architecture as a control arm.
"""

from __future__ import annotations

import base64
import glob
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint
from . import grammar as G
from . import tensor as T
from . import vocab as V
from .lm import stream_ids_and_targets
from .model import CovlmModel, ModelConfig
from .optim import AdamW
from .scenes import parse_ppm, read_ppm, vocabulary_words
from .util import rng_for
from .vision import NMS_IOU, SCORE_FLOOR, detection_loss_batch, roi_pool
from .vocab import Vocab

DETECTOR_WEIGHT_DECAY = 0.05


class TrainError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """One training run. Serialized verbatim into every checkpoint.

    Desk-scale defaults: 5,000 steps at batch 32 stand in for large-scale
    pre-training; lr keeps the reference value."""

    # model dimensions
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    n_grid: int = 8
    image_size: int = 64
    max_len: int = 192
    # data
    train_data: str = ""
    val_data: str = ""
    out_dir: str = ""
    # optimization
    seed: int = 0
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-4
    lambda_det: float = 0.025
    # detection / decoding
    nms_iou: float = NMS_IOU
    score_floor: float = SCORE_FLOOR
    m_box: int = 1
    m_prebox: int = 3
    # cadence and ablation
    eval_every: int = 500
    no_comm: bool = False

    def __post_init__(self):
        if self.lambda_det < 0:
            raise ValueError(f"lambda_det must be >= 0, got {self.lambda_det}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model,
                           n_layers=self.n_layers, n_heads=self.n_heads,
                           d_ffn=self.d_ffn, max_len=self.max_len,
                           n_grid=self.n_grid, image_size=self.image_size)


# -- corpus loading -------------------------------------------------------------

def load_corpus(path: str) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise TrainError(f"{path}:{ln}: bad corpus line: {e}") from None
    if not records:
        raise TrainError(f"{path}: corpus is empty")
    return records


def record_image(rec, root: str = "") -> np.ndarray:
    """Inline base64 PPM or a path relative to the corpus file."""
    ref = rec["image"]
    as_path = os.path.join(root, ref) if root else ref
    if ref.endswith(".ppm") or os.path.exists(as_path):
        return read_ppm(as_path)
    return parse_ppm(base64.b64decode(ref), name=rec.get("id", "<record>"))


@dataclass
class Prepared:
    """A corpus record reduced to what a training step consumes."""
    rid: str
    image_u8: np.ndarray            # (H, W, 3) uint8
    ids: np.ndarray                 # element-stream token ids, EOS included
    targets: np.ndarray
    mask: np.ndarray
    rois: list                      # (element position, gt box) per roi slot
    events: list                    # (comm element index, [gt boxes]) per look token


def prepare_records(records, vocab: Vocab, n_patches: int, no_comm: bool,
                    root: str = "") -> list:
    out = []
    for rec in records:
        els = G.from_text(rec["comm_text"])
        if no_comm:
            els = [G.word(w) for w in G.strip_special(els)]
        G.validate(els)
        boxes = [tuple(s["box"]) for s in rec.get("spans", ())]

        def span_box(el):
            if el.value >= len(boxes):
                raise TrainError(f"record {rec.get('id')}: roi slot {el.value} "
                                 f"has no matching span")
            return boxes[el.value]

        rois, events = [], []
        for i, el in enumerate(els):
            if el.kind == G.ROI:
                rois.append((i, span_box(el)))
            elif el.kind == G.SPECIAL and el.value in (V.VISUAL, V.PREVISUAL):
                gts = []
                j = i + 2  # skip the box token that must follow
                while j < len(els) and els[j].kind == G.ROI:
                    gts.append(span_box(els[j]))
                    j += 1
                events.append((i, gts))
        ids, _, targets, mask = stream_ids_and_targets(vocab, els, n_patches)
        img = np.clip(record_image(rec, root) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        out.append(Prepared(rid=str(rec.get("id", len(out))), image_u8=img, ids=ids,
                            targets=targets, mask=mask, rois=rois, events=events))
    return out


# -- one optimization step --------------------------------------------------------

def _forward_losses(model: CovlmModel, batch: list, lambda_det: float):
    """(lm_loss Tensor, det_loss Tensor or None) for a list of Prepared."""
    head = 1 + model.cfg.n_grid * model.cfg.n_grid
    pad = model.vocab.id(V.PAD)
    b = len(batch)
    s_el = max(len(r.ids) for r in batch)
    ids = np.full((b, s_el), pad, dtype=np.intp)
    targets = np.zeros((b, head + s_el), dtype=np.intp)
    mask = np.zeros((b, head + s_el), dtype=bool)
    for bi, r in enumerate(batch):
        ids[bi, :len(r.ids)] = r.ids
        targets[bi, :head + len(r.ids)] = r.targets
        mask[bi, :head + len(r.ids)] = r.mask

    images = np.stack([r.image_u8 for r in batch]).astype(np.float32) / 255.0
    grids = model.encoder.encode_batch(images)
    entries = []
    for bi, r in enumerate(batch):
        grid_b = grids[bi]
        for pos, box in r.rois:
            entries.append((bi, pos, roi_pool(grid_b, box, model.cfg.n_grid)))
    x = model.lm.embed_batch(grids, ids, entries)
    logits, hidden = model.lm.forward(x)
    lm_loss = T.masked_nll(logits, targets, mask)

    det_loss = None
    if lambda_det > 0:
        rows, gt_lists = [], []
        s = hidden.shape[1]
        for bi, r in enumerate(batch):
            for comm_idx, gts in r.events:
                if gts:
                    rows.append(bi * s + head + comm_idx)
                    gt_lists.append(list(gts))
        if rows:
            hid = T.embedding(hidden.reshape(b * s, model.cfg.d_model), np.array(rows))
            n2 = model.cfg.n_grid * model.cfg.n_grid
            gr = T.embedding(grids.reshape(b, n2 * model.cfg.d_model),
                             np.array([r // s for r in rows]))
            gr = gr.reshape(len(rows), n2, model.cfg.d_model)
            det_loss = detection_loss_batch(model.head.logits(gr, hid), gt_lists,
                                            model.cfg.n_grid)
    return lm_loss, det_loss


def _blame_nonfinite(model, batch, lambda_det):
    # tensor ops raise on the first non-finite value, so rerun per record
    with T.no_grad():
        for r in batch:
            try:
                lm, det = _forward_losses(model, [r], lambda_det)
            except T.NonFiniteError:
                return r.rid
            v = float(lm.data) + lambda_det * (float(det.data) if det is not None else 0.0)
            if not np.isfinite(v):
                return r.rid
    return "<unidentified>"


def train_step(model: CovlmModel, opt: AdamW, batch: list, lambda_det: float) -> dict:
    """Forward, backward, and one optimizer step; returns the log row."""
    t0 = time.perf_counter()
    opt.zero_grad()
    try:
        lm_loss, det_loss = _forward_losses(model, batch, lambda_det)
    except T.NonFiniteError:
        rid = _blame_nonfinite(model, batch, lambda_det)
        raise TrainError(f"non-finite loss on record {rid}") from None
    if det_loss is not None:
        total = lm_loss + float(lambda_det) * det_loss
    else:
        total = lm_loss
    if not np.isfinite(total.data):
        rid = _blame_nonfinite(model, batch, lambda_det)
        raise TrainError(f"non-finite loss on record {rid}")
    T.backward(total)
    sq = 0.0
    for p in model.params().values():
        if p.grad is None:
            # params outside this step's graph (detector when no event fired)
            p.grad = np.zeros_like(p.data)
        sq += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    opt.step()
    det_val = float(det_loss.data) if det_loss is not None else 0.0
    return {
        "lm_loss": float(lm_loss.data),
        "det_loss": det_val,
        "total_loss": float(total.data),
        "grad_norm": float(np.sqrt(sq)),
        "wall_ms": (time.perf_counter() - t0) * 1000.0,
    }


def heldout_lm_loss(model: CovlmModel, prepared: list, batch_size: int) -> float:
    """Position-weighted mean next-token NLL over a held-out corpus."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(prepared), batch_size):
            chunk = prepared[i:i + batch_size]
            lm, _ = _forward_losses(model, chunk, 0.0)
            n = int(sum(r.mask.sum() for r in chunk))
            total += float(lm.data) * n
            count += n
    return total / max(count, 1)


# -- run loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CovlmModel
    config: RunConfig
    final_checkpoint: str
    log_path: str
    rows: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def _ckpt_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt-{step:06d}.bin")


def latest_checkpoint(out_dir: str):
    paths = sorted(glob.glob(os.path.join(out_dir, "ckpt-*.bin")))
    return paths[-1] if paths else None


def save_checkpoint(path: str, model: CovlmModel, opt: AdamW, cfg: RunConfig,
                    step: int) -> None:
    arrays = dict(model.state_arrays())
    arrays.update(opt.state_arrays())
    checkpoint.save(path, arrays, meta={"config": cfg.to_dict(), "step": step})


def load_model(path: str):
    """(model, config, step) from a checkpoint written by save_checkpoint."""
    arrays = checkpoint.load(path)
    meta = checkpoint.load_meta(path)
    if not meta or "config" not in meta:
        raise checkpoint.CheckpointError(f"{path}: missing run config in manifest")
    cfg = RunConfig.from_dict(meta["config"])
    vocab = Vocab(vocabulary_words())
    model = CovlmModel(cfg.model_config(len(vocab)), vocab, cfg.seed)
    model.load_state_arrays({k: v for k, v in arrays.items()
                             if not k.startswith("opt.")})
    return model, cfg, int(meta.get("step", 0))


def train(cfg: RunConfig, resume: bool = True, quiet: bool = True) -> TrainResult:
    """Run (or resume) a full training job; deterministic per cfg.seed."""
    if not cfg.train_data or not cfg.out_dir:
        raise ValueError("config must set train_data and out_dir")
    os.makedirs(cfg.out_dir, exist_ok=True)
    vocab = Vocab(vocabulary_words())
    n_patches = cfg.n_grid * cfg.n_grid
    prepared = prepare_records(load_corpus(cfg.train_data), vocab, n_patches,
                               cfg.no_comm, root=os.path.dirname(cfg.train_data))
    val = None
    if cfg.val_data:
        val = prepare_records(load_corpus(cfg.val_data), vocab, n_patches,
                              cfg.no_comm, root=os.path.dirname(cfg.val_data))

    model = CovlmModel(cfg.model_config(len(vocab)), vocab, cfg.seed)
    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=0.0,
                weight_decay_map={"det.": DETECTOR_WEIGHT_DECAY})

    log_path = os.path.join(cfg.out_dir, "train_log.jsonl")
    start = 0
    rows, val_losses = [], []
    latest = latest_checkpoint(cfg.out_dir) if resume else None
    if latest:
        arrays = checkpoint.load(latest)
        meta = checkpoint.load_meta(latest)
        # extending a finished run (larger `steps`) is allowed; anything else must match
        theirs = dict(meta.get("config") or {})
        ours = cfg.to_dict()
        theirs.pop("steps", None)
        ours.pop("steps", None)
        if theirs != ours:
            raise checkpoint.CheckpointError(
                f"{latest}: checkpoint config differs from the requested run")
        if int(meta["step"]) > cfg.steps:
            raise checkpoint.CheckpointError(
                f"{latest}: already past step {cfg.steps}; use a fresh out_dir")
        model.load_state_arrays({k: v for k, v in arrays.items()
                                 if not k.startswith("opt.")})
        opt.load_state_arrays({k: v for k, v in arrays.items()
                               if k.startswith("opt.")})
        start = int(meta["step"])
        if os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8") as fh:
                kept = [json.loads(l) for l in fh if l.strip()]
            kept = [r for r in kept if r["step"] <= start]
            with open(log_path, "w", encoding="utf-8") as fh:
                for r in kept:
                    fh.write(json.dumps(r) + "\n")
            rows = [r for r in kept if "lm_loss" in r]

    with open(log_path, "a", encoding="utf-8") as log_fh:
        for step in range(start + 1, cfg.steps + 1):
            rng = rng_for(cfg.seed, "batch", step)
            idx = rng.choice(len(prepared), size=min(cfg.batch_size, len(prepared)),
                             replace=len(prepared) < cfg.batch_size)
            row = train_step(model, opt, [prepared[i] for i in idx], cfg.lambda_det)
            row["step"] = step
            rows.append(row)
            log_fh.write(json.dumps(row) + "\n")
            if step % cfg.eval_every == 0 or step == cfg.steps:
                if val:
                    vl = heldout_lm_loss(model, val, cfg.batch_size)
                    val_losses.append({"step": step, "val_lm_loss": vl})
                    log_fh.write(json.dumps(val_losses[-1]) + "\n")
                log_fh.flush()
                save_checkpoint(_ckpt_path(cfg.out_dir, step), model, opt, cfg, step)
                if not quiet:
                    print(f"step {step}: lm {row['lm_loss']:.4f} det {row['det_loss']:.4f}")

    final = _ckpt_path(cfg.out_dir, cfg.steps)
    if not os.path.exists(final):
        save_checkpoint(final, model, opt, cfg, cfg.steps)
    return TrainResult(model=model, config=cfg, final_checkpoint=final,
                       log_path=log_path, rows=rows, val_losses=val_losses)
