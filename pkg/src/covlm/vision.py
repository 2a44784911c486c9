"""Patch encoder, conditioned detection head, NMS, and ROI pooling.

The image becomes an N x N grid of D-dim patch features. The detection
head sees that grid concatenated with a language-model hidden state
broadcast to every cell (N x N x 2D) and predicts per cell a box offset
quadruple plus an objectness logit. Boxes are decoded as

    cx = (col + sigmoid(tx)) / N      w = sigmoid(tw)
    cy = (row + sigmoid(ty)) / N      h = sigmoid(th)
    score = sigmoid(obj)

so every proposal is inside valid bounds for any finite logits.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

N_GRID = 8
MIN_SIDE_NORM = 1e-4  # decode floor keeping w, h strictly positive

NMS_IOU = 0.5
SCORE_FLOOR = 0.05


class BoxProposal:
    """Normalized box + confidence; `cell` is the row-major grid cell the
    proposal came from (used for deterministic tie-breaking)."""

    __slots__ = ("box", "score", "cell")

    def __init__(self, box, score: float, cell: int = -1):
        self.box = tuple(float(v) for v in box)
        self.score = float(score)
        self.cell = int(cell)

    def __repr__(self):
        cx, cy, w, h = self.box
        return f"BoxProposal(({cx:.3f},{cy:.3f},{w:.3f},{h:.3f}), score={self.score:.3f}, cell={self.cell})"


def whole_image_box() -> tuple:
    return (0.5, 0.5, 1.0, 1.0)


def iou(a, b) -> float:
    """Symmetric IoU of two (cx, cy, w, h) boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


# -- patch encoder ------------------------------------------------------------


def image_to_patches(image: np.ndarray, n: int = N_GRID) -> np.ndarray:
    """(H, W, 3) -> (n*n, patch_pixels) row-major patch flattening."""
    h, w, c = image.shape
    if h % n or w % n:
        raise ValueError(f"image {h}x{w} not divisible into {n}x{n} patches")
    ph, pw = h // n, w // n
    x = image.reshape(n, ph, n, pw, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(n * n, ph * pw * c), dtype=np.float32)


class PatchEncoder:
    """Linear projection of raw patch pixels plus a learned grid-position
    embedding. Stands in for a frozen vision tower at desk scale, but is
    trained jointly here."""

    def __init__(self, d_model: int, image_size: int, rng, n: int = N_GRID):
        self.n = n
        self.d = d_model
        ppx = (image_size // n) * (image_size // n) * 3
        self.proj_w = Tensor(rng.normal(0, ppx ** -0.5, (ppx, d_model)).astype(np.float32),
                             requires_grad=True)
        self.proj_b = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
        self.pos = Tensor(rng.normal(0, 0.02, (n * n, d_model)).astype(np.float32),
                          requires_grad=True)

    def params(self, prefix: str = "enc.") -> dict:
        return {prefix + "proj_w": self.proj_w, prefix + "proj_b": self.proj_b,
                prefix + "pos": self.pos}

    def encode(self, image: np.ndarray) -> Tensor:
        """(H, W, 3) image -> (n*n, D) grid feature tensor."""
        patches = Tensor(image_to_patches(image, self.n))
        return patches @ self.proj_w + self.proj_b + self.pos

    def encode_batch(self, images: np.ndarray) -> Tensor:
        """(B, H, W, 3) -> (B, n*n, D)."""
        flat = np.stack([image_to_patches(im, self.n) for im in images])
        return Tensor(flat) @ self.proj_w + self.proj_b + self.pos


# -- detection head -----------------------------------------------------------


class DetectionHead:
    """3x3 neighborhood mix over the conditioned grid, then a shared
    per-cell MLP 2D -> 2D -> 5."""

    def __init__(self, d_model: int, rng, n: int = N_GRID):
        self.n = n
        self.d = d_model
        d2 = 2 * d_model

        def lin(fan_in, fan_out):
            return Tensor(rng.normal(0, fan_in ** -0.5, (fan_in, fan_out)).astype(np.float32),
                          requires_grad=True)

        self.mix_w = lin(9 * d2, d2)
        self.mix_b = Tensor(np.zeros(d2, dtype=np.float32), requires_grad=True)
        self.fc1_w = lin(d2, d2)
        self.fc1_b = Tensor(np.zeros(d2, dtype=np.float32), requires_grad=True)
        self.fc2_w = lin(d2, 5)
        self.fc2_b = Tensor(np.zeros(5, dtype=np.float32), requires_grad=True)

    def params(self, prefix: str = "det.") -> dict:
        return {prefix + "mix_w": self.mix_w, prefix + "mix_b": self.mix_b,
                prefix + "fc1_w": self.fc1_w, prefix + "fc1_b": self.fc1_b,
                prefix + "fc2_w": self.fc2_w, prefix + "fc2_b": self.fc2_b}

    def logits(self, grid: Tensor, hidden: Tensor) -> Tensor:
        """grid (K, n*n, D) + hidden (K, D) -> per-cell logits (K, n, n, 5)."""
        if grid.ndim != 3 or hidden.ndim != 2:
            raise T.ShapeError(f"detection head wants (K,n*n,D) grid and (K,D) hidden, "
                               f"got {grid.shape} and {hidden.shape}")
        if grid.shape[-1] != self.d or hidden.shape[-1] != self.d:
            raise T.ShapeError(f"feature dim mismatch: grid {grid.shape}, hidden "
                               f"{hidden.shape}, head dim {self.d}")
        k, nn, d = grid.shape
        n = self.n
        ones = Tensor(np.ones((nn, 1), dtype=np.float32))
        h_exp = hidden.reshape(k, 1, d) * ones          # (K, n*n, D)
        x = T.concat([grid, h_exp], axis=2)             # (K, n*n, 2D)
        x = x.reshape(k, n, n, 2 * d)

        # zero-pad one cell on each side, then gather the 9 shifted views
        d2 = 2 * d
        zrow = Tensor(np.zeros((k, 1, n, d2), dtype=np.float32))
        x = T.concat([zrow, x, zrow], axis=1)
        zcol = Tensor(np.zeros((k, n + 2, 1, d2), dtype=np.float32))
        x = T.concat([zcol, x, zcol], axis=2)
        views = []
        for dy in range(3):
            for dx in range(3):
                views.append(x[:, dy:dy + n, dx:dx + n, :])
        x = T.concat(views, axis=3)                     # (K, n, n, 9*2D)

        x = x.reshape(k, n * n, 9 * d2)
        x = T.gelu(x @ self.mix_w + self.mix_b)
        x = T.gelu(x @ self.fc1_w + self.fc1_b)
        x = x @ self.fc2_w + self.fc2_b
        return x.reshape(k, n, n, 5)


def decode_proposals(logits: np.ndarray, n: int = N_GRID) -> list:
    """Raw (n, n, 5) logits -> all n*n proposals, score-descending with
    ties broken by lower row-major cell index."""
    if logits.shape != (n, n, 5):
        raise ValueError(f"expected ({n},{n},5) logits, got {logits.shape}")
    s = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    rows, cols = np.mgrid[0:n, 0:n]
    cx = (cols + s[..., 0]) / n
    cy = (rows + s[..., 1]) / n
    w = np.maximum(s[..., 2], MIN_SIDE_NORM)
    h = np.maximum(s[..., 3], MIN_SIDE_NORM)
    score = s[..., 4]
    out = [BoxProposal((cx[r, c], cy[r, c], w[r, c], h[r, c]), score[r, c], cell=r * n + c)
           for r in range(n) for c in range(n)]
    out.sort(key=lambda p: (-p.score, p.cell))
    return out


def nms(proposals, iou_threshold: float = NMS_IOU, score_floor: float = SCORE_FLOOR) -> list:
    """Greedy NMS: walk score-descending (ties by lower cell index), keep a
    proposal iff it clears the floor and overlaps every kept box by at most
    iou_threshold."""
    order = sorted(proposals, key=lambda p: (-p.score, p.cell))
    kept = []
    for p in order:
        if p.score < score_floor:
            continue
        if all(iou(p.box, q.box) <= iou_threshold for q in kept):
            kept.append(p)
    return kept


def top_m(proposals, m: int) -> list:
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return proposals[:m]


# -- roi pooling --------------------------------------------------------------


def covered_patches(box, n: int = N_GRID) -> list:
    """Row-major indices of patches whose centers fall inside the box; if
    none do, the single patch with maximal overlap area (ties to the lower
    index). Errors on boxes that miss the image entirely."""
    cx, cy, w, h = box
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if x2 <= 0 or y2 <= 0 or x1 >= 1 or y1 >= 1 or w <= 0 or h <= 0:
        raise ValueError(f"box {box} does not intersect the image")
    out = []
    for r in range(n):
        py = (r + 0.5) / n
        for c in range(n):
            px = (c + 0.5) / n
            if x1 <= px <= x2 and y1 <= py <= y2:
                out.append(r * n + c)
    if out:
        return out
    best, best_area = 0, -1.0
    for r in range(n):
        for c in range(n):
            gx1, gy1 = c / n, r / n
            gx2, gy2 = (c + 1) / n, (r + 1) / n
            iw = min(x2, gx2) - max(x1, gx1)
            ih = min(y2, gy2) - max(y1, gy1)
            area = iw * ih if (iw > 0 and ih > 0) else 0.0
            if area > best_area:
                best_area, best = area, r * n + c
    return [best]


def roi_pool_np(grid: np.ndarray, box, n: int = N_GRID) -> np.ndarray:
    """(n*n, D) or (n, n, D) numpy grid -> mean feature over covered patches."""
    flat = grid.reshape(n * n, -1)
    idx = covered_patches(box, n)
    return flat[idx].mean(axis=0)


def roi_pool(grid: Tensor, box, n: int = N_GRID) -> Tensor:
    """Differentiable pooling: (n*n, D) grid tensor -> (D,) feature."""
    idx = covered_patches(box, n)
    return T.embedding(grid, np.array(idx)).mean(axis=0)


# -- detection loss -----------------------------------------------------------


def _sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))


def assign_positives(logits_np: np.ndarray, gt_boxes, n: int = N_GRID):
    """(cell index, gt index) pairs: each GT claims the cell its center
    lies in; when several GTs share a cell, the one whose box best overlaps
    the cell's current prediction wins (ties to the lower GT index)."""
    by_cell = {}
    for gi, gt in enumerate(gt_boxes):
        col = min(int(gt[0] * n), n - 1)
        row = min(int(gt[1] * n), n - 1)
        by_cell.setdefault(row * n + col, []).append(gi)
    out = []
    for cell in sorted(by_cell):
        cands = by_cell[cell]
        if len(cands) == 1:
            out.append((cell, cands[0]))
            continue
        r, c = divmod(cell, n)
        s = _sigmoid_np(logits_np[r, c, :4])
        pred = ((c + s[0]) / n, (r + s[1]) / n, max(s[2], MIN_SIDE_NORM), max(s[3], MIN_SIDE_NORM))
        best = max(cands, key=lambda gi: (iou(pred, gt_boxes[gi]), -gi))
        out.append((cell, best))
    return out


def detection_loss(logits: Tensor, gt_boxes, n: int = N_GRID) -> Tensor:
    """Single-grid loss: logits (n, n, 5) against a list of GT boxes."""
    return detection_loss_batch(logits.reshape(1, n, n, 5), [list(gt_boxes)], n)


def detection_loss_batch(logits: Tensor, gt_lists, n: int = N_GRID) -> Tensor:
    """Batched loss over K grids: BCE(objectness) over every cell plus
    mean(1 - IoU) over all positive cells in the batch."""
    k = logits.shape[0]
    if len(gt_lists) != k:
        raise T.ShapeError(f"{k} grids but {len(gt_lists)} GT lists")
    flat = logits.reshape(k * n * n, 5)

    targets = np.zeros((k, n * n), dtype=np.float32)
    pos_rows = []    # row index into flat
    pos_gt = []
    logits_np = logits.data
    for ki in range(k):
        for cell, gi in assign_positives(logits_np[ki], gt_lists[ki], n):
            targets[ki, cell] = 1.0
            pos_rows.append(ki * n * n + cell)
            pos_gt.append(gt_lists[ki][gi])

    obj = flat[:, 4]
    tvec = Tensor(targets.reshape(-1))
    bce = (T.softplus(obj) - obj * tvec).mean()
    if not pos_rows:
        return bce

    rows = np.array(pos_rows)
    picked = T.embedding(flat, rows)          # (P, 5)
    s = T.sigmoid(picked[:, 0:4])
    cols_np = (rows % (n * n)) % n
    rows_np = (rows % (n * n)) // n
    cx = (s[:, 0] + Tensor(cols_np.astype(np.float32))) * (1.0 / n)
    cy = (s[:, 1] + Tensor(rows_np.astype(np.float32))) * (1.0 / n)
    w = T.maximum(s[:, 2], Tensor(np.full(len(rows), MIN_SIDE_NORM, dtype=np.float32)))
    h = T.maximum(s[:, 3], Tensor(np.full(len(rows), MIN_SIDE_NORM, dtype=np.float32)))

    gt = np.asarray(pos_gt, dtype=np.float32)
    gx1, gy1 = Tensor(gt[:, 0] - gt[:, 2] / 2), Tensor(gt[:, 1] - gt[:, 3] / 2)
    gx2, gy2 = Tensor(gt[:, 0] + gt[:, 2] / 2), Tensor(gt[:, 1] + gt[:, 3] / 2)
    garea = Tensor(gt[:, 2] * gt[:, 3])

    half = Tensor(np.float32(0.5))
    px1, px2 = cx - w * half, cx + w * half
    py1, py2 = cy - h * half, cy + h * half
    zero = Tensor(np.zeros(len(rows), dtype=np.float32))
    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), zero)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), zero)
    inter = iw * ih
    union = w * h + garea - inter + Tensor(np.float32(1e-9))
    iou_t = inter / union
    iou_loss = (Tensor(np.float32(1.0)) - iou_t).mean()
    return bce + iou_loss
