"""Continuous integrate-and-fire alignment and the layers built around it.

Pipeline: :func:`predict_weights` gives per-frame weights in (0, 1);
:func:`scale_weights` rescales them to the target length during training;
:func:`integrate_and_fire` accumulates frames until the weight reaches the
threshold and fires one embedding per crossing; :func:`funnel_cif` and
:func:`context_blocks` refine the fired sequence.

Firing is planned on plain Python floats (:func:`plan_firing`) and the
embeddings are then accumulated entry by entry, so the values are the same
arithmetic sequence as the scalar simulator :func:`simulate_cif`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autograd import ops
from .autograd.tensor import Function, Tensor
from .errors import DegenerateInputError, DimensionError
from .layers import mask_rows, transformer_block

BETA = 1.0
TAIL_THRESHOLD = 0.5


@dataclass
class CifWeights:
    alpha: Tensor  # [T] or [B, T]; zero on masked frames
    frame_mask: np.ndarray
    alpha_scaled: Optional[Tensor] = None


@dataclass
class FirePlan:
    """How one utterance's frames are split into fired cells.

    Each cell entry is ``(frame, weight, starts_at_frame_start, ends_at_frame_end)``.
    A weight is the length of the overlap between the frame's slice of the
    cumulative weight axis and the cell's slice, which is what the backward
    rule differentiates.
    """

    cells: List[List[Tuple[int, float, bool, bool]]] = field(default_factory=list)
    fire_frames: List[int] = field(default_factory=list)
    boundaries: List[Tuple[int, float, float]] = field(default_factory=list)
    residue_entries: List[Tuple[int, float, bool, bool]] = field(default_factory=list)
    residue_weight: float = 0.0
    tail_weight: float = 0.0
    tail_fired: bool = False
    forced_close: bool = False

    @property
    def fire_count(self) -> int:
        return len(self.cells)

    def consumed(self) -> float:
        return float(sum(w for cell in self.cells for _, w, _, _ in cell))


@dataclass
class CifOutput:
    fired: Tensor  # [U_f, d]
    boundaries: List[Tuple[int, float, float]]
    fire_frames: List[int]
    residue_weight: float
    residue_embedding: np.ndarray
    plan: FirePlan

    @property
    def fire_count(self) -> int:
        return self.plan.fire_count


# ------------------------------------------------------------------ weights


def predict_weights(H: Tensor, params: Mapping[str, Tensor], frame_mask: Optional[np.ndarray] = None,
                    prefix: str = "cif") -> CifWeights:
    """alpha = sigmoid(FC(Conv(H))), zeroed on masked frames. H is [T, d] or [B, T, d]."""
    single = H.ndim == 2
    x = ops.reshape(H, (1,) + H.shape) if single else H
    b, t, _ = x.shape
    mask = np.ones((b, t), dtype=bool) if frame_mask is None else np.asarray(frame_mask, dtype=bool).reshape(b, t)
    h = ops.conv1d(x, params[f"{prefix}.conv.weight"]) + params[f"{prefix}.conv.bias"]
    logit = ops.matmul(h, params[f"{prefix}.fc.weight"]) + params[f"{prefix}.fc.bias"]
    alpha = ops.sigmoid(ops.reshape(logit, (b, t))) * ops.constant_mask(mask, (b, t))
    if single:
        alpha = ops.reshape(alpha, (t,))
        mask = mask[0]
    return CifWeights(alpha=alpha, frame_mask=mask)


def scale_weights(w: CifWeights, target_len) -> CifWeights:
    """alpha' = alpha * S / sum(alpha) so that the scaled weights sum to the target length.

    ``target_len`` is an int for [T] weights or a sequence for [B, T]. An
    empty target gives all-zero scaled weights; a zero weight sum with a
    non-empty target raises :class:`DegenerateInputError`.
    """
    alpha = w.alpha
    single = alpha.ndim == 1
    targets = np.atleast_1d(np.asarray(target_len, dtype=np.float64))
    a2 = ops.reshape(alpha, (1, alpha.shape[0])) if single else alpha
    sums = a2.data.sum(axis=1)
    bad = (sums == 0) & (targets > 0)
    if bad.any():
        raise DegenerateInputError(f"weight sum is zero for utterance(s) {np.flatnonzero(bad).tolist()}")
    total = ops.sum(a2, axis=1, keepdims=True)
    # An empty target with zero weight would give 0/0; the factor S = 0 zeroes the row anyway.
    fix = ((sums == 0) & (targets == 0)).astype(np.float64)[:, None]
    # alpha / sum first: the ratio is at most 1, so tiny sums cannot overflow.
    share = a2 / ops.broadcast_to(total + fix, a2.shape)
    scaled = share * ops.constant_mask(targets[:, None], a2.shape)
    if single:
        scaled = ops.reshape(scaled, (alpha.shape[0],))
    return CifWeights(alpha=w.alpha, frame_mask=w.frame_mask, alpha_scaled=scaled)


def quantity_loss(w: CifWeights, target_len) -> Tensor:
    """|sum(alpha) - S| on the unscaled weights; [B] for batched input, scalar otherwise."""
    alpha = w.alpha
    if alpha.ndim == 1:
        return ops.abs(ops.sum(alpha) - float(target_len))
    targets = np.asarray(target_len, dtype=np.float64)
    return ops.abs(ops.sum(alpha, axis=1) - targets)


# ------------------------------------------------------------------- firing


def plan_firing(alpha: Sequence[float], beta: float = BETA, mode: str = "train",
                target_len: Optional[int] = None, tail_threshold: float = TAIL_THRESHOLD) -> FirePlan:
    """Accumulate weights left to right and record where cells fire.

    On reaching ``beta`` at frame t, alpha_t is split once: the first part
    closes the current cell and the remainder seeds the next (repeatedly if
    the remainder itself reaches beta). In train mode firing stops after
    ``target_len`` cells and a short final cell is closed at the last frame;
    in infer mode the residue is fired iff it reaches ``tail_threshold``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and target_len is None:
        raise ValueError("train mode needs target_len")
    plan = FirePlan()
    limit = target_len if mode == "train" else None
    acc = 0.0
    cur: list = []
    done = limit == 0
    for t, a in enumerate(alpha):
        if done:
            break
        remaining = a
        start = True
        while acc + remaining >= beta:
            a1 = beta - acc
            a2 = remaining - a1
            cur.append((t, a1, start, False))
            plan.cells.append(cur)
            plan.fire_frames.append(t)
            plan.boundaries.append((t, a1, a2))
            cur, acc, remaining, start = [], 0.0, a2, False
            if limit is not None and len(plan.cells) == limit:
                done = True
                break
        if done:
            break
        if remaining > 0.0:
            cur.append((t, remaining, start, True))
            acc = acc + remaining
    plan.residue_entries = cur
    plan.residue_weight = acc if cur else 0.0
    if mode == "train":
        if len(plan.cells) < target_len and cur:
            plan.cells.append(cur)
            plan.fire_frames.append(cur[-1][0])
            plan.forced_close = True
            plan.residue_entries, plan.residue_weight = [], 0.0
        if len(plan.cells) != target_len:
            raise DegenerateInputError(
                f"train-mode firing produced {len(plan.cells)} cells for target length {target_len}; "
                "weights must be scaled to the target length first")
    elif cur and acc >= tail_threshold:
        plan.cells.append(cur)
        plan.fire_frames.append(cur[-1][0])
        plan.tail_fired = True
        plan.tail_weight = acc
        plan.residue_entries, plan.residue_weight = [], 0.0
    return plan


def _entry_arrays(plans: Sequence[FirePlan], n_cells: int, n_frames: int):
    """Group entries by their rank within a cell, as flat (cell, frame, weight) index arrays."""
    by_rank: list = []
    for b, plan in enumerate(plans):
        for u, cell in enumerate(plan.cells):
            for rank, (t, w, _, _) in enumerate(cell):
                if rank == len(by_rank):
                    by_rank.append(([], [], []))
                cells, frames, weights = by_rank[rank]
                cells.append(b * n_cells + u)
                frames.append(b * n_frames + t)
                weights.append(w)
    return [(np.array(c), np.array(f), np.array(w)) for c, f, w in by_rank]


class _Integrate(Function):
    """Fire embeddings from H [B, T, d] and weights alpha [B, T] following ``plans``."""

    @staticmethod
    def forward(ctx, H, alpha, plans, n_cells):
        b, t, d = H.shape
        out = np.zeros((b * n_cells, d))
        flat_h = H.reshape(b * t, d)
        # Entry k of every cell is added in one vector op; per element this is
        # still c = c + w * h in frame order.
        for cells, frames, weights in _entry_arrays(plans, n_cells, t):
            out[cells] = out[cells] + weights[:, None] * flat_h[frames]
        tails = []
        for i, plan in enumerate(plans):
            if plan.tail_fired:
                row = i * n_cells + plan.fire_count - 1
                r = plan.tail_weight
                out[row] = out[row] / r
                tails.append((row, r))
        ctx.save(H)
        ctx.plans = plans
        ctx.n_cells = n_cells
        ctx.tails = tails
        out = out.reshape(b, n_cells, d)
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, g):
        (H,) = ctx.saved
        b, t, d = H.shape
        n_cells = ctx.n_cells
        tail_rows = dict(ctx.tails)
        gH = np.zeros_like(H)
        galpha = np.zeros((b, t))
        for i, plan in enumerate(ctx.plans):
            if not plan.cells:
                continue
            W = np.zeros((n_cells, t))
            for u, cell in enumerate(plan.cells):
                for (ft, w, _, _) in cell:
                    W[u, ft] += w
            gc = g[i]
            row = i * n_cells + plan.fire_count - 1
            if row in tail_rows:
                r = tail_rows[row]
                W[plan.fire_count - 1] /= r
            gH[i] = W.T @ gc
            if not ctx.needs[1]:
                continue
            dS = np.zeros(t)
            proj = gc @ H[i].T  # [U, T]: dC_u . h_t
            for u, cell in enumerate(plan.cells):
                tail = u == plan.fire_count - 1 and (i * n_cells + u) in tail_rows
                for (ft, w, starts, ends) in cell:
                    gw = proj[u, ft]
                    if tail:
                        r = tail_rows[i * n_cells + u]
                        gw = (gw - gc[u] @ ctx.out[i, u]) / r
                    if ends:
                        dS[ft] += gw
                    if starts and ft > 0:
                        dS[ft - 1] -= gw
            galpha[i] = np.cumsum(dS[::-1])[::-1]
        return gH, galpha


def fire_batch(H: Tensor, alpha: Tensor, frame_lengths: Sequence[int], mode: str = "train",
               target_lengths: Optional[Sequence[int]] = None, beta: float = BETA,
               tail_threshold: float = TAIL_THRESHOLD, n_cells: Optional[int] = None):
    """Batched integrate-and-fire: returns (fired [B, U_max, d], plans)."""
    plans = []
    a = alpha.data
    for i, n in enumerate(frame_lengths):
        target = None if target_lengths is None else int(target_lengths[i])
        plans.append(plan_firing(a[i, : int(n)].tolist(), beta, mode, target, tail_threshold))
    if n_cells is None:
        n_cells = max((p.fire_count for p in plans), default=0)
    return _Integrate.apply(H, alpha, plans=plans, n_cells=n_cells), plans


def integrate_and_fire(H: Tensor, w: CifWeights, beta: float = BETA, mode: str = "train",
                       target_len: Optional[int] = None, tail_threshold: float = TAIL_THRESHOLD) -> CifOutput:
    """Fire integrated embeddings for one utterance H [T, d].

    Train mode consumes ``w.alpha_scaled`` and fires exactly ``target_len``
    cells; infer mode consumes ``w.alpha`` and applies the tail rule.
    Differentiable with respect to both H and the weights.
    """
    if H.ndim != 2:
        raise DimensionError(f"integrate_and_fire expects H of shape [T, d], got {H.shape}")
    weights = w.alpha_scaled if mode == "train" else w.alpha
    if mode == "train" and weights is None:
        raise ValueError("train mode needs scaled weights; call scale_weights first")
    if weights.shape != (H.shape[0],):
        raise DimensionError(f"weights {weights.shape} do not match frames {H.shape}")
    n_valid = int(np.asarray(w.frame_mask, dtype=bool).sum())
    fired, plans = fire_batch(
        ops.reshape(H, (1,) + H.shape), ops.reshape(weights, (1, H.shape[0])), [n_valid], mode,
        None if target_len is None else [target_len], beta, tail_threshold)
    plan = plans[0]
    fired = ops.reshape(fired, (plan.fire_count, H.shape[1]))
    residue = np.zeros(H.shape[1])
    for (t, wt, _, _) in plan.residue_entries:
        residue = residue + wt * H.data[t]
    return CifOutput(fired=fired, boundaries=plan.boundaries, fire_frames=plan.fire_frames,
                     residue_weight=plan.residue_weight, residue_embedding=residue, plan=plan)


def simulate_cif(alpha: Sequence[float], frames: Sequence[Sequence[float]], beta: float = BETA,
                 mode: str = "train", target_len: Optional[int] = None,
                 tail_threshold: float = TAIL_THRESHOLD):
    """Scalar reference integrate-and-fire on plain lists.

    Returns (embeddings, fire_frames, residue_weight). Kept free of numpy and
    of :func:`plan_firing` so it can serve as an independent check.
    """
    d = len(frames[0]) if len(frames) else 0
    fired, fire_frames = [], []
    acc = 0.0
    emb = [0.0] * d
    open_cell = False
    limit = target_len if mode == "train" else None
    stop = limit == 0
    last = -1
    for t in range(len(alpha)):
        if stop:
            break
        a = alpha[t]
        h = frames[t]
        while acc + a >= beta:
            a1 = beta - acc
            emb = [emb[j] + a1 * h[j] for j in range(d)]
            fired.append(emb)
            fire_frames.append(t)
            a = a - a1
            acc = 0.0
            emb = [0.0] * d
            open_cell = False
            if limit is not None and len(fired) == limit:
                stop = True
                break
        if stop:
            break
        if a > 0.0:
            emb = [emb[j] + a * h[j] for j in range(d)]
            acc = acc + a
            open_cell = True
            last = t
    if mode == "train":
        if len(fired) < target_len and open_cell:
            fired.append(emb)
            fire_frames.append(last)
            acc = 0.0
    elif open_cell and acc >= tail_threshold:
        fired.append([e / acc for e in emb])
        fire_frames.append(last)
        acc = 0.0
    return fired, fire_frames, (acc if open_cell else 0.0)


# --------------------------------------------------------- funnel / context


def funnel_cif(C: Tensor, H: Tensor, params: Mapping[str, Tensor], frame_mask: Optional[np.ndarray] = None,
               prefix: str = "funnel") -> Tensor:
    """C' = C + Attention(q=C, kv=H): single-head readback of the raw encoder frames.

    C is [U, d] or [B, U, d]; H is [T, d] or [B, T, d]; frame_mask marks valid frames.
    """
    single = C.ndim == 2
    if single:
        C = ops.reshape(C, (1,) + C.shape)
        H = ops.reshape(H, (1,) + H.shape)
        if frame_mask is not None:
            frame_mask = np.asarray(frame_mask, dtype=bool)[None]
    if C.shape[1] == 0:
        return ops.reshape(C, C.shape[1:]) if single else C
    q = ops.matmul(C, params[f"{prefix}.wq"])
    k = ops.matmul(H, params[f"{prefix}.wk"])
    v = ops.matmul(H, params[f"{prefix}.wv"])
    mask = None if frame_mask is None else np.asarray(frame_mask, dtype=bool)[:, None, :]
    out = C + ops.matmul(ops.attention(q, k, v, mask), params[f"{prefix}.wo"])
    return ops.reshape(out, out.shape[1:]) if single else out


def context_blocks(C: Tensor, params: Mapping[str, Tensor], n_layers: int, heads: int,
                   cell_mask: Optional[np.ndarray] = None, prefix: str = "context") -> Tensor:
    """Stack of pre-norm self-attention + FFN blocks over the fired sequence."""
    if n_layers == 0:
        return C
    single = C.ndim == 2
    x = ops.reshape(C, (1,) + C.shape) if single else C
    if x.shape[1] == 0:
        return C
    mask = None if cell_mask is None else np.asarray(cell_mask, dtype=bool).reshape(x.shape[:2])
    for i in range(n_layers):
        x = transformer_block(x, params, f"{prefix}.layer{i}", heads, mask)
    if mask is not None:
        x = mask_rows(x, mask)
    return ops.reshape(x, x.shape[1:]) if single else x


def cif_param_shapes(d: int, kernel: int = 3, prefix: str = "cif") -> list:
    return [
        (f"{prefix}.conv.weight", (kernel, d, d), "xavier"),
        (f"{prefix}.conv.bias", (d,), "zeros"),
        (f"{prefix}.fc.weight", (d, 1), "xavier"),
        (f"{prefix}.fc.bias", (1,), "zeros"),
    ]


def funnel_param_shapes(d: int, prefix: str = "funnel") -> list:
    return [(f"{prefix}.{n}", (d, d), "xavier") for n in ("wq", "wk", "wv", "wo")]
