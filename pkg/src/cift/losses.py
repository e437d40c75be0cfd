"""Training objectives: cross-entropies, CTC, RNN-T, enumeration oracles, and the weighted total.

The two sequence losses are log-space forward-backward dynamic programs that
act on log-probabilities; their backward rule returns minus the posterior
occupancy of every (frame, symbol) transition. :func:`enumerate_paths_oracle`
recomputes both by listing every alignment path in plain float arithmetic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import ops
from .autograd.tensor import Function, Tensor
from .errors import AlignmentError, ConfigError, DimensionError, InfeasibleError, OracleRefusal

DEFAULT_LAMBDAS = (1.0, 1.0, 0.3)
NEG_INF = -np.inf


# ------------------------------------------------------------ cross entropy


def _ce(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        if logits.shape[0] != len(targets):
            raise AlignmentError(f"{logits.shape[0]} logit rows for {len(targets)} targets")
        if len(targets) == 0:
            return Tensor(0.0)
        picked = ops.pick(ops.log_softmax(logits), targets)
        return -ops.mean(picked)
    raise DimensionError(f"expected logits [U, V], got {logits.shape}")


def joint_ce(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(logits_u)[target_u]; 0 for an empty target."""
    return _ce(logits, targets)


def lm_ce(predictor_logits: Tensor, targets) -> Tensor:
    """Next-token CE of the predictor head (teacher-forced input [BOS, y_1..y_{U-1}])."""
    return _ce(predictor_logits, targets)


def batch_ce(logits: Tensor, targets: np.ndarray, target_lengths: Sequence[int]) -> Tensor:
    """Per-utterance mean CE for padded logits [B, U_max, V]; returns [B]."""
    b, u_max, _ = logits.shape
    lengths = np.asarray(target_lengths, dtype=np.int64)
    if targets.shape[:2] != (b, u_max):
        raise AlignmentError(f"logits {logits.shape} do not line up with targets {targets.shape}")
    valid = np.arange(u_max)[None, :] < lengths[:, None]
    weights = np.where(valid, 1.0 / np.maximum(lengths, 1)[:, None], 0.0)
    picked = ops.pick(ops.log_softmax(logits), np.where(valid, targets, 0))
    return -ops.sum(picked * Tensor._wrap(weights), axis=1)


# ----------------------------------------------------------------------- CTC


def ctc_min_frames(targets: Sequence[int]) -> int:
    """Fewest frames that can carry ``targets``: one per label plus a blank between repeats."""
    targets = list(targets)
    return len(targets) + sum(1 for a, b in zip(targets, targets[1:]) if a == b)


class _CtcDP(Function):
    """-log sum over CTC paths, from log-probs [B, T, K]; returns [B]."""

    @staticmethod
    def forward(ctx, logp, targets, input_lengths, target_lengths, blank, include):
        b_sz, t_max, k = logp.shape
        u_max = targets.shape[1]
        s_max = 2 * u_max + 1
        ext = np.full((b_sz, s_max), blank, dtype=np.int64)
        ext[:, 1::2] = np.where(targets >= 0, targets, blank)
        s_len = 2 * np.asarray(target_lengths) + 1
        skip = np.zeros((b_sz, s_max), dtype=bool)
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
        emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (b_sz, t_max, s_max)), axis=2)

        alpha = np.full((b_sz, t_max, s_max), NEG_INF)
        alpha[:, 0, 0] = emit[:, 0, 0]
        if s_max > 1:
            alpha[:, 0, 1] = np.where(s_len > 1, emit[:, 0, 1], NEG_INF)
        for t in range(1, t_max):
            prev = alpha[:, t - 1]
            acc = prev.copy()
            acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
            acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
            alpha[:, t] = acc + emit[:, t]

        rows = np.arange(b_sz)
        last_t = np.asarray(input_lengths) - 1
        end = alpha[rows, last_t, s_len - 1]
        end2 = np.where(s_len > 1, alpha[rows, last_t, np.maximum(s_len - 2, 0)], NEG_INF)
        log_z = np.logaddexp(end, end2)
        log_z = np.where(include, log_z, 0.0)

        ctx.meta = (ext, skip, emit, alpha, s_len, log_z, include, k)
        ctx.lengths = np.asarray(input_lengths)
        return np.where(include, -log_z, 0.0)

    @staticmethod
    def backward(ctx, g):
        ext, skip, emit, alpha, s_len, log_z, include, k = ctx.meta
        b_sz, t_max, s_max = alpha.shape
        lengths = ctx.lengths
        s_idx = np.arange(s_max)[None, :]
        final = (s_idx == (s_len - 1)[:, None]) | (s_idx == (s_len - 2)[:, None])
        beta = np.full((b_sz, t_max, s_max), NEG_INF)
        nxt = np.full((b_sz, s_max), NEG_INF)
        for t in range(t_max - 1, -1, -1):
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
            cur = acc + emit[:, t]
            cur = np.where((t == lengths - 1)[:, None], np.where(final, emit[:, t], NEG_INF), cur)
            cur = np.where((t >= lengths)[:, None], NEG_INF, cur)
            beta[:, t] = cur
            nxt = cur
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - emit - log_z[:, None, None])
        occ = np.where(include[:, None, None], np.nan_to_num(occ, nan=0.0), 0.0)
        onehot = (ext[:, :, None] == np.arange(k)[None, None, :]).astype(np.float64)
        grad = -(occ @ onehot)
        return grad * g[:, None, None], None


def ctc_loss(logits: Tensor, targets, input_lengths=None, target_lengths=None, blank: Optional[int] = None,
             skip_infeasible: bool = False):
    """CTC negative log-likelihood with blank = last index by default.

    ``logits`` [T, K] with a 1-D target returns a scalar; [B, T, K] with a
    padded [B, U_max] target array returns per-utterance losses [B]. An
    infeasible target raises :class:`InfeasibleError`, or with
    ``skip_infeasible`` contributes 0 and is listed in the returned
    ``infeasible`` index list (batched form returns ``(losses, infeasible)``).
    """
    single = logits.ndim == 2
    if single:
        targets = np.asarray(targets, dtype=np.int64).reshape(1, -1)
        logits = ops.reshape(logits, (1,) + logits.shape)
        input_lengths = [logits.shape[1]]
        target_lengths = [targets.shape[1]]
    b_sz, t_max, k = logits.shape
    blank = k - 1 if blank is None else blank
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 2 or targets.shape[0] != b_sz:
        raise DimensionError(f"targets {targets.shape} do not match batch {b_sz}")
    input_lengths = np.full(b_sz, t_max) if input_lengths is None else np.asarray(input_lengths)
    target_lengths = (np.full(b_sz, targets.shape[1]) if target_lengths is None
                      else np.asarray(target_lengths))
    if t_max == 0 or (input_lengths < 1).any():
        raise InfeasibleError("CTC needs at least one frame")
    include = np.ones(b_sz, dtype=bool)
    for i in range(b_sz):
        if ctc_min_frames(targets[i, : target_lengths[i]]) > input_lengths[i]:
            if not skip_infeasible:
                raise InfeasibleError(f"utterance {i}: {target_lengths[i]} labels cannot fit in "
                                      f"{input_lengths[i]} frames")
            include[i] = False
    if targets.shape[1] == 0:
        targets = np.zeros((b_sz, 0), dtype=np.int64)
    losses = _CtcDP.apply(ops.log_softmax(logits), targets=targets, input_lengths=input_lengths,
                          target_lengths=target_lengths, blank=blank, include=include)
    if single:
        return ops.reshape(losses, ())
    return losses, np.flatnonzero(~include).tolist()


# --------------------------------------------------------------------- RNN-T


class _RnntDP(Function):
    """-log sum over transducer lattice paths, from log-probs [B, T, U+1, K]; returns [B]."""

    @staticmethod
    def forward(ctx, logp, targets, input_lengths, target_lengths, blank):
        b_sz, t_max, u1, k = logp.shape
        u_max = u1 - 1
        blank_lp = logp[..., blank]  # [B, T, U+1]
        if u_max:
            idx = np.broadcast_to(np.where(targets >= 0, targets, 0)[:, None, :, None], (b_sz, t_max, u_max, 1))
            emit_lp = np.take_along_axis(logp[:, :, :u_max, :], idx, axis=3)[..., 0]  # [B, T, U]
        else:
            emit_lp = np.zeros((b_sz, t_max, 0))
        alpha = np.full((b_sz, t_max, u1), NEG_INF)
        alpha[:, 0, 0] = 0.0
        for t in range(t_max):
            for u in range(u1):
                if t == 0 and u == 0:
                    continue
                a = alpha[:, t - 1, u] + blank_lp[:, t - 1, u] if t > 0 else NEG_INF
                e = alpha[:, t, u - 1] + emit_lp[:, t, u - 1] if u > 0 else NEG_INF
                alpha[:, t, u] = np.logaddexp(a, e)
        rows = np.arange(b_sz)
        tl = np.asarray(input_lengths) - 1
        ul = np.asarray(target_lengths)
        log_z = alpha[rows, tl, ul] + blank_lp[rows, tl, ul]
        ctx.meta = (blank_lp, emit_lp, alpha, log_z, tl, ul, blank, k)
        ctx.targets = targets
        return -log_z

    @staticmethod
    def backward(ctx, g):
        blank_lp, emit_lp, alpha, log_z, tl, ul, blank, k = ctx.meta
        b_sz, t_max, u1 = alpha.shape
        beta = np.full((b_sz, t_max, u1), NEG_INF)
        for t in range(t_max - 1, -1, -1):
            for u in range(u1 - 1, -1, -1):
                a = beta[:, t + 1, u] + blank_lp[:, t, u] if t + 1 < t_max else NEG_INF
                e = beta[:, t, u + 1] + emit_lp[:, t, u] if u + 1 < u1 else NEG_INF
                val = np.logaddexp(a, e)
                val = np.where((t == tl) & (u == ul), blank_lp[:, t, u], val)
                beta[:, t, u] = np.where((t > tl) | (u > ul), NEG_INF, val)
        # Occupancy of the blank step out of (t, u) and the emit step out of (t, u).
        nxt_blank = np.full_like(beta, NEG_INF)
        nxt_blank[:, :-1, :] = beta[:, 1:, :]
        nxt_blank[np.arange(b_sz), tl, ul] = 0.0
        lz = log_z[:, None, None]
        occ_blank = np.exp(alpha + blank_lp + nxt_blank - lz)
        grad = np.zeros((b_sz, t_max, u1, k))
        grad[..., blank] = -occ_blank
        if u1 > 1:
            occ_emit = np.exp(alpha[:, :, :-1] + emit_lp + beta[:, :, 1:] - lz)
            targets = np.where(ctx.targets >= 0, ctx.targets, 0)
            idx = np.broadcast_to(targets[:, None, :, None], (b_sz, t_max, u1 - 1, 1))
            np.put_along_axis(grad[:, :, :-1, :], idx, -occ_emit[..., None], axis=3)
        grad *= g[:, None, None, None]
        return grad, None


def rnnt_loss(logits: Tensor, targets, input_lengths=None, target_lengths=None, blank: Optional[int] = None):
    """Transducer negative log-likelihood -log sum_paths prod p, blank = last index by default.

    ``logits`` [T, U+1, K] gives a scalar; [B, T, U_max+1, K] with padded
    targets [B, U_max] gives per-utterance losses [B].
    """
    single = logits.ndim == 3
    if single:
        targets = np.asarray(targets, dtype=np.int64).reshape(1, -1)
        logits = ops.reshape(logits, (1,) + logits.shape)
    if logits.ndim != 4:
        raise DimensionError(f"rnnt logits must be [B, T, U+1, K], got {logits.shape}")
    b_sz, t_max, u1, k = logits.shape
    blank = k - 1 if blank is None else blank
    targets = np.asarray(targets, dtype=np.int64)
    if t_max == 0:
        raise DimensionError("rnnt loss needs at least one frame")
    if targets.shape != (b_sz, u1 - 1):
        raise DimensionError(f"logits {logits.shape} need targets of shape {(b_sz, u1 - 1)}, got {targets.shape}")
    input_lengths = np.full(b_sz, t_max) if input_lengths is None else np.asarray(input_lengths)
    target_lengths = np.full(b_sz, u1 - 1) if target_lengths is None else np.asarray(target_lengths)
    if (input_lengths < 1).any():
        raise DimensionError("rnnt loss needs at least one frame per utterance")
    losses = _RnntDP.apply(ops.log_softmax(logits), targets=targets, input_lengths=input_lengths,
                           target_lengths=target_lengths, blank=blank)
    return ops.reshape(losses, ()) if single else losses


# ------------------------------------------------------------------ oracles


def _softmax_rows(logits) -> list:
    out = []
    for row in logits:
        m = max(row)
        e = [math.exp(x - m) for x in row]
        s = sum(e)
        out.append([x / s for x in e])
    return out


def enumerate_paths_oracle(logits, targets, kind: str, blank: Optional[int] = None, max_paths: int = 200_000) -> float:
    """-log p(targets) by listing every alignment path; plain Python floats only.

    ``logits`` is a nested list / array: [T][K] for ``kind='ctc'`` and
    [T][U+1][K] for ``kind='rnnt'``.
    """
    logits = np.asarray(logits, dtype=np.float64).tolist()
    targets = [int(y) for y in targets]
    if kind == "ctc":
        t_len, k = len(logits), len(logits[0])
        blank = k - 1 if blank is None else blank
        if k ** t_len > max_paths:
            raise OracleRefusal(f"{k}^{t_len} label sequences exceeds the limit of {max_paths}")
        probs = _softmax_rows(logits)
        total = 0.0
        for path in itertools.product(range(k), repeat=t_len):
            collapsed = [s for i, s in enumerate(path) if s != blank and (i == 0 or s != path[i - 1])]
            if collapsed == targets:
                p = 1.0
                for t, s in enumerate(path):
                    p *= probs[t][s]
                total += p
    elif kind == "rnnt":
        t_len, u1, k = len(logits), len(logits[0]), len(logits[0][0])
        u_len = u1 - 1
        if u_len != len(targets):
            raise DimensionError(f"{u1} predictor positions need {u1 - 1} targets, got {len(targets)}")
        blank = k - 1 if blank is None else blank
        if math.comb(t_len + u_len - 1, u_len) > max_paths:
            raise OracleRefusal("too many lattice paths")
        probs = [_softmax_rows(row) for row in logits]
        total = 0.0
        # A path is T blanks and U emissions; the final step is always a blank.
        for emit_at in itertools.combinations(range(t_len + u_len - 1), u_len):
            emits = set(emit_at)
            t = u = 0
            p = 1.0
            for step in range(t_len + u_len):
                if step in emits:
                    p *= probs[t][u][targets[u]]
                    u += 1
                else:
                    p *= probs[t][u][blank]
                    t += 1
            total += p
    else:
        raise ValueError(f"kind must be 'ctc' or 'rnnt', got {kind!r}")
    return -math.log(total) if total > 0 else math.inf


# ------------------------------------------------------------------ combine


@dataclass
class LossBreakdown:
    joint_ce: float
    lm_ce: float
    ctc: float
    quantity: float
    total: float
    rnnt: Optional[float] = None
    lambda1: float = DEFAULT_LAMBDAS[0]
    lambda2: float = DEFAULT_LAMBDAS[1]
    lambda3: float = DEFAULT_LAMBDAS[2]

    def as_dict(self) -> dict:
        return asdict(self)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def combine(joint, lm, quantity, ctc, lambdas=DEFAULT_LAMBDAS, rnnt=None):
    """L = L_joint + l1 * L_lm + l2 * L_qua + l3 * L_ctc (+ L_rnnt for the baseline).

    Parts may be floats or scalar Tensors. Returns ``(total, breakdown)`` where
    ``total`` keeps the graph when any part is a Tensor.
    """
    l1, l2, l3 = (float(v) for v in lambdas)
    if min(l1, l2, l3) < 0:
        raise ConfigError(f"loss weights must be non-negative, got {lambdas}")
    total = joint + l1 * lm + l2 * quantity + l3 * ctc
    if rnnt is not None:
        total = total + rnnt
    breakdown = LossBreakdown(
        joint_ce=_value(joint), lm_ce=_value(lm), ctc=_value(ctc), quantity=_value(quantity),
        total=_value(total), rnnt=None if rnnt is None else _value(rnnt), lambda1=l1, lambda2=l2, lambda3=l3)
    return total, breakdown
