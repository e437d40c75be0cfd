"""CER scoring, batched evaluation, hypothesis dumps and the predictor re-init probe."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autograd.tensor import Tensor, no_grad
from .data import Utterance, batch as make_batches
from .errors import DataError
from .model import ModelParams, decode_encoded_cift, decode_encoded_rnnt, encode_batch, DecodeResult


def edit_ops(ref: Sequence[int], hyp: Sequence[int]) -> Tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost Levenshtein alignment."""
    n, m = len(ref), len(hyp)
    # cost, subs, ins, dels; ties broken towards fewer substitutions for stable counts
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, a, d = prev[j - 1]
            diag = (c, s, a, d) if ref[i - 1] == hyp[j - 1] else (c + 1, s + 1, a, d)
            c, s, a, d = cur[j - 1]
            ins = (c + 1, s, a + 1, d)
            c, s, a, d = prev[j]
            dele = (c + 1, s, a, d + 1)
            cur.append(min(diag, ins, dele))
        prev = cur
    _, s, a, d = prev[m]
    return s, a, d


@dataclass
class CerReport:
    cer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_tokens: int
    utterances: int
    fire_count_error_le1: Optional[float] = None
    mean_abs_fire_count_error: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def score(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]],
          fire_counts: Optional[Sequence[int]] = None) -> CerReport:
    """Micro-averaged CER: total edits over total reference tokens."""
    if not refs:
        raise DataError("reference corpus is empty")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise DataError("reference corpus has no tokens")
    s = a = d = 0
    for r, h in zip(refs, hyps):
        ds, da, dd = edit_ops(list(r), list(h))
        s, a, d = s + ds, a + da, d + dd
    report = CerReport(cer=(s + a + d) / n_ref, substitutions=s, insertions=a, deletions=d,
                       ref_tokens=n_ref, utterances=len(refs))
    if fire_counts is not None:
        err = np.abs(np.asarray(fire_counts) - np.array([len(r) for r in refs]))
        report.fire_count_error_le1 = float(np.mean(err <= 1))
        report.mean_abs_fire_count_error = float(err.mean())
    return report


def decode_dataset(params: ModelParams, dataset: Sequence[Utterance], batch_size: int = 32,
                   max_symbols_per_frame: int = 3) -> List[DecodeResult]:
    """Decode every utterance (encoder run in padded batches); results in input order."""
    out: List[Optional[DecodeResult]] = [None] * len(dataset)
    order = sorted(range(len(dataset)), key=lambda i: (dataset[i].num_frames, i))
    with no_grad():
        for s in range(0, len(order), batch_size):
            chunk = [dataset[i] for i in order[s: s + batch_size]]
            b = make_batches(chunk, len(chunk), sort_by_length=False)[0]
            H, lengths = encode_batch(b.features, b.feature_lengths, params)
            for j, i in enumerate(order[s: s + batch_size]):
                h = Tensor._wrap(H.data[j, : lengths[j]].copy())
                if params.mode == "cift":
                    out[i] = decode_encoded_cift(h, params)
                else:
                    out[i] = decode_encoded_rnnt(h, params, max_symbols_per_frame)
    return out


def evaluate(params: ModelParams, dataset: Sequence[Utterance], batch_size: int = 32) -> CerReport:
    if not dataset:
        raise DataError("evaluation set is empty")
    results = decode_dataset(params, dataset, batch_size)
    fires = [r.fire_count for r in results] if params.mode == "cift" else None
    return score([u.targets for u in dataset], [r.tokens for r in results], fires)


def hypothesis_records(dataset: Sequence[Utterance], results: Sequence[DecodeResult]) -> List[dict]:
    return [{"id": u.id, "tokens": r.tokens, "boundaries": [int(x) for x in r.boundaries],
             "top1_prob": [float(p.max()) for p in r.step_posteriors]}
            for u, r in zip(dataset, results)]


def write_hypotheses(path, dataset: Sequence[Utterance], results: Sequence[DecodeResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in hypothesis_records(dataset, results):
            fh.write(json.dumps(rec) + "\n")


@dataclass
class ReinitRow:
    mode: str
    seed: int
    cer_before: float
    cer_after: float

    @property
    def delta(self) -> float:
        return self.cer_after - self.cer_before


def reinit_probe(params: ModelParams, dataset: Sequence[Utterance], seeds: Sequence[int],
                 baseline: Optional[CerReport] = None) -> List[ReinitRow]:
    """CER before and after redrawing only the predictor parameters, once per seed."""
    before = baseline if baseline is not None else evaluate(params, dataset)
    rows = []
    for seed in seeds:
        probe = params.copy()
        probe.reinit("predictor.", seed)
        after = evaluate(probe, dataset)
        rows.append(ReinitRow(params.mode, int(seed), before.cer, after.cer))
    return rows
