"""Synthetic monotonic-alignment corpus, JSONL IO, and padded batching.

Each target token owns a prototype vector; an utterance repeats the
prototype of every token for a random dwell time and adds isotropic noise,
so the true token boundaries (``spans``) are known exactly.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ParseError, SchemaError

PAD_TARGET = -1


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T0, d_f]
    targets: List[int]
    spans: Optional[List[Tuple[int, int]]] = None

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id == other.id and list(self.targets) == list(other.targets)
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features))
                and (self.spans or None) == (other.spans or None))


@dataclass
class SynthConfig:
    vocab_size: int = 16
    feat_dim: int = 16
    dwell: Tuple[int, int] = (8, 16)
    length: Tuple[int, int] = (2, 8)
    noise: float = 0.3
    allow_repeats: bool = False
    task_seed: int = 0  # fixes the prototypes, shared by train and test splits

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        lo, hi = self.dwell
        if not 1 <= lo <= hi <= 16:
            raise ConfigError(f"dwell range must lie in [1, 16], got {self.dwell}")
        if not 0 <= self.length[0] <= self.length[1]:
            raise ConfigError(f"bad target length range {self.length}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


def prototypes(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([config.task_seed, 0x5EED])
    return rng.normal(size=(config.vocab_size, config.feat_dim))


def synthesize(targets: Sequence[int], dwells: Sequence[int], protos: np.ndarray, noise: float = 0.0,
               rng: Optional[np.random.Generator] = None):
    """Render features and spans for given tokens and dwell times."""
    rows, spans, start = [], [], 0
    for tok, n in zip(targets, dwells):
        rows.append(np.repeat(protos[tok][None, :], n, axis=0))
        spans.append((start, start + n))
        start += n
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, protos.shape[1]))
    if noise > 0:
        feats = feats + noise * rng.normal(size=feats.shape)
    return feats, spans


def generate(config: SynthConfig, count: int, seed: int, prefix: str = "utt") -> List[Utterance]:
    """Draw ``count`` utterances; identical (config, seed) gives bit-identical corpora."""
    config.validate()
    protos = prototypes(config)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n = int(rng.integers(config.length[0], config.length[1] + 1))
        targets: List[int] = []
        for _ in range(n):
            tok = int(rng.integers(config.vocab_size))
            while not config.allow_repeats and targets and tok == targets[-1]:
                tok = int(rng.integers(config.vocab_size))
            targets.append(tok)
        dwells = rng.integers(config.dwell[0], config.dwell[1] + 1, size=n).tolist()
        feats, spans = synthesize(targets, dwells, protos, config.noise, rng)
        out.append(Utterance(id=f"{prefix}{i:06d}", features=feats, targets=targets, spans=spans))
    return out


# ---------------------------------------------------------------------- IO


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def utterance_to_record(utt: Utterance) -> dict:
    rec = {"id": utt.id, "features": utt.features.tolist(), "targets": [int(t) for t in utt.targets]}
    if utt.spans is not None:
        rec["spans"] = [[int(a), int(b)] for a, b in utt.spans]
    return rec


def write_jsonl(path, dataset: Iterable[Utterance]) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly.
    with _open(path, "w") as fh:
        for utt in dataset:
            fh.write(json.dumps(utterance_to_record(utt), separators=(",", ":")))
            fh.write("\n")


def record_to_utterance(rec: dict, line: Optional[int] = None) -> Utterance:
    for key in ("id", "features", "targets"):
        if key not in rec:
            raise SchemaError(f"line {line}: missing field {key!r}")
    feats = rec["features"]
    if not isinstance(feats, list) or any(not isinstance(r, list) for r in feats):
        raise SchemaError(f"line {line}: features must be a list of rows")
    widths = {len(r) for r in feats}
    if len(widths) > 1:
        raise SchemaError(f"line {line}: feature rows have inconsistent widths {sorted(widths)}")
    try:
        arr = np.array(feats, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line}: non-numeric features ({exc})") from None
    if arr.ndim != 2:
        arr = arr.reshape(len(feats), 0)
    targets = rec["targets"]
    if not isinstance(targets, list) or any(isinstance(t, bool) or not isinstance(t, int) or t < 0 for t in targets):
        raise SchemaError(f"line {line}: targets must be non-negative integers")
    spans = rec.get("spans")
    if spans is not None:
        if any(not isinstance(s, list) or len(s) != 2 for s in spans) or len(spans) != len(targets):
            raise SchemaError(f"line {line}: spans must be one [start, end] pair per target")
        spans = [(int(a), int(b)) for a, b in spans]
    return Utterance(id=str(rec["id"]), features=arr, targets=list(targets), spans=spans)


def read_jsonl(path) -> List[Utterance]:
    out = []
    feat_dim = None
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not a JSON object", line=lineno)
            utt = record_to_utterance(rec, lineno)
            if utt.num_frames:
                if feat_dim is None:
                    feat_dim = utt.features.shape[1]
                elif utt.features.shape[1] != feat_dim:
                    raise SchemaError(f"line {lineno}: feature width {utt.features.shape[1]} != {feat_dim}")
            out.append(utt)
    if feat_dim is not None:
        # frame-less records carry no width of their own
        for utt in out:
            if not utt.num_frames:
                utt.features = np.zeros((0, feat_dim))
    return out


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    ids: List[str]
    features: np.ndarray  # [B, T0_max, d_f], zero padded
    feature_lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B, U_max], PAD_TARGET padded
    target_lengths: np.ndarray  # [B]
    spans: List[Optional[List[Tuple[int, int]]]] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @property
    def frame_mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.feature_lengths[:, None]

    @property
    def target_mask(self) -> np.ndarray:
        return np.arange(self.targets.shape[1])[None, :] < self.target_lengths[:, None]

    def target_list(self, i: int) -> List[int]:
        return self.targets[i, : self.target_lengths[i]].tolist()


def collate(utts: Sequence[Utterance], feat_dim: Optional[int] = None) -> Batch:
    if feat_dim is None:
        feat_dim = next((u.features.shape[1] for u in utts if u.num_frames), 0)
    t_max = max((u.num_frames for u in utts), default=0)
    u_max = max((len(u.targets) for u in utts), default=0)
    feats = np.zeros((len(utts), t_max, feat_dim))
    targets = np.full((len(utts), u_max), PAD_TARGET, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.num_frames] = u.features
        targets[i, : len(u.targets)] = u.targets
    return Batch(
        ids=[u.id for u in utts],
        features=feats,
        feature_lengths=np.array([u.num_frames for u in utts], dtype=np.int64),
        targets=targets,
        target_lengths=np.array([len(u.targets) for u in utts], dtype=np.int64),
        spans=[u.spans for u in utts],
    )


def batch(dataset: Sequence[Utterance], batch_size: int, sort_by_length: bool = True) -> List[Batch]:
    """Group utterances into padded batches (sorted by frame count when asked)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(dataset)))
    if sort_by_length:
        order.sort(key=lambda i: (dataset[i].num_frames, i))
    feat_dim = next((u.features.shape[1] for u in dataset if u.num_frames), 0)
    return [collate([dataset[i] for i in order[s: s + batch_size]], feat_dim)
            for s in range(0, len(order), batch_size)]
