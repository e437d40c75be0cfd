"""End-to-end gradient check of the full training loss over every parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .autograd.gradcheck import finite_diff_check
from .data import SynthConfig, Utterance, collate, prototypes, synthesize
from .model import ModelConfig, forward_loss, init_params

TINY = dict(vocab_size=8, feat_dim=4, d_model=8, d_embed=4, heads=2, ffn_dim=16, encoder_layers=2, context_layers=2)


@dataclass
class GroupResult:
    name: str
    max_rel_err: float
    coords: int


@dataclass
class GradcheckResult:
    mode: str
    tolerance: float
    groups: List[GroupResult] = field(default_factory=list)
    per_tensor: Dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.groups) and self.max_rel_err <= self.tolerance


def tiny_problem(seed: int = 0):
    """A padded batch over V = 8: one utterance with T0 = 16, U = 3 and a shorter one with U = 1."""
    synth = SynthConfig(vocab_size=TINY["vocab_size"], feat_dim=TINY["feat_dim"], task_seed=seed)
    protos = prototypes(synth)
    rng = np.random.default_rng(seed)
    utts = []
    for i, (targets, dwells) in enumerate((([1, 5, 2], [5, 5, 6]), ([3], [7]))):
        feats, spans = synthesize(targets, dwells, protos, 0.3, rng)
        utts.append(Utterance(f"tiny{i}", feats, targets, spans))
    return ModelConfig(**TINY), collate(utts)


def run_gradcheck(mode: str, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-3,
                  max_coords: Optional[int] = None) -> GradcheckResult:
    """Central differences of the total loss against backward() for each parameter tensor."""
    config, b = tiny_problem(seed)
    params = init_params(config, mode, seed)

    def loss():
        return forward_loss(params, b).total

    report = finite_diff_check(loss, dict(params.items()), step=step, tolerance=tolerance, max_coords=max_coords,
                               seed=seed)
    result = GradcheckResult(mode=mode, tolerance=tolerance, per_tensor=report.per_tensor)
    groups: Dict[str, List[str]] = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(name)
    for group, names in groups.items():
        coords = sum(params[n].size if max_coords is None else min(params[n].size, max_coords) for n in names)
        result.groups.append(GroupResult(group, max(report.per_tensor[n] for n in names), coords))
    return result
