"""CIF-Transducer model, RNN-T baseline, batched training forwards and greedy decoders.

Parameters live in a flat name -> Tensor mapping (:class:`ModelParams`). The
same encoder, predictor, CTC and LM heads are shared by both modes; ``cift``
adds the CIF weight head, funnel, context blocks, gated bilinear joint and
classifier, while ``rnnt`` adds the additive transducer joint.
"""

from __future__ import annotations

import zlib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import cif as cif_mod
from .autograd import ops
from .autograd.tensor import Tensor, no_grad
from .data import Batch
from .errors import AlignmentError, ConfigError, DegenerateInputError, DimensionError
from .layers import block_param_shapes, layer_norm, mask_rows, sinusoidal_positions, transformer_block
from .losses import DEFAULT_LAMBDAS, LossBreakdown, batch_ce, combine, ctc_loss, rnnt_loss

MODES = ("cift", "rnnt")


@dataclass
class ModelConfig:
    vocab_size: int = 16
    feat_dim: int = 16
    d_model: int = 64
    d_embed: int = 32
    heads: int = 2
    ffn_dim: int = 256
    encoder_layers: int = 2
    context_layers: int = 2
    bilinear_rank: Optional[int] = None  # defaults to d_model // 2
    joint_dim: Optional[int] = None  # RNN-T joint width, defaults to d_model
    cif_kernel: int = 3
    beta: float = cif_mod.BETA
    tail_threshold: float = cif_mod.TAIL_THRESHOLD

    def __post_init__(self):
        if self.bilinear_rank is None:
            self.bilinear_rank = max(1, self.d_model // 2)
        if self.joint_dim is None:
            self.joint_dim = self.d_model

    def validate(self):
        if self.vocab_size < 1 or self.feat_dim < 1:
            raise ConfigError("vocab_size and feat_dim must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.cif_kernel % 2 == 0:
            raise ConfigError("cif_kernel must be odd")

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def bos(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ params


def param_shapes(config: ModelConfig, mode: str = "cift") -> List[Tuple[str, tuple, str]]:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    d, v, de = config.d_model, config.vocab_size, config.d_embed
    shapes = [
        ("encoder.conv1.weight", (3, config.feat_dim, d), "xavier"),
        ("encoder.conv1.bias", (d,), "zeros"),
        ("encoder.conv2.weight", (3, d, d), "xavier"),
        ("encoder.conv2.bias", (d,), "zeros"),
    ]
    for i in range(config.encoder_layers):
        shapes += block_param_shapes(f"encoder.layer{i}", d, config.ffn_dim)
    shapes += [
        ("encoder.ln_out.gamma", (d,), "ones"),
        ("encoder.ln_out.beta", (d,), "zeros"),
        ("predictor.embed", (v + 1, de), "normal"),
        ("predictor.proj.weight", (de, d), "xavier"),
        ("predictor.proj.bias", (d,), "zeros"),
        ("predictor.ln.gamma", (d,), "ones"),
        ("predictor.ln.beta", (d,), "zeros"),
        ("ctc_head.weight", (d, v + 1), "xavier"),
        ("ctc_head.bias", (v + 1,), "zeros"),
        ("lm_head.weight", (d, v), "xavier"),
        ("lm_head.bias", (v,), "zeros"),
    ]
    if mode == "cift":
        k = config.bilinear_rank
        shapes += cif_mod.cif_param_shapes(d, config.cif_kernel)
        shapes += cif_mod.funnel_param_shapes(d)
        for i in range(config.context_layers):
            shapes += block_param_shapes(f"context.layer{i}", d, config.ffn_dim)
        shapes += [
            ("ugbp.w_gc", (d, d), "xavier"),
            ("ugbp.w_gz", (d, d), "xavier"),
            ("ugbp.gate_bias", (d,), "zeros"),
            ("ugbp.w_a", (d, k), "xavier"),
            ("ugbp.w_b", (d, k), "xavier"),
            ("ugbp.w_p", (k, d), "xavier"),
            ("ugbp.w_1", (d, d), "xavier"),
            ("ugbp.w_2", (d, d), "xavier"),
            ("classifier.weight", (d, v), "xavier"),
            ("classifier.bias", (v,), "zeros"),
        ]
    else:
        j = config.joint_dim
        shapes += [
            ("rnnt_joint.w_enc", (d, j), "xavier"),
            ("rnnt_joint.w_pred", (d, j), "xavier"),
            ("rnnt_joint.out.weight", (j, v + 1), "xavier"),
            ("rnnt_joint.out.bias", (v + 1,), "zeros"),
        ]
    return shapes


def _init_array(name: str, shape: tuple, kind: str, seed: int) -> np.ndarray:
    # One stream per parameter name, so any subset can be re-drawn identically.
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "normal":
        return rng.normal(size=shape)
    if kind == "xavier":
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    raise ConfigError(f"unknown init kind {kind!r}")


class ModelParams(Mapping):
    """Ordered name -> Tensor mapping plus the config and mode that shaped it."""

    def __init__(self, config: ModelConfig, mode: str, tensors: Dict[str, Tensor]):
        self.config = config
        self.mode = mode
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r} in {self.mode} model") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.mode,
                           {k: Tensor(t.data, requires_grad=t.requires_grad, name=k) for k, t in self.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def reinit(self, prefix: str, seed: int):
        """Redraw every parameter whose name starts with ``prefix`` as at construction with ``seed``."""
        hit = False
        for name, shape, kind in param_shapes(self.config, self.mode):
            if name.startswith(prefix):
                self._tensors[name].data = _init_array(name, shape, kind, seed)
                hit = True
        if not hit:
            raise ConfigError(f"no parameters match prefix {prefix!r}")


def init_params(config: ModelConfig, mode: str = "cift", seed: int = 0) -> ModelParams:
    config.validate()
    tensors = {name: Tensor(_init_array(name, shape, kind, seed), requires_grad=True, name=name)
               for name, shape, kind in param_shapes(config, mode)}
    return ModelParams(config, mode, tensors)


# ----------------------------------------------------------------- encoder


def subsampled_length(n_frames) -> np.ndarray:
    """Frame count after two stride-2 convolutions: ceil(ceil(T0 / 2) / 2)."""
    n = np.asarray(n_frames, dtype=np.int64)
    return (((n + 1) // 2) + 1) // 2


def encode_batch(features: np.ndarray, lengths: Sequence[int], params: ModelParams) -> Tuple[Tensor, np.ndarray]:
    """features [B, T0, d_f] -> (H [B, T, d], frame counts [B]); padded frames are zero."""
    cfg = params.config
    x = features if isinstance(features, Tensor) else Tensor._wrap(np.asarray(features, dtype=np.float64))
    if x.ndim != 3 or x.shape[2] != cfg.feat_dim:
        raise DimensionError(f"features must be [B, T0, {cfg.feat_dim}], got {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    out_lengths = subsampled_length(lengths)
    if (out_lengths == 0).any():
        raise DegenerateInputError("an utterance has zero frames after subsampling")
    mask0 = np.arange(x.shape[1])[None, :] < lengths[:, None]
    x = mask_rows(x, mask0)
    # Each stride-2 stage masks its outputs so padding never leaks into valid frames.
    len1 = (lengths + 1) // 2
    h = ops.relu(ops.conv1d(x, params["encoder.conv1.weight"], stride=2) + params["encoder.conv1.bias"])
    h = mask_rows(h, np.arange(h.shape[1])[None, :] < len1[:, None])
    h = ops.relu(ops.conv1d(h, params["encoder.conv2.weight"], stride=2) + params["encoder.conv2.bias"])
    mask = np.arange(h.shape[1])[None, :] < out_lengths[:, None]
    h = mask_rows(h, mask)
    h = h + Tensor._wrap(sinusoidal_positions(h.shape[1], cfg.d_model))
    for i in range(cfg.encoder_layers):
        h = transformer_block(h, params, f"encoder.layer{i}", cfg.heads, mask)
    h = mask_rows(layer_norm(h, params, "encoder.ln_out"), mask)
    return h, out_lengths


def encode(features, params: ModelParams) -> Tensor:
    """One utterance [T0, d_f] -> H [T, d] with T = ceil(ceil(T0 / 2) / 2)."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError(f"encode expects [T0, d_f], got {feats.shape}")
    if feats.shape[0] == 0:
        raise DegenerateInputError("utterance has no frames")
    h, _ = encode_batch(feats[None], [feats.shape[0]], params)
    return ops.reshape(h, h.shape[1:])


# --------------------------------------------------------------- predictor


def predict(tokens, params: ModelParams) -> Tensor:
    """Stateless predictor: ids of any shape (BOS = vocab_size) -> [..., d]."""
    e = ops.embedding(params["predictor.embed"], np.asarray(tokens, dtype=np.int64))
    z = ops.linear(e, params["predictor.proj.weight"], params["predictor.proj.bias"])
    return layer_norm(z, params, "predictor.ln")


def lm_logits(Z: Tensor, params: ModelParams) -> Tensor:
    return ops.linear(Z, params["lm_head.weight"], params["lm_head.bias"])


def ctc_logits(H: Tensor, params: ModelParams) -> Tensor:
    return ops.linear(H, params["ctc_head.weight"], params["ctc_head.bias"])


def shift_right(targets: np.ndarray, target_lengths: Sequence[int], bos: int) -> np.ndarray:
    """[B, U] padded targets -> predictor inputs [BOS, y_1 .. y_{U-1}] (padding -> BOS)."""
    targets = np.asarray(targets, dtype=np.int64)
    out = np.full(targets.shape, bos, dtype=np.int64)
    out[:, 1:] = targets[:, :-1]
    valid = np.arange(targets.shape[1])[None, :] < np.asarray(target_lengths)[:, None]
    return np.where(valid, out, bos)


# ------------------------------------------------------------------- joints


def ugbp_join(c: Tensor, z: Tensor, params: ModelParams) -> Tensor:
    """Gated bilinear fusion of acoustic cells c and predictor states z, both [..., U, d]."""
    if c.shape != z.shape:
        raise AlignmentError(f"acoustic cells {c.shape} and predictor states {z.shape} must align one to one")
    g = ops.sigmoid(ops.matmul(c, params["ugbp.w_gc"]) + ops.matmul(z, params["ugbp.w_gz"])
                    + params["ugbp.gate_bias"])
    h_gate = g * z
    h_bi = ops.matmul(ops.tanh(ops.matmul(c, params["ugbp.w_a"])) * ops.tanh(ops.matmul(h_gate, params["ugbp.w_b"])),
                      params["ugbp.w_p"])
    return ops.tanh(h_bi + ops.matmul(c, params["ugbp.w_1"]) + ops.matmul(z, params["ugbp.w_2"]))


def cift_logits(c: Tensor, z: Tensor, params: ModelParams) -> Tensor:
    return ops.linear(ugbp_join(c, z, params), params["classifier.weight"], params["classifier.bias"])


def rnnt_join_baseline(H: Tensor, Z: Tensor, params: ModelParams) -> Tensor:
    """Additive transducer joint over every (t, u) pair: [.., T, d] x [.., U+1, d] -> [.., T, U+1, V+1]."""
    if H.ndim != Z.ndim or H.shape[:-2] != Z.shape[:-2]:
        raise DimensionError(f"encoder {H.shape} and predictor {Z.shape} disagree on batch extents")
    he = ops.matmul(H, params["rnnt_joint.w_enc"])
    zp = ops.matmul(Z, params["rnnt_joint.w_pred"])
    t, u1, j = he.shape[-2], zp.shape[-2], he.shape[-1]
    lead = he.shape[:-2]
    full = lead + (t, u1, j)
    s = (ops.broadcast_to(ops.reshape(he, lead + (t, 1, j)), full)
         + ops.broadcast_to(ops.reshape(zp, lead + (1, u1, j)), full))
    return ops.linear(ops.tanh(s), params["rnnt_joint.out.weight"], params["rnnt_joint.out.bias"])


# --------------------------------------------------------- training forward


@dataclass
class ForwardResult:
    total: Tensor
    breakdown: LossBreakdown
    per_utterance: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped_degenerate: List[int] = field(default_factory=list)
    skipped_ctc: List[int] = field(default_factory=list)
    fire_counts: Optional[np.ndarray] = None


def _masked_mean(values: Tensor, include: np.ndarray) -> Tensor:
    n = int(include.sum())
    if n == 0:
        return ops.sum(values) * 0.0
    return ops.sum(values * Tensor._wrap(include.astype(np.float64))) * (1.0 / n)


def forward_loss(params: ModelParams, batch: Batch, lambdas=DEFAULT_LAMBDAS) -> ForwardResult:
    """Total training loss of ``batch`` for the model's mode (means over utterances)."""
    if params.mode == "cift":
        return _cift_forward(params, batch, lambdas)
    return _rnnt_forward(params, batch, lambdas)


def _shared(params: ModelParams, batch: Batch):
    H, t_lens = encode_batch(batch.features, batch.feature_lengths, params)
    targets = np.where(batch.target_mask, batch.targets, 0)
    ctc, infeasible = ctc_loss(ctc_logits(H, params), targets, t_lens, batch.target_lengths,
                               blank=params.config.blank, skip_infeasible=True)
    return H, t_lens, targets, ctc, infeasible


def _cift_forward(params: ModelParams, batch: Batch, lambdas) -> ForwardResult:
    cfg = params.config
    H, t_lens, targets, ctc, infeasible = _shared(params, batch)
    frame_mask = np.arange(H.shape[1])[None, :] < t_lens[:, None]
    S = batch.target_lengths.astype(np.int64)
    w = cif_mod.predict_weights(H, params, frame_mask)
    qua = cif_mod.quantity_loss(w, S)
    degenerate = (w.alpha.data.sum(axis=1) == 0) & (S > 0)
    s_eff = np.where(degenerate, 0, S)
    w = cif_mod.scale_weights(w, s_eff)
    u_max = targets.shape[1]
    C, plans = cif_mod.fire_batch(H, w.alpha_scaled, t_lens, "train", s_eff, cfg.beta, cfg.tail_threshold,
                                  n_cells=u_max)
    cell_mask = np.arange(u_max)[None, :] < s_eff[:, None]
    C = cif_mod.funnel_cif(C, H, params, frame_mask)
    C = cif_mod.context_blocks(C, params, cfg.context_layers, cfg.heads, cell_mask)
    Z = predict(shift_right(targets, S, cfg.bos), params)
    lm = batch_ce(lm_logits(Z, params), targets, S)
    joint = batch_ce(cift_logits(C, Z, params), targets, S)
    keep = ~degenerate
    ctc_keep = keep.copy()
    ctc_keep[infeasible] = False
    total, breakdown = combine(_masked_mean(joint, keep), _masked_mean(lm, keep), _masked_mean(qua, keep),
                               _masked_mean(ctc, ctc_keep), lambdas)
    return ForwardResult(
        total=total, breakdown=breakdown,
        per_utterance={"joint_ce": joint.data.copy(), "lm_ce": lm.data.copy(), "quantity": qua.data.copy(),
                       "ctc": ctc.data.copy()},
        skipped_degenerate=np.flatnonzero(degenerate).tolist(), skipped_ctc=list(infeasible),
        fire_counts=np.array([p.fire_count for p in plans]),
    )


def _rnnt_forward(params: ModelParams, batch: Batch, lambdas) -> ForwardResult:
    cfg = params.config
    H, t_lens, targets, ctc, infeasible = _shared(params, batch)
    S = batch.target_lengths.astype(np.int64)
    b, u_max = targets.shape
    pred_in = np.full((b, u_max + 1), cfg.bos, dtype=np.int64)
    pred_in[:, 1:] = np.where(batch.target_mask, targets, cfg.bos)
    Z = predict(pred_in, params)
    lm = batch_ce(lm_logits(ops.getitem(Z, (slice(None), slice(0, u_max))), params), targets, S)
    rn = rnnt_loss(rnnt_join_baseline(H, Z, params), targets, t_lens, S, blank=cfg.blank)
    keep = np.ones(b, dtype=bool)
    ctc_keep = keep.copy()
    ctc_keep[infeasible] = False
    zero = Tensor(0.0)
    total, breakdown = combine(zero, _masked_mean(lm, keep), zero, _masked_mean(ctc, ctc_keep), lambdas,
                               rnnt=_masked_mean(rn, keep))
    return ForwardResult(
        total=total, breakdown=breakdown,
        per_utterance={"rnnt": rn.data.copy(), "lm_ce": lm.data.copy(), "ctc": ctc.data.copy()},
        skipped_ctc=list(infeasible),
    )


# ---------------------------------------------------------------- decoding


@dataclass
class DecodeResult:
    tokens: List[int]
    step_posteriors: List[np.ndarray]  # one distribution per emitted token
    boundaries: List[int]  # encoder frame at which each token was emitted
    fire_count: Optional[int] = None


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_encoded_cift(H: Tensor, params: ModelParams, max_len: Optional[int] = None) -> DecodeResult:
    """Greedy CIF-T decoding from encoder output H [T, d]: one token per fired cell."""
    cfg = params.config
    with no_grad():
        w = cif_mod.predict_weights(H, params)
        out = cif_mod.integrate_and_fire(H, w, cfg.beta, "infer", tail_threshold=cfg.tail_threshold)
        C = out.fired
        if max_len is not None and C.shape[0] > max_len:
            C = ops.getitem(C, slice(0, max_len))
        n = C.shape[0]
        if n == 0:
            return DecodeResult([], [], [], fire_count=out.fire_count)
        C = cif_mod.funnel_cif(C, H, params)
        C = cif_mod.context_blocks(C, params, cfg.context_layers, cfg.heads)
        tokens, posts = [], []
        for u in range(n):
            z = ops.getitem(predict([cfg.bos] + tokens, params), slice(u, u + 1))
            p = _softmax_np(cift_logits(ops.getitem(C, slice(u, u + 1)), z, params).data[0])
            tokens.append(int(np.argmax(p)))
            posts.append(p)
    return DecodeResult(tokens, posts, list(out.fire_frames[:n]), fire_count=out.fire_count)


def greedy_decode_cift(features, params: ModelParams, max_len: Optional[int] = None) -> DecodeResult:
    with no_grad():
        H = encode(features, params)
    return decode_encoded_cift(H, params, max_len)


def decode_encoded_rnnt(H: Tensor, params: ModelParams, max_symbols_per_frame: int = 3) -> DecodeResult:
    """Greedy transducer decoding: at each frame emit argmax labels until blank (capped per frame)."""
    cfg = params.config
    tokens, posts, bounds = [], [], []
    with no_grad():
        he = ops.matmul(H, params["rnnt_joint.w_enc"]).data
        w_out, b_out = params["rnnt_joint.out.weight"].data, params["rnnt_joint.out.bias"].data
        zp = ops.matmul(predict([cfg.bos], params), params["rnnt_joint.w_pred"]).data[0]
        for t in range(he.shape[0]):
            for _ in range(max_symbols_per_frame):
                p = _softmax_np(np.tanh(he[t] + zp) @ w_out + b_out)
                k = int(np.argmax(p))
                if k == cfg.blank:
                    break
                tokens.append(k)
                posts.append(p)
                bounds.append(t)
                z = predict([cfg.bos] + tokens, params)
                zp = ops.matmul(ops.getitem(z, slice(len(tokens), len(tokens) + 1)),
                                params["rnnt_joint.w_pred"]).data[0]
    return DecodeResult(tokens, posts, bounds)


def greedy_decode_rnnt(features, params: ModelParams, max_symbols_per_frame: int = 3) -> DecodeResult:
    with no_grad():
        H = encode(features, params)
    return decode_encoded_rnnt(H, params, max_symbols_per_frame)


def greedy_decode(features, params: ModelParams, **kwargs) -> DecodeResult:
    if params.mode == "cift":
        return greedy_decode_cift(features, params, **kwargs)
    return greedy_decode_rnnt(features, params, **kwargs)
