"""Forward graph of the two-stage retriever.

Stage I: a small transformer text encoder with a feed-forward adapter, and a
video temporal encoder (input projection, pre-norm transformer blocks each
followed by a stride-2 temporal convolution, mean pooling). Both sides emit
unit-norm embeddings so cosine similarity is a plain dot product.

Stage II: a fusion MLP combining the initial and refined query embeddings
(concatenation, sum and elementwise product slots) and a lightweight
cross-encoder scorer over fused-query/video pairs.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from datr import autodiff as ad
from datr.autodiff import Tensor

UNK_ID = 0

TAU_MIN = 1e-3
TAU_MAX = 100.0

FUSION_MODES = ("full", "add", "mul")


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


@dataclass
class ModelConfig:
    """Hyperparameters of the retrieval model.

    ``embed_dim`` defaults to the desk-scale 64 (512 reproduces the
    full-scale setting). The video branch keeps 6 blocks over 32 uniformly
    sampled frames so the temporal length halves per block down to 1.
    """

    embed_dim: int = 64
    video_layers: int = 6
    heads: int = 8
    n_frames: int = 32
    frame_feature_dim: int = 64
    text_layers: int = 2
    vocab_size: int = 0
    max_tokens: int = 64
    tau_init: float = 0.07
    dtype: str = "float64"

    def validate(self) -> None:
        if self.embed_dim < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be positive and divisible by "
                f"heads {self.heads}")
        for name in ("video_layers", "heads", "n_frames", "frame_feature_dim",
                     "text_layers", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1 (UNK row at minimum)")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "video_layers": self.video_layers,
            "heads": self.heads,
            "n_frames": self.n_frames,
            "frame_feature_dim": self.frame_feature_dim,
            "text_layers": self.text_layers,
            "vocab_size": self.vocab_size,
            "max_tokens": self.max_tokens,
            "tau_init": self.tau_init,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            embed_dim=int(d["embed_dim"]),
            video_layers=int(d["video_layers"]),
            heads=int(d["heads"]),
            n_frames=int(d["n_frames"]),
            frame_feature_dim=int(d["frame_feature_dim"]),
            text_layers=int(d["text_layers"]),
            vocab_size=int(d["vocab_size"]),
            max_tokens=int(d["max_tokens"]),
            tau_init=float(d["tau_init"]),
            dtype=str(d["dtype"]),
        )
        cfg.validate()
        return cfg


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


class Vocabulary:
    """Word-to-id map; id 0 is reserved for unknown words."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i + 1 for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words) + 1

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(_words(text))
        return cls(sorted(seen))

    def to_json(self) -> str:
        return json.dumps(self.words, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(json.loads(payload))


def _words(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def tokenize(text: str, vocab: Vocabulary, max_tokens: int) -> list[int]:
    """Lowercase, strip punctuation, split, map (OOV -> UNK), truncate.

    Total function: empty or all-punctuation input yields a single UNK.
    """
    ids = [vocab.index.get(w, UNK_ID) for w in _words(text)]
    if not ids:
        return [UNK_ID]
    return ids[:max_tokens]


@dataclass
class TransformerBlockParams:
    attn_q: Tensor
    attn_q_bias: Tensor
    attn_k: Tensor
    attn_k_bias: Tensor
    attn_v: Tensor
    attn_v_bias: Tensor
    attn_out: Tensor
    attn_out_bias: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class TextEncoderParams:
    token_embeddings: Tensor
    position_embeddings: Tensor
    blocks: list[TransformerBlockParams]
    adapter_w1: Tensor
    adapter_b1: Tensor
    adapter_w2: Tensor
    adapter_b2: Tensor


@dataclass
class VideoEncoderParams:
    input_projection: Tensor
    blocks: list[TransformerBlockParams]
    conv_kernels: list[Tensor]  # one per block: [3, d, d], stride 2, pad 1


@dataclass
class FusionRerankerParams:
    fusion_w1: Tensor  # 4d -> 2d
    fusion_b1: Tensor
    fusion_w2: Tensor  # 2d -> d
    fusion_b2: Tensor
    cross_w: Tensor    # 3d -> d
    cross_b: Tensor
    score_w: Tensor    # d
    score_b: Tensor    # scalar


@dataclass
class ModelParams:
    text: TextEncoderParams
    video: VideoEncoderParams
    fusion: FusionRerankerParams
    log_tau: Tensor


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _zeros(shape, dtype) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def _init_block(rng, d: int, dtype) -> TransformerBlockParams:
    hidden = 4 * d
    return TransformerBlockParams(
        attn_q=Tensor(_xavier(rng, d, d, (d, d), dtype), requires_grad=True),
        attn_q_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        attn_k=Tensor(_xavier(rng, d, d, (d, d), dtype), requires_grad=True),
        attn_k_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        attn_v=Tensor(_xavier(rng, d, d, (d, d), dtype), requires_grad=True),
        attn_v_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        attn_out=Tensor(_xavier(rng, d, d, (d, d), dtype), requires_grad=True),
        attn_out_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        norm1_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        norm1_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        norm2_gain=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        norm2_bias=Tensor(_zeros(d, dtype), requires_grad=True),
        ffn_w1=Tensor(_xavier(rng, d, hidden, (d, hidden), dtype), requires_grad=True),
        ffn_b1=Tensor(_zeros(hidden, dtype), requires_grad=True),
        ffn_w2=Tensor(_xavier(rng, hidden, d, (hidden, d), dtype), requires_grad=True),
        ffn_b2=Tensor(_zeros(d, dtype), requires_grad=True),
    )


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization: Xavier-uniform weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    dtype = config.np_dtype

    text = TextEncoderParams(
        token_embeddings=Tensor(
            _xavier(rng, config.vocab_size, d, (config.vocab_size, d), dtype),
            requires_grad=True),
        position_embeddings=Tensor(
            _xavier(rng, config.max_tokens, d, (config.max_tokens, d), dtype),
            requires_grad=True),
        blocks=[_init_block(rng, d, dtype) for _ in range(config.text_layers)],
        adapter_w1=Tensor(_xavier(rng, d, 2 * d, (d, 2 * d), dtype), requires_grad=True),
        adapter_b1=Tensor(_zeros(2 * d, dtype), requires_grad=True),
        adapter_w2=Tensor(_xavier(rng, 2 * d, d, (2 * d, d), dtype), requires_grad=True),
        adapter_b2=Tensor(_zeros(d, dtype), requires_grad=True),
    )
    video = VideoEncoderParams(
        input_projection=Tensor(
            _xavier(rng, config.frame_feature_dim, d, (config.frame_feature_dim, d), dtype),
            requires_grad=True),
        blocks=[_init_block(rng, d, dtype) for _ in range(config.video_layers)],
        conv_kernels=[
            Tensor(_xavier(rng, 3 * d, 3 * d, (3, d, d), dtype), requires_grad=True)
            for _ in range(config.video_layers)
        ],
    )
    fusion = FusionRerankerParams(
        fusion_w1=Tensor(_xavier(rng, 4 * d, 2 * d, (4 * d, 2 * d), dtype), requires_grad=True),
        fusion_b1=Tensor(_zeros(2 * d, dtype), requires_grad=True),
        fusion_w2=Tensor(_xavier(rng, 2 * d, d, (2 * d, d), dtype), requires_grad=True),
        fusion_b2=Tensor(_zeros(d, dtype), requires_grad=True),
        cross_w=Tensor(_xavier(rng, 3 * d, d, (3 * d, d), dtype), requires_grad=True),
        cross_b=Tensor(_zeros(d, dtype), requires_grad=True),
        score_w=Tensor(_xavier(rng, d, 1, (d,), dtype), requires_grad=True),
        score_b=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
    )
    log_tau = Tensor(np.asarray(math.log(config.tau_init), dtype=dtype), requires_grad=True)
    return ModelParams(text=text, video=video, fusion=fusion, log_tau=log_tau)


def _block_entries(prefix: str, block: TransformerBlockParams) -> list[tuple[str, Tensor]]:
    return [
        (f"{prefix}.attn_q", block.attn_q),
        (f"{prefix}.attn_q_bias", block.attn_q_bias),
        (f"{prefix}.attn_k", block.attn_k),
        (f"{prefix}.attn_k_bias", block.attn_k_bias),
        (f"{prefix}.attn_v", block.attn_v),
        (f"{prefix}.attn_v_bias", block.attn_v_bias),
        (f"{prefix}.attn_out", block.attn_out),
        (f"{prefix}.attn_out_bias", block.attn_out_bias),
        (f"{prefix}.norm1_gain", block.norm1_gain),
        (f"{prefix}.norm1_bias", block.norm1_bias),
        (f"{prefix}.norm2_gain", block.norm2_gain),
        (f"{prefix}.norm2_bias", block.norm2_bias),
        (f"{prefix}.ffn_w1", block.ffn_w1),
        (f"{prefix}.ffn_b1", block.ffn_b1),
        (f"{prefix}.ffn_w2", block.ffn_w2),
        (f"{prefix}.ffn_b2", block.ffn_b2),
    ]


def named_parameters(params: ModelParams) -> dict[str, Tensor]:
    """All learnable tensors keyed by a stable dotted name."""
    entries: list[tuple[str, Tensor]] = [
        ("text.token_embeddings", params.text.token_embeddings),
        ("text.position_embeddings", params.text.position_embeddings),
    ]
    for i, block in enumerate(params.text.blocks):
        entries.extend(_block_entries(f"text.block{i}", block))
    entries.extend([
        ("text.adapter_w1", params.text.adapter_w1),
        ("text.adapter_b1", params.text.adapter_b1),
        ("text.adapter_w2", params.text.adapter_w2),
        ("text.adapter_b2", params.text.adapter_b2),
        ("video.input_projection", params.video.input_projection),
    ])
    for i, block in enumerate(params.video.blocks):
        entries.extend(_block_entries(f"video.block{i}", block))
    for i, kern in enumerate(params.video.conv_kernels):
        entries.append((f"video.conv{i}", kern))
    entries.extend([
        ("fusion.fusion_w1", params.fusion.fusion_w1),
        ("fusion.fusion_b1", params.fusion.fusion_b1),
        ("fusion.fusion_w2", params.fusion.fusion_w2),
        ("fusion.fusion_b2", params.fusion.fusion_b2),
        ("fusion.cross_w", params.fusion.cross_w),
        ("fusion.cross_b", params.fusion.cross_b),
        ("fusion.score_w", params.fusion.score_w),
        ("fusion.score_b", params.fusion.score_b),
        ("log_tau", params.log_tau),
    ])
    return dict(entries)


def stage1_parameter_names(params: ModelParams) -> list[str]:
    return [n for n in named_parameters(params)
            if n.startswith(("text.", "video.")) or n == "log_tau"]


def stage2_parameter_names(params: ModelParams) -> list[str]:
    return [n for n in named_parameters(params) if n.startswith("fusion.")]


def _multi_head_attention(x: Tensor, block: TransformerBlockParams, heads: int) -> Tensor:
    d = x.shape[1]
    head_dim = d // heads
    scale = 1.0 / math.sqrt(head_dim)
    q = ad.add(ad.matmul(x, block.attn_q), block.attn_q_bias)
    k = ad.add(ad.matmul(x, block.attn_k), block.attn_k_bias)
    v = ad.add(ad.matmul(x, block.attn_v), block.attn_v_bias)
    outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_last_dim(q, lo, hi)
        kh = ad.slice_last_dim(k, lo, hi)
        vh = ad.slice_last_dim(v, lo, hi)
        logits = ad.mul(ad.matmul(qh, ad.transpose(kh)), ad.Tensor(scale))
        outputs.append(ad.matmul(ad.softmax_rows(logits), vh))
    merged = outputs[0] if heads == 1 else ad.concat_last_dim(outputs)
    return ad.add(ad.matmul(merged, block.attn_out), block.attn_out_bias)


def _feed_forward(x: Tensor, block: TransformerBlockParams) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, block.ffn_w1), block.ffn_b1))
    return ad.add(ad.matmul(hidden, block.ffn_w2), block.ffn_b2)


def transformer_block(x: Tensor, block: TransformerBlockParams, heads: int) -> Tensor:
    """Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x))."""
    attended = _multi_head_attention(
        ad.layer_norm_rows(x, block.norm1_gain, block.norm1_bias), block, heads)
    x = ad.add(x, attended)
    transformed = _feed_forward(
        ad.layer_norm_rows(x, block.norm2_gain, block.norm2_bias), block)
    return ad.add(x, transformed)


class Model:
    """Config + vocabulary + parameters, with the forward operations."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: ModelParams):
        if config.vocab_size != vocab.size:
            raise ConfigError(
                f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}")
        self.config = config
        self.vocab = vocab
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocabulary, seed: int) -> "Model":
        config.vocab_size = vocab.size
        return cls(config, vocab, init_params(config, seed))

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.vocab, self.config.max_tokens)

    def encode_text(self, query: str) -> Tensor:
        """Embed a query string into the shared space; unit-norm output."""
        p = self.params.text
        ids = self.tokenize(query)
        tokens = ad.embedding_lookup(p.token_embeddings, ids)
        positions = ad.embedding_lookup(p.position_embeddings, list(range(len(ids))))
        x = ad.add(tokens, positions)
        for block in p.blocks:
            x = transformer_block(x, block, self.config.heads)
        pooled = ad.mean_over_axis(x, 0)
        hidden = ad.relu(ad.add(ad.matmul(pooled, p.adapter_w1), p.adapter_b1))
        adapted = ad.add(ad.matmul(hidden, p.adapter_w2), p.adapter_b2)
        return ad.l2_normalize(adapted)

    def encode_video(self, frames: np.ndarray) -> Tensor:
        """Embed a [n_frames, frame_feature_dim] feature matrix; unit-norm output.

        Temporal length halves after every block (stride-2 width-3 conv with
        one zero pad), so 32 frames collapse to a single token after block 5
        and stay there.
        """
        cfg = self.config
        arr = np.asarray(frames)
        if arr.shape != (cfg.n_frames, cfg.frame_feature_dim):
            raise ad.ShapeError(
                f"frame features must be [{cfg.n_frames}, {cfg.frame_feature_dim}], "
                f"got {arr.shape}")
        p = self.params.video
        x = ad.matmul(Tensor(arr.astype(cfg.np_dtype, copy=False)), p.input_projection)
        for block, kernel in zip(p.blocks, p.conv_kernels):
            x = transformer_block(x, block, cfg.heads)
            x = ad.conv1d(x, kernel, stride=2, pad=1)
        pooled = ad.mean_over_axis(x, 0)
        return ad.l2_normalize(pooled)

    def fuse(self, z_first: Tensor, z_latest: Tensor, mode: str = "full") -> Tensor:
        """Combine the initial and latest query embeddings into one vector.

        The MLP input always has four width-d slots [first; latest; sum;
        product]; ablation modes zero out the slot they remove so parameter
        shapes never change.
        """
        d = self.config.embed_dim
        if z_first.shape != (d,) or z_latest.shape != (d,):
            raise ad.ShapeError(
                f"fuse expects two [{d}] vectors, got {z_first.shape} and {z_latest.shape}")
        return self._fuse_any(z_first, z_latest, mode)

    def fuse_batch(self, z_first: Tensor, z_latest: Tensor,
                   mode: str = "full") -> Tensor:
        """Row-wise ``fuse`` over aligned [B, d] batches."""
        if z_first.ndim != 2 or z_first.shape != z_latest.shape:
            raise ad.ShapeError(
                f"fuse_batch expects aligned [B, d] batches, got "
                f"{z_first.shape} and {z_latest.shape}")
        return self._fuse_any(z_first, z_latest, mode)

    def _fuse_any(self, z_first: Tensor, z_latest: Tensor, mode: str) -> Tensor:
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        zero = Tensor(np.zeros(z_first.shape, dtype=z_first.dtype))
        additive = ad.add(z_first, z_latest) if mode in ("full", "add") else zero
        multiplicative = ad.mul(z_first, z_latest) if mode in ("full", "mul") else zero
        feature = ad.concat_last_dim([z_first, z_latest, additive, multiplicative])
        p = self.params.fusion
        hidden = ad.relu(ad.add(ad.matmul(feature, p.fusion_w1), p.fusion_b1))
        return ad.add(ad.matmul(hidden, p.fusion_w2), p.fusion_b2)

    def rerank_scores_pairs(self, z_fused_rows: Tensor, video_rows: Tensor) -> Tensor:
        """Differentiable scoring of aligned [N, d] fused/video row pairs."""
        if z_fused_rows.shape != video_rows.shape or z_fused_rows.ndim != 2:
            raise ad.ShapeError(
                f"rerank_scores_pairs expects aligned [N, d] matrices, got "
                f"{z_fused_rows.shape} and {video_rows.shape}")
        p = self.params.fusion
        feature = ad.concat_last_dim([z_fused_rows, video_rows,
                                      ad.mul(z_fused_rows, video_rows)])
        hidden = ad.relu(ad.add(ad.matmul(feature, p.cross_w), p.cross_b))
        return ad.add(ad.matmul(hidden, p.score_w), p.score_b)

    def rerank_score(self, z_fused: Tensor, z_video: Tensor) -> Tensor:
        """Cross-encoder relevance score for one fused-query/video pair."""
        d = self.config.embed_dim
        if z_fused.shape != (d,) or z_video.shape != (d,):
            raise ad.ShapeError(
                f"rerank_score expects two [{d}] vectors, got "
                f"{z_fused.shape} and {z_video.shape}")
        feature = ad.concat_last_dim([z_fused, z_video, ad.mul(z_fused, z_video)])
        p = self.params.fusion
        hidden = ad.relu(ad.add(ad.matmul(feature, p.cross_w), p.cross_b))
        return ad.add(ad.dot(p.score_w, hidden), p.score_b)

    def rerank_scores_tensor(self, z_fused: Tensor, video_rows: Tensor) -> Tensor:
        """Differentiable scoring of one fused query against a video matrix.

        Same math as ``rerank_score`` row by row, one graph for all rows.
        """
        n = video_rows.shape[0]
        p = self.params.fusion
        tiled = ad.add(Tensor(np.zeros((n, self.config.embed_dim),
                                       dtype=z_fused.dtype)), z_fused)
        feature = ad.concat_last_dim([tiled, video_rows,
                                      ad.mul(video_rows, z_fused)])
        hidden = ad.relu(ad.add(ad.matmul(feature, p.cross_w), p.cross_b))
        return ad.add(ad.matmul(hidden, p.score_w), p.score_b)

    def rerank_scores_batch(self, z_fused: np.ndarray, video_rows: np.ndarray) -> np.ndarray:
        """Inference-only vectorized scoring of one fused query against many videos."""
        p = self.params.fusion
        count = video_rows.shape[0]
        fused = np.broadcast_to(z_fused, video_rows.shape)
        feature = np.concatenate([fused, video_rows, fused * video_rows], axis=1)
        hidden = np.maximum(feature @ p.cross_w.data + p.cross_b.data, 0)
        return hidden @ p.score_w.data + float(p.score_b.data) * np.ones(count)

    def temperature(self) -> Tensor:
        """Differentiable contrastive temperature, clamped to [1e-3, 100]."""
        return ad.clamp(ad.exp(self.params.log_tau), TAU_MIN, TAU_MAX)
