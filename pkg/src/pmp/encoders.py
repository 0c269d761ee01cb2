"""Tokenizers: language instructions and per-view images / point maps.

Two encoder families are provided. `film-residual` is a strided residual
CNN whose per-stage features are modulated by the language embedding
(per-channel scale and shift produced by one linear head per stage).
`depthwise-conv` stacks downsampling + depthwise 3x3 + pointwise MLP stages
and takes no language conditioning. Either family emits one pooled token or
a grid of tokens per view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pmp import diffcore as dc
from pmp.diffcore import Tensor

FILM_RESIDUAL = "film-residual"
DEPTHWISE_CONV = "depthwise-conv"
GRID = "grid"
POOLED_SINGLE = "pooled-single"


@dataclass(frozen=True)
class EncoderConfig:
    family: str
    in_channels: int
    stage_widths: tuple
    tokens_out: str
    latent_dim: int

    def __post_init__(self):
        if self.family not in (FILM_RESIDUAL, DEPTHWISE_CONV):
            raise ValueError(f"unknown encoder family {self.family!r}")
        if self.in_channels not in (3, 6):
            raise ValueError(f"in_channels must be 3 or 6, got {self.in_channels}")
        if self.tokens_out not in (GRID, POOLED_SINGLE):
            raise ValueError(f"unknown tokens_out {self.tokens_out!r}")
        if not self.stage_widths:
            raise ValueError("need at least one stage")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stage_widths)

    def token_count(self, height: int, width: int) -> int:
        """Token count is a pure function of the image dims and the config."""
        if self.tokens_out == POOLED_SINGLE:
            return 1
        s = self.total_stride
        if height % s or width % s:
            raise ValueError(f"dims {height}x{width} not divisible by total stride {s}")
        return (height // s) * (width // s)


@dataclass
class TokenSequence:
    """Ordered latent tokens with a per-token provenance tag."""

    tokens: Tensor  # (B, N, D)
    provenance: list

    def __post_init__(self):
        if self.tokens.data.ndim != 3:
            raise ValueError(f"tokens must be (B, N, D), got {self.tokens.shape}")
        if self.tokens.shape[1] != len(self.provenance):
            raise ValueError(
                f"{self.tokens.shape[1]} tokens but {len(self.provenance)} provenance tags"
            )
        if self.tokens.shape[1] == 0:
            raise ValueError("empty token sequence")

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.tokens.shape[2]


class UnknownInstructionError(KeyError):
    pass


class InstructionVocab:
    """Closed instruction set; id = line index in the persisted file."""

    def __init__(self, instructions):
        self.instructions = list(instructions)
        if len(set(self.instructions)) != len(self.instructions):
            raise ValueError("duplicate instructions in vocabulary")
        self.ids = {s: i for i, s in enumerate(self.instructions)}

    def __len__(self):
        return len(self.instructions)

    def lookup(self, instruction: str) -> int:
        if instruction not in self.ids:
            raise UnknownInstructionError(f"unknown instruction: {instruction!r}")
        return self.ids[instruction]

    def save(self, path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.instructions), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InstructionVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


class InstructionEmbedding:
    """Learned per-instruction embedding table; one language token."""

    def __init__(self, store: dc.ParamStore, prefix: str, vocab: InstructionVocab,
                 latent_dim: int, rng: np.random.Generator):
        self.vocab = vocab
        self.latent_dim = latent_dim
        self.table = store.add(f"{prefix}.table", dc.trunc_small(rng, (len(vocab), latent_dim)))

    def embed(self, instructions) -> TokenSequence:
        ids = np.array([self.vocab.lookup(s) for s in instructions])
        tok = dc.embedding(self.table, ids[:, None])  # (B, 1, D)
        return TokenSequence(tok, ["lang"])

    def embed_vector(self, instructions) -> Tensor:
        ids = np.array([self.vocab.lookup(s) for s in instructions])
        return dc.embedding(self.table, ids)  # (B, D)


def film_modulate(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel modulation out[c] = gamma[c] * features[c] + beta[c].

    features: (B, H, W, C); gamma, beta: (B, C) or (C,).
    """
    c = features.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise dc.ShapeError(
            f"film_modulate: {c} feature channels vs gamma {gamma.shape}, beta {beta.shape}"
        )
    if gamma.data.ndim == 2:
        gamma = dc.reshape(gamma, (gamma.shape[0], 1, 1, c))
        beta = dc.reshape(beta, (beta.shape[0], 1, 1, c))
    return dc.add(dc.mul(features, gamma), beta)


class _TokenHead:
    """Final projection from feature maps to latent tokens."""

    def __init__(self, store, prefix, in_dim, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.w = store.add(f"{prefix}.token_proj.w", dc.trunc_small(rng, (in_dim, cfg.latent_dim)))
        self.b = store.add(f"{prefix}.token_proj.b", np.zeros(cfg.latent_dim))

    def __call__(self, feat: Tensor) -> Tensor:
        b, h, w, c = feat.shape
        if self.cfg.tokens_out == POOLED_SINGLE:
            pooled = dc.mean(feat, axes=(1, 2))  # (B, C)
            tok = dc.linear(pooled, self.w, self.b)
            return dc.reshape(tok, (b, 1, self.cfg.latent_dim))
        flat = dc.reshape(feat, (b, h * w, c))
        return dc.linear(flat, self.w, self.b)


class FilmResidualEncoder:
    """Strided residual stages, language-modulated after each stage norm."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: EncoderConfig,
                 rng: np.random.Generator):
        if cfg.family != FILM_RESIDUAL:
            raise ValueError(f"config family {cfg.family!r} is not {FILM_RESIDUAL!r}")
        self.cfg = cfg
        self.stages = []
        c_in = cfg.in_channels
        for si, c_out in enumerate(cfg.stage_widths):
            p = f"{prefix}.stage{si}"
            stage = {
                "conv1_w": store.add(f"{p}.conv1.w", dc.he_normal(rng, (4, 4, c_in, c_out), 16 * c_in)),
                "conv1_b": store.add(f"{p}.conv1.b", np.zeros(c_out)),
                "ln_g": store.add(f"{p}.ln.gamma", np.ones(c_out)),
                "ln_b": store.add(f"{p}.ln.beta", np.zeros(c_out)),
                # FiLM head starts at identity: gamma = 1, beta = 0
                "film_w": store.add(f"{p}.film.w", np.zeros((cfg.latent_dim, 2 * c_out))),
                "film_b": store.add(f"{p}.film.b", np.concatenate([np.ones(c_out), np.zeros(c_out)])),
                "conv2_w": store.add(f"{p}.conv2.w", dc.he_normal(rng, (3, 3, c_out, c_out), 9 * c_out)),
                "conv2_b": store.add(f"{p}.conv2.b", np.zeros(c_out)),
                "short_w": store.add(f"{p}.short.w", dc.he_normal(rng, (2, 2, c_in, c_out), 4 * c_in)),
                "width": c_out,
            }
            self.stages.append(stage)
            c_in = c_out
        self.head = _TokenHead(store, prefix, c_in, cfg, rng)

    def encode(self, image: Tensor, lang: Tensor | None, tag: str) -> TokenSequence:
        """image: (B, H, W, in_channels); lang: (B, latent_dim) or None."""
        b, h, w, c = image.shape
        if c != self.cfg.in_channels:
            raise dc.ShapeError(f"encoder expects {self.cfg.in_channels} channels, got {c}")
        self.cfg.token_count(h, w)  # raises on indivisible dims
        x = image
        for st in self.stages:
            y = dc.conv2d(x, st["conv1_w"], st["conv1_b"], stride=2, padding=1)
            y = dc.layer_norm(y, st["ln_g"], st["ln_b"])
            if lang is not None:
                gb = dc.linear(lang, st["film_w"], st["film_b"])  # (B, 2C)
                gamma = dc.getitem(gb, (slice(None), slice(0, st["width"])))
                beta = dc.getitem(gb, (slice(None), slice(st["width"], 2 * st["width"])))
                y = film_modulate(y, gamma, beta)
            y = dc.gelu(y)
            y = dc.conv2d(y, st["conv2_w"], st["conv2_b"], stride=1, padding=1)
            x = dc.add(y, dc.conv2d(x, st["short_w"], stride=2, padding=0))
        tok = self.head(x)
        return TokenSequence(tok, [tag] * tok.shape[1])


class DepthwiseConvEncoder:
    """Downsample + depthwise 3x3 + pointwise MLP stages; no conditioning."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: EncoderConfig,
                 rng: np.random.Generator):
        if cfg.family != DEPTHWISE_CONV:
            raise ValueError(f"config family {cfg.family!r} is not {DEPTHWISE_CONV!r}")
        self.cfg = cfg
        self.stages = []
        c_in = cfg.in_channels
        for si, c_out in enumerate(cfg.stage_widths):
            p = f"{prefix}.stage{si}"
            hidden = 2 * c_out
            stage = {
                "down_w": store.add(f"{p}.down.w", dc.he_normal(rng, (2, 2, c_in, c_out), 4 * c_in)),
                "down_b": store.add(f"{p}.down.b", np.zeros(c_out)),
                "dw_w": store.add(f"{p}.dw.w", dc.he_normal(rng, (3, 3, c_out), 9)),
                "dw_b": store.add(f"{p}.dw.b", np.zeros(c_out)),
                "ln_g": store.add(f"{p}.ln.gamma", np.ones(c_out)),
                "ln_b": store.add(f"{p}.ln.beta", np.zeros(c_out)),
                "pw1_w": store.add(f"{p}.pw1.w", dc.he_normal(rng, (c_out, hidden), c_out)),
                "pw1_b": store.add(f"{p}.pw1.b", np.zeros(hidden)),
                "pw2_w": store.add(f"{p}.pw2.w", dc.he_normal(rng, (hidden, c_out), hidden)),
                "pw2_b": store.add(f"{p}.pw2.b", np.zeros(c_out)),
            }
            self.stages.append(stage)
            c_in = c_out
        self.head = _TokenHead(store, prefix, c_in, cfg, rng)

    def encode(self, image: Tensor, lang: Tensor | None = None, tag: str = "") -> TokenSequence:
        b, h, w, c = image.shape
        if c != self.cfg.in_channels:
            raise dc.ShapeError(f"encoder expects {self.cfg.in_channels} channels, got {c}")
        self.cfg.token_count(h, w)
        x = image
        for st in self.stages:
            x = dc.conv2d(x, st["down_w"], st["down_b"], stride=2, padding=0)
            y = dc.depthwise_conv2d(x, st["dw_w"], st["dw_b"], padding=1)
            y = dc.layer_norm(y, st["ln_g"], st["ln_b"])
            bs, hs, ws, cs = y.shape
            flat = dc.reshape(y, (bs, hs * ws, cs))
            flat = dc.linear(flat, st["pw1_w"], st["pw1_b"])
            flat = dc.gelu(flat)
            flat = dc.linear(flat, st["pw2_w"], st["pw2_b"])
            x = dc.add(x, dc.reshape(flat, (bs, hs, ws, cs)))
        tok = self.head(x)
        return TokenSequence(tok, [tag] * tok.shape[1])


def make_encoder(store, prefix, cfg: EncoderConfig, rng):
    if cfg.family == FILM_RESIDUAL:
        return FilmResidualEncoder(store, prefix, cfg, rng)
    return DepthwiseConvEncoder(store, prefix, cfg, rng)


def sinusoid_features(values: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features over geometric frequencies (1 .. 1000)."""
    if dim % 2:
        raise ValueError(f"feature dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    phases = np.asarray(values, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)
