"""RGB / point-map fusion paradigms.

Early fusion stacks XYZ and RGB into a six-channel image before encoding.
Late fusion combines encoded token sequences: element-wise addition (one
token per view), concatenation of all tokens, or a small cross-attention
module that produces one learned class token per view.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from pmp import diffcore as dc
from pmp.diffcore import Tensor
from pmp.encoders import TokenSequence

EARLY_6CH = "early6ch"
ADD = "add"
CAT = "cat"
ATTN = "attn"
MODES = (EARLY_6CH, ADD, CAT, ATTN)


@dataclass(frozen=True)
class FusionConfig:
    mode: str = CAT
    attn_layers: int = 4
    attn_heads: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.mode == ATTN and self.attn_layers < 1:
            raise ValueError("attn fusion needs at least one layer")


def fuse_early_6ch(pmap_coords: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    """Stack normalized XYZ (channels 0-2) with RGB (channels 3-5)."""
    pmap_coords = np.asarray(pmap_coords)
    rgb = np.asarray(rgb)
    if pmap_coords.shape[-1] != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"need 3-channel inputs, got {pmap_coords.shape} and {rgb.shape}")
    if pmap_coords.shape[:-1] != rgb.shape[:-1]:
        raise ValueError(f"spatial mismatch: {pmap_coords.shape[:-1]} vs {rgb.shape[:-1]}")
    return np.concatenate([pmap_coords, rgb], axis=-1)


_VIEW_TAG = re.compile(r"^(\w+)-view-(\d+)$")


def _view_index(tag: str) -> int:
    m = _VIEW_TAG.match(tag)
    if not m:
        raise ValueError(f"token tag {tag!r} does not carry a view index")
    return int(m.group(2))


def _split_by_view(seq: TokenSequence) -> dict[int, list[int]]:
    by_view: dict[int, list[int]] = {}
    for i, tag in enumerate(seq.provenance):
        by_view.setdefault(_view_index(tag), []).append(i)
    return by_view


def fuse_add(rgb_tokens: TokenSequence | None, pmap_tokens: TokenSequence | None) -> TokenSequence:
    """Tokenwise sum; requires one token per view from each modality."""
    if rgb_tokens is None and pmap_tokens is None:
        raise ValueError("fuse_add: no tokens to fuse")
    if rgb_tokens is None or pmap_tokens is None:
        present = rgb_tokens or pmap_tokens
        tags = [f"fused-view-{_view_index(t)}" for t in present.provenance]
        return TokenSequence(present.tokens, tags)
    if rgb_tokens.count != pmap_tokens.count or rgb_tokens.latent_dim != pmap_tokens.latent_dim:
        raise dc.ShapeError(
            f"fuse_add: shape mismatch {rgb_tokens.tokens.shape} vs {pmap_tokens.tokens.shape}"
        )
    tags = [f"fused-view-{_view_index(t)}" for t in rgb_tokens.provenance]
    return TokenSequence(dc.add(rgb_tokens.tokens, pmap_tokens.tokens), tags)


def fuse_cat(rgb_tokens: TokenSequence | None, pmap_tokens: TokenSequence | None) -> TokenSequence:
    """Concatenate all tokens, per view rgb-then-pmap, views in index order.

    A missing modality passes the other through unchanged. Provenance tags
    are preserved.
    """
    if rgb_tokens is None and pmap_tokens is None:
        raise ValueError("fuse_cat: no tokens to fuse")
    if rgb_tokens is None or pmap_tokens is None:
        present = rgb_tokens or pmap_tokens
        return TokenSequence(present.tokens, list(present.provenance))
    if rgb_tokens.latent_dim != pmap_tokens.latent_dim:
        raise dc.ShapeError(
            f"fuse_cat: latent dims {rgb_tokens.latent_dim} vs {pmap_tokens.latent_dim}"
        )
    rgb_views = _split_by_view(rgb_tokens)
    pmap_views = _split_by_view(pmap_tokens)
    pieces = []
    tags = []
    for view in sorted(set(rgb_views) | set(pmap_views)):
        for seq, idxs in ((rgb_tokens, rgb_views.get(view)), (pmap_tokens, pmap_views.get(view))):
            if idxs is None:
                continue
            pieces.append(dc.getitem(seq.tokens, (slice(None), idxs)))
            tags.extend(seq.provenance[i] for i in idxs)
    return TokenSequence(dc.concat(pieces, axis=1), tags)


class AttnFuser:
    """Per view, a learned class token cross-attends over that view's
    rgb+pmap tokens through pre-norm layers (cross-attention + MLP, both
    residual). One fuser is shared across views; no positional embeddings
    are applied to the keys, so the output is invariant to key order."""

    def __init__(self, store: dc.ParamStore, prefix: str, latent_dim: int,
                 cfg: FusionConfig, rng: np.random.Generator):
        if latent_dim % cfg.attn_heads:
            raise ValueError(f"latent {latent_dim} not divisible by {cfg.attn_heads} heads")
        self.cfg = cfg
        self.dim = latent_dim
        self.heads = cfg.attn_heads
        self.class_token = store.add(f"{prefix}.class_token", dc.trunc_small(rng, (1, latent_dim)))
        self.layers = []
        for li in range(cfg.attn_layers):
            p = f"{prefix}.layer{li}"
            d = latent_dim
            self.layers.append({
                "lnq_g": store.add(f"{p}.lnq.gamma", np.ones(d)),
                "lnq_b": store.add(f"{p}.lnq.beta", np.zeros(d)),
                "lnkv_g": store.add(f"{p}.lnkv.gamma", np.ones(d)),
                "lnkv_b": store.add(f"{p}.lnkv.beta", np.zeros(d)),
                "wq": store.add(f"{p}.wq", dc.trunc_small(rng, (d, d), 1.0 / math.sqrt(d))),
                "wk": store.add(f"{p}.wk", dc.trunc_small(rng, (d, d), 1.0 / math.sqrt(d))),
                "wv": store.add(f"{p}.wv", dc.trunc_small(rng, (d, d), 1.0 / math.sqrt(d))),
                "wo": store.add(f"{p}.wo", dc.trunc_small(rng, (d, d), 1.0 / math.sqrt(d))),
                "ln2_g": store.add(f"{p}.ln2.gamma", np.ones(d)),
                "ln2_b": store.add(f"{p}.ln2.beta", np.zeros(d)),
                "mlp1_w": store.add(f"{p}.mlp1.w", dc.he_normal(rng, (d, 2 * d), d)),
                "mlp1_b": store.add(f"{p}.mlp1.b", np.zeros(2 * d)),
                "mlp2_w": store.add(f"{p}.mlp2.w", dc.he_normal(rng, (2 * d, d), 2 * d)),
                "mlp2_b": store.add(f"{p}.mlp2.b", np.zeros(d)),
            })

    def _cross_attend(self, q: Tensor, kv: Tensor, layer) -> Tensor:
        b, nq, d = q.shape
        nk = kv.shape[1]
        h, dh = self.heads, d // self.heads
        qn = dc.layer_norm(q, layer["lnq_g"], layer["lnq_b"])
        kvn = dc.layer_norm(kv, layer["lnkv_g"], layer["lnkv_b"])
        qh = dc.transpose(dc.reshape(dc.linear(qn, layer["wq"]), (b, nq, h, dh)), (0, 2, 1, 3))
        kh = dc.transpose(dc.reshape(dc.linear(kvn, layer["wk"]), (b, nk, h, dh)), (0, 2, 1, 3))
        vh = dc.transpose(dc.reshape(dc.linear(kvn, layer["wv"]), (b, nk, h, dh)), (0, 2, 1, 3))
        scores = dc.matmul(qh, dc.transpose(kh, (0, 1, 3, 2)))  # (B, h, nq, nk)
        scores = dc.mul(scores, dc.constant(1.0 / math.sqrt(dh), scores.dtype))
        attn = dc.softmax(scores, axis=-1)
        ctx = dc.matmul(attn, vh)  # (B, h, nq, dh)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (b, nq, d))
        return dc.linear(ctx, layer["wo"])

    def fuse_view(self, view_tokens: Tensor) -> Tensor:
        """view_tokens: (B, N, D) -> one class token (B, 1, D)."""
        if view_tokens.shape[1] == 0:
            raise ValueError("attn fusion: zero input tokens for a view")
        b = view_tokens.shape[0]
        x = dc.reshape(self.class_token, (1, 1, self.dim))
        x = dc.add(x, dc.constant(np.zeros((b, 1, self.dim)), x.dtype))  # broadcast to batch
        for layer in self.layers:
            x = dc.add(x, self._cross_attend(x, view_tokens, layer))
            xn = dc.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            hmid = dc.gelu(dc.linear(xn, layer["mlp1_w"], layer["mlp1_b"]))
            x = dc.add(x, dc.linear(hmid, layer["mlp2_w"], layer["mlp2_b"]))
        return x


def fuse_attn(rgb_tokens: TokenSequence | None, pmap_tokens: TokenSequence | None,
              fuser: AttnFuser) -> TokenSequence:
    """Cross-attention fusion: one fused class token per view."""
    if rgb_tokens is None and pmap_tokens is None:
        raise ValueError("fuse_attn: no tokens to fuse")
    views: dict[int, list[Tensor]] = {}
    for seq in (rgb_tokens, pmap_tokens):
        if seq is None:
            continue
        for view, idxs in _split_by_view(seq).items():
            views.setdefault(view, []).append(dc.getitem(seq.tokens, (slice(None), idxs)))
    outs = []
    tags = []
    for view in sorted(views):
        kv = views[view][0] if len(views[view]) == 1 else dc.concat(views[view], axis=1)
        outs.append(fuser.fuse_view(kv))
        tags.append(f"fused-view-{view}")
    return TokenSequence(dc.concat(outs, axis=1) if len(outs) > 1 else outs[0], tags)
