"""Decoder-only stack of residual blocks around a matrix-memory recurrent
layer (mLSTM), mapping conditioning tokens plus noisy action tokens to
denoised action tokens.

Per head with state (C: d x d, n: d, m: scalar), gate logits i~, f~ and key
scaling 1/sqrt(d), one step of the stabilized recurrence is

    m_t  = max(f~_t + m_{t-1}, i~_t)
    i'_t = exp(i~_t - m_t)
    f'_t = exp(f~_t + m_{t-1} - m_t)
    C_t  = f'_t C_{t-1} + i'_t k_t v_t^T     (k scaled)
    n_t  = f'_t n_{t-1} + i'_t k_t
    h_t  = sigmoid(o~_t) * (C_t^T q_t / max(|n_t^T q_t|, 1))

so the readout returns the value direction weighted by the key/query match.
Output projections of the recurrence, of every block MLP, and of the final
action head are zero-initialized: a freshly initialized denoiser is the
identity map (its raw output is exactly zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pmp import diffcore as dc
from pmp.diffcore import Tensor
from pmp.encoders import sinusoid_features

INITIAL_M = -1e9  # effective -inf for the log-space stabilizer


@dataclass(frozen=True)
class XBlockConfig:
    n_blocks: int = 4
    latent_dim: int = 128
    heads: int = 8
    mlp_ratio: float = 4.0
    dropout_attn: float = 0.3
    dropout_resid: float = 0.1
    dropout_mlp: float = 0.1

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError(f"latent {self.latent_dim} not divisible by {self.heads} heads")
        for r in (self.dropout_attn, self.dropout_resid, self.dropout_mlp):
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} outside [0, 1)")


class MlstmLayer:
    """Causal left-to-right matrix-memory recurrence over a token sequence."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: XBlockConfig,
                 rng: np.random.Generator):
        d = cfg.latent_dim
        self.cfg = cfg
        self.d_head = d // cfg.heads
        scale = 1.0 / math.sqrt(d)
        self.wq = store.add(f"{prefix}.wq", dc.trunc_small(rng, (d, d), scale))
        self.wk = store.add(f"{prefix}.wk", dc.trunc_small(rng, (d, d), scale))
        self.wv = store.add(f"{prefix}.wv", dc.trunc_small(rng, (d, d), scale))
        self.wi = store.add(f"{prefix}.wi", dc.trunc_small(rng, (d, cfg.heads), scale))
        self.bi = store.add(f"{prefix}.bi", np.zeros(cfg.heads))
        self.wf = store.add(f"{prefix}.wf", dc.trunc_small(rng, (d, cfg.heads), scale))
        self.bf = store.add(f"{prefix}.bf", np.linspace(1.0, 3.0, cfg.heads))
        self.wo_gate = store.add(f"{prefix}.wo_gate", dc.trunc_small(rng, (d, d), scale))
        self.bo_gate = store.add(f"{prefix}.bo_gate", np.zeros(d))
        self.w_out = store.add(f"{prefix}.w_out", np.zeros((d, d)))
        self.b_out = store.add(f"{prefix}.b_out", np.zeros(d))

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        if dc.is_checked() and not np.all(np.isfinite(x.data)):
            raise dc.NonFiniteError("mlstm_sequence: non-finite input")
        b, s, d = x.shape
        nh, dh = self.cfg.heads, self.d_head
        dt = x.dtype

        q = dc.reshape(dc.linear(x, self.wq), (b, s, nh, dh))
        k = dc.reshape(dc.linear(x, self.wk), (b, s, nh, dh))
        v = dc.reshape(dc.linear(x, self.wv), (b, s, nh, dh))
        k = dc.mul(k, dc.constant(1.0 / math.sqrt(dh), dt))
        ig = dc.linear(x, self.wi, self.bi)  # (B, S, heads)
        fg = dc.linear(x, self.wf, self.bf)
        og = dc.sigmoid(dc.linear(x, self.wo_gate, self.bo_gate))  # (B, S, D)

        c_state = dc.constant(np.zeros((b, nh, dh, dh)), dt)
        n_state = dc.constant(np.zeros((b, nh, dh)), dt)
        m_state = dc.constant(np.full((b, nh), INITIAL_M), dt)
        one = dc.constant(np.ones((b, nh)), dt)

        outs = []
        for t in range(s):
            qt = dc.getitem(q, (slice(None), t))  # (B, nh, dh)
            kt = dc.getitem(k, (slice(None), t))
            vt = dc.getitem(v, (slice(None), t))
            it = dc.getitem(ig, (slice(None), t))  # (B, nh)
            ft = dc.getitem(fg, (slice(None), t))

            m_new = dc.maximum(dc.add(ft, m_state), it)
            i_act = dc.exp(dc.sub(it, m_new))
            f_act = dc.exp(dc.sub(dc.add(ft, m_state), m_new))
            m_state = m_new

            outer = dc.mul(dc.reshape(kt, (b, nh, dh, 1)), dc.reshape(vt, (b, nh, 1, dh)))
            c_state = dc.add(
                dc.mul(dc.reshape(f_act, (b, nh, 1, 1)), c_state),
                dc.mul(dc.reshape(i_act, (b, nh, 1, 1)), outer),
            )
            n_state = dc.add(
                dc.mul(dc.reshape(f_act, (b, nh, 1)), n_state),
                dc.mul(dc.reshape(i_act, (b, nh, 1)), kt),
            )

            num = dc.sum_(dc.mul(c_state, dc.reshape(qt, (b, nh, dh, 1))), axes=(2,))  # (B,nh,dh)
            qn = dc.sum_(dc.mul(n_state, qt), axes=(2,))  # (B, nh)
            den = dc.maximum(dc.absolute(qn), one)
            h = dc.div(num, dc.reshape(den, (b, nh, 1)))
            outs.append(dc.reshape(h, (b, 1, d)))

        h_seq = dc.concat(outs, axis=1) if s > 1 else outs[0]
        h_seq = dc.mul(og, h_seq)
        if train and self.cfg.dropout_attn > 0:
            h_seq = dc.dropout(h_seq, self.cfg.dropout_attn, rng)
        return dc.linear(h_seq, self.w_out, self.b_out)


class XBlock:
    """Pre-norm residual block: mLSTM sublayer then GELU MLP sublayer."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: XBlockConfig,
                 rng: np.random.Generator):
        d = cfg.latent_dim
        hidden = int(cfg.mlp_ratio * d)
        self.cfg = cfg
        self.ln1_g = store.add(f"{prefix}.ln1.gamma", np.ones(d))
        self.ln1_b = store.add(f"{prefix}.ln1.beta", np.zeros(d))
        self.mlstm = MlstmLayer(store, f"{prefix}.mlstm", cfg, rng)
        self.ln2_g = store.add(f"{prefix}.ln2.gamma", np.ones(d))
        self.ln2_b = store.add(f"{prefix}.ln2.beta", np.zeros(d))
        self.mlp1_w = store.add(f"{prefix}.mlp1.w", dc.he_normal(rng, (d, hidden), d))
        self.mlp1_b = store.add(f"{prefix}.mlp1.b", np.zeros(hidden))
        self.mlp2_w = store.add(f"{prefix}.mlp2.w", np.zeros((hidden, d)))
        self.mlp2_b = store.add(f"{prefix}.mlp2.b", np.zeros(d))

    def forward(self, x: Tensor, train: bool = False, rng=None) -> Tensor:
        h = self.mlstm.forward(dc.layer_norm(x, self.ln1_g, self.ln1_b), train, rng)
        if train and self.cfg.dropout_resid > 0:
            h = dc.dropout(h, self.cfg.dropout_resid, rng)
        x = dc.add(x, h)
        m = dc.gelu(dc.linear(dc.layer_norm(x, self.ln2_g, self.ln2_b), self.mlp1_w, self.mlp1_b))
        if train and self.cfg.dropout_mlp > 0:
            m = dc.dropout(m, self.cfg.dropout_mlp, rng)
        m = dc.linear(m, self.mlp2_w, self.mlp2_b)
        if train and self.cfg.dropout_resid > 0:
            m = dc.dropout(m, self.cfg.dropout_resid, rng)
        return dc.add(x, m)


class DenoiserBackbone:
    """Positional embedding + X-Block stack + linear action read-out.

    The token layout is fixed as [conditioning tokens..., noise token,
    action tokens 1..H]; the caller provides conditioning tokens ordered
    [lang, fused view tokens...].
    """

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: XBlockConfig,
                 action_dim: int, max_tokens: int, rng: np.random.Generator):
        d = cfg.latent_dim
        self.cfg = cfg
        self.action_dim = action_dim
        self.max_tokens = max_tokens
        self.pos_emb = store.add(f"{prefix}.pos_emb", dc.trunc_small(rng, (max_tokens, d)))
        self.lift_w = store.add(f"{prefix}.action_lift.w", dc.trunc_small(rng, (action_dim, d), 1.0 / math.sqrt(action_dim)))
        self.lift_b = store.add(f"{prefix}.action_lift.b", np.zeros(d))
        self.noise1_w = store.add(f"{prefix}.noise_mlp1.w", dc.he_normal(rng, (d, d), d))
        self.noise1_b = store.add(f"{prefix}.noise_mlp1.b", np.zeros(d))
        self.noise2_w = store.add(f"{prefix}.noise_mlp2.w", dc.he_normal(rng, (d, d), d))
        self.noise2_b = store.add(f"{prefix}.noise_mlp2.b", np.zeros(d))
        self.blocks = [XBlock(store, f"{prefix}.block{i}", cfg, rng) for i in range(cfg.n_blocks)]
        self.head_w = store.add(f"{prefix}.head.w", np.zeros((d, action_dim)))
        self.head_b = store.add(f"{prefix}.head.b", np.zeros(action_dim))

    def noise_token(self, c_noise: np.ndarray) -> Tensor:
        """Sinusoidal features of the noise conditioning through a 2-layer MLP."""
        feats = dc.constant(sinusoid_features(c_noise, self.cfg.latent_dim),
                            np.dtype(self.noise1_w.dtype))
        h = dc.gelu(dc.linear(feats, self.noise1_w, self.noise1_b))
        h = dc.linear(h, self.noise2_w, self.noise2_b)
        return dc.reshape(h, (h.shape[0], 1, self.cfg.latent_dim))

    def forward(self, obs_tokens: Tensor, c_noise: np.ndarray, noisy_actions: Tensor,
                train: bool = False, rng=None) -> Tensor:
        """Raw network output F at the action positions: (B, H, action_dim)."""
        b, n_obs, d = obs_tokens.shape
        horizon = noisy_actions.shape[1]
        total = n_obs + 1 + horizon
        if total > self.max_tokens:
            raise ValueError(
                f"{total} tokens exceed the positional-embedding budget {self.max_tokens}"
            )
        lifted = dc.linear(noisy_actions, self.lift_w, self.lift_b)  # (B, H, D)
        seq = dc.concat([obs_tokens, self.noise_token(c_noise), lifted], axis=1)
        pos = dc.getitem(self.pos_emb, (slice(0, total),))
        seq = dc.add(seq, dc.reshape(pos, (1, total, d)))
        for block in self.blocks:
            seq = block.forward(seq, train, rng)
        act = dc.getitem(seq, (slice(None), slice(n_obs + 1, total)))
        return dc.linear(act, self.head_w, self.head_b)
