"""End-to-end policy: observation tokenization, score-matching training with
AdamW + EMA, chunked action sampling, and input-gradient saliency."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pmp import diffcore as dc
from pmp import diffusion, fusion
from pmp.backbone import DenoiserBackbone, XBlockConfig
from pmp.checkpoint import read_weights, write_weights
from pmp.config import Config, parse_config
from pmp.data import Dataset, rgb_to_unit
from pmp.diffcore import Tensor
from pmp.encoders import (
    GRID,
    POOLED_SINGLE,
    EncoderConfig,
    InstructionEmbedding,
    InstructionVocab,
    TokenSequence,
    make_encoder,
)
from pmp.geometry import PointMap

MODALITIES = ("both", "rgb", "xyz")


@dataclass
class Observation:
    """What the policy sees: per view an RGB image in [0, 1] and a
    normalized world-frame point map, plus the instruction string."""

    views: list  # [(rgb HxWx3 float, PointMap)]
    instruction: str

    def __post_init__(self):
        if not self.views:
            raise ValueError("observation needs at least one view")
        dims = {np.asarray(rgb).shape[:2] for rgb, _ in self.views}
        dims |= {pm.coords.shape[:2] for _, pm in self.views}
        if len(dims) != 1:
            raise ValueError(f"views disagree on image dims: {dims}")
        for _, pm in self.views:
            if pm.frame != "world":
                raise ValueError("observation point maps must be world-frame")


@dataclass
class NormStats:
    """Per-action-dimension [min, max] from the training set."""

    amin: np.ndarray
    amax: np.ndarray

    def __post_init__(self):
        self.amin = np.asarray(self.amin, dtype=np.float64)
        self.amax = np.asarray(self.amax, dtype=np.float64)
        if np.any(self.amin > self.amax):
            raise ValueError("stats min exceeds max")


def normalize_actions(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    """Affine [min, max] -> [-1, 1]; constant dimensions map to 0."""
    span = stats.amax - stats.amin
    safe = np.where(span == 0, 1.0, span)
    z = (raw - stats.amin) / safe * 2.0 - 1.0
    return np.where(span == 0, 0.0, z)


def denormalize_actions(z: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse map; constant dimensions return the constant."""
    span = stats.amax - stats.amin
    return np.where(span == 0, stats.amin, (z + 1.0) / 2.0 * span + stats.amin)


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over a ParamStore."""

    def __init__(self, store: dc.ParamStore, lr: float = 1e-4, betas=(0.9, 0.95),
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)


class EmaWeights:
    """Shadow copy of every parameter: shadow <- d*shadow + (1-d)*weight."""

    def __init__(self, store: dc.ParamStore, decay: float = 0.999):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay {decay} outside [0, 1)")
        self.decay = decay
        self.shadow = store.state_dict()

    def update(self, store: dc.ParamStore) -> None:
        d = self.decay
        for name, p in store.items():
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * p.data


@contextmanager
def use_weights(store: dc.ParamStore, state: dict):
    """Temporarily load a different weight set (e.g. the EMA shadow)."""
    saved = {n: t.data for n, t in store.items()}
    store.load_state(state)
    try:
        yield
    finally:
        for n, t in store.items():
            t.data = saved[n]


class PointMapPolicy:
    """Diffusion policy over multi-view RGB + point-map observations."""

    def __init__(self, cfg: Config, vocab: InstructionVocab, init_seed: int = 0,
                 dtype=np.float32):
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        self.store = dc.ParamStore(dtype)
        self.latent = int(cfg["model.latent"])
        self.views = int(cfg["env.views"])
        self.chunk = int(cfg["model.chunk"])
        self.action_dim = int(cfg["model.action_dim"])
        self.modality = str(cfg["model.modality"])
        self.fusion_cfg = fusion.FusionConfig(
            mode=str(cfg["fusion.mode"]),
            attn_layers=int(cfg["fusion.attn_layers"]),
            attn_heads=int(cfg["fusion.attn_heads"]),
        )
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

        rng = np.random.default_rng(init_seed)
        self.lang = InstructionEmbedding(self.store, "lang", vocab, self.latent, rng)

        tokens_out = str(cfg["encoder.tokens"])
        if self.fusion_cfg.mode == fusion.ADD and tokens_out != POOLED_SINGLE:
            raise ValueError("add fusion requires encoder.tokens = pooled-single")
        family = str(cfg["encoder.family"])
        stages = cfg.stage_widths()

        def enc_cfg(in_channels):
            return EncoderConfig(family=family, in_channels=in_channels,
                                 stage_widths=stages, tokens_out=tokens_out,
                                 latent_dim=self.latent)

        self.rgb_encoders = []
        self.pmap_encoders = []
        self.early_encoders = []
        if self.fusion_cfg.mode == fusion.EARLY_6CH:
            channels = 6 if self.modality == "both" else 3
            for v in range(self.views):
                self.early_encoders.append(
                    make_encoder(self.store, f"early_enc{v}", enc_cfg(channels), rng)
                )
        else:
            if self.modality in ("both", "rgb"):
                for v in range(self.views):
                    self.rgb_encoders.append(
                        make_encoder(self.store, f"rgb_enc{v}", enc_cfg(3), rng)
                    )
            if self.modality in ("both", "xyz"):
                for v in range(self.views):
                    self.pmap_encoders.append(
                        make_encoder(self.store, f"pmap_enc{v}", enc_cfg(3), rng)
                    )
        self.fuser = None
        if self.fusion_cfg.mode == fusion.ATTN:
            self.fuser = fusion.AttnFuser(self.store, "fuser", self.latent,
                                          self.fusion_cfg, rng)

        self.block_cfg = XBlockConfig(
            n_blocks=int(cfg["model.blocks"]),
            latent_dim=self.latent,
            heads=int(cfg["model.heads"]),
            mlp_ratio=float(cfg["model.mlp_ratio"]),
            dropout_attn=float(cfg["model.dropout_attn"]),
            dropout_resid=float(cfg["model.dropout_resid"]),
            dropout_mlp=float(cfg["model.dropout_mlp"]),
        )
        self.backbone = DenoiserBackbone(self.store, "backbone", self.block_cfg,
                                         self.action_dim, int(cfg["model.max_tokens"]), rng)
        self.schedule_cfg = diffusion.NoiseSchedule(
            sigma_min=float(cfg["diffusion.sigma_min"]),
            sigma_max=float(cfg["diffusion.sigma_max"]),
            n_steps=int(cfg["diffusion.steps"]),
        )
        self.precond = diffusion.Preconditioner(sigma_data=float(cfg["diffusion.sigma_data"]))
        self.stats = NormStats(np.full(self.action_dim, -1.0), np.full(self.action_dim, 1.0))
        self.ema = EmaWeights(self.store, decay=float(cfg["train.ema"]))
        self.denoiser_calls = 0

    # -- tokenization --------------------------------------------------------

    def prepare_inputs(self, rgb: np.ndarray, pmap: np.ndarray,
                       requires_grad: bool = False) -> dict:
        """Split (B, V, H, W, 3) arrays into per-(modality, view) tensors."""
        inputs = {}
        for v in range(self.views):
            if rgb is not None:
                inputs[("rgb", v)] = Tensor(
                    np.ascontiguousarray(rgb[:, v], dtype=self.dtype), requires_grad
                )
            if pmap is not None:
                inputs[("pmap", v)] = Tensor(
                    np.ascontiguousarray(pmap[:, v], dtype=self.dtype), requires_grad
                )
        return inputs

    def tokenize(self, inputs: dict, instructions, drop=()) -> Tensor:
        """Observation tokens [lang, fused view tokens...] as (B, N, D).

        Deterministic (encoders carry no dropout). ``drop`` removes a
        modality's tokens at the fusion stage (used by the ablation harness
        and the modality-plumbing check).
        """
        lang_vec = self.lang.embed_vector(instructions)  # (B, D)
        lang_seq = dc.reshape(lang_vec, (lang_vec.shape[0], 1, self.latent))

        use_rgb = self.modality in ("both", "rgb") and "rgb" not in drop
        use_pmap = self.modality in ("both", "xyz") and "pmap" not in drop
        if not (use_rgb or use_pmap):
            raise ValueError("all modalities dropped; nothing to tokenize")

        if self.fusion_cfg.mode == fusion.EARLY_6CH:
            seqs = []
            for v, enc in enumerate(self.early_encoders):
                if enc.cfg.in_channels == 6:
                    img = dc.concat([inputs[("pmap", v)], inputs[("rgb", v)]], axis=-1)
                else:
                    img = inputs[("pmap", v)] if self.modality == "xyz" else inputs[("rgb", v)]
                seqs.append(enc.encode(img, lang_vec, f"fused-view-{v}"))
            fused = seqs[0] if len(seqs) == 1 else TokenSequence(
                dc.concat([s.tokens for s in seqs], axis=1),
                [t for s in seqs for t in s.provenance],
            )
        else:
            rgb_seq = self._encode_modality(self.rgb_encoders, "rgb", inputs, lang_vec) \
                if use_rgb and self.rgb_encoders else None
            pmap_seq = self._encode_modality(self.pmap_encoders, "pmap", inputs, lang_vec) \
                if use_pmap and self.pmap_encoders else None
            if self.fusion_cfg.mode == fusion.ADD:
                fused = fusion.fuse_add(rgb_seq, pmap_seq)
            elif self.fusion_cfg.mode == fusion.CAT:
                fused = fusion.fuse_cat(rgb_seq, pmap_seq)
            else:
                fused = fusion.fuse_attn(rgb_seq, pmap_seq, self.fuser)

        return dc.concat([lang_seq, fused.tokens], axis=1)

    def _encode_modality(self, encoders, mod, inputs, lang_vec) -> TokenSequence:
        seqs = [enc.encode(inputs[(mod, v)], lang_vec, f"{mod}-view-{v}")
                for v, enc in enumerate(encoders)]
        if len(seqs) == 1:
            return seqs[0]
        return TokenSequence(
            dc.concat([s.tokens for s in seqs], axis=1),
            [t for s in seqs for t in s.provenance],
        )

    # -- diffusion ------------------------------------------------------------

    def denoise_graph(self, obs_tokens: Tensor, x_noisy: np.ndarray, sigma: np.ndarray,
                      train: bool = False, rng=None) -> Tensor:
        """Preconditioned denoiser D(x, sigma) as a graph node (B, H, A)."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("denoise: sigma must be positive")
        self.denoiser_calls += 1
        c_skip = self.precond.c_skip(sigma)[:, None, None]
        c_out = self.precond.c_out(sigma)[:, None, None]
        c_in = self.precond.c_in(sigma)[:, None, None]
        c_noise = self.precond.c_noise(sigma)
        f = self.backbone.forward(
            obs_tokens, c_noise, dc.constant((c_in * x_noisy), self.dtype), train, rng
        )
        return dc.add(dc.constant(c_skip * x_noisy, self.dtype),
                      dc.mul(dc.constant(c_out, self.dtype), f))

    def score_match_loss(self, obs_tokens: Tensor, clean: np.ndarray,
                         rng: np.random.Generator, train: bool = False) -> Tensor:
        """lambda(sigma)-weighted reconstruction error at a random noise level."""
        b = clean.shape[0]
        sigma = diffusion.sample_sigma_train(rng, self.schedule_cfg, size=b)
        eps = rng.standard_normal(clean.shape) * sigma[:, None, None]
        d = self.denoise_graph(obs_tokens, clean + eps, sigma, train, rng)
        diff = dc.sub(d, dc.constant(clean, self.dtype))
        per_sample = dc.mean(dc.mul(diff, diff), axes=(1, 2))  # (B,)
        lam = dc.constant(self.precond.loss_weight(sigma), self.dtype)
        return dc.mean(dc.mul(lam, per_sample))

    # -- training ---------------------------------------------------------------

    def train_step(self, batch: dict, opt: AdamW, rng: np.random.Generator) -> dict:
        """One optimizer update; returns {loss, grad_norm}. A non-finite loss
        aborts the step before any weight is touched."""
        self.store.zero_grads()
        inputs = self.prepare_inputs(batch.get("rgb"), batch.get("pmap"))
        tokens = self.tokenize(inputs, batch["instructions"])
        loss = self.score_match_loss(tokens, batch["actions"], rng, train=True)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}; step aborted")
        loss.backward()
        grad_norm = self.store.grad_norm()
        opt.step()
        self.ema.update(self.store)
        return {"loss": value, "grad_norm": grad_norm}

    # -- inference ----------------------------------------------------------------

    def _observation_batch(self, obs: Observation):
        rgb = np.stack([rgb for rgb, _ in obs.views])[None] \
            if self.modality in ("both", "rgb") else None
        pmap = np.stack([pm.coords for _, pm in obs.views])[None] \
            if self.modality in ("both", "xyz") else None
        if self.fusion_cfg.mode == fusion.EARLY_6CH:
            rgb = np.stack([rgb_ for rgb_, _ in obs.views])[None]
            pmap = np.stack([pm.coords for _, pm in obs.views])[None]
        return rgb, pmap

    def predict_chunk(self, obs: Observation, seed: int, drop=()) -> np.ndarray:
        """EMA-weight DDIM sampling; returns a denormalized (H, A) chunk."""
        rng = np.random.default_rng(seed)
        schedule = diffusion.make_schedule(self.schedule_cfg)
        with use_weights(self.store, self.ema.shadow), dc.no_grad():
            rgb, pmap = self._observation_batch(obs)
            inputs = self.prepare_inputs(rgb, pmap)
            tokens = self.tokenize(inputs, [obs.instruction], drop=drop)

            def denoise(x, s):
                return self.denoise_graph(tokens, x, np.array([s])).data

            z = diffusion.ddim_sample(denoise, (1, self.chunk, self.action_dim),
                                      schedule, rng)
        return denormalize_actions(z[0].astype(np.float64), self.stats)

    def as_eval_policy(self, drop=()):
        """Adapter matching envsim.evaluate_policy's callable protocol."""

        def predict(views, instruction, seed, state):
            del state
            return self.predict_chunk(Observation(views, instruction), seed, drop=drop)

        return predict

    # -- diagnostics -----------------------------------------------------------------

    def saliency_map(self, obs: Observation, clean_chunk: np.ndarray, seed: int) -> dict:
        """|d loss / d input|, reduced over channels by max, min-max scaled
        to [0, 1] per view and modality. clean_chunk is normalized (H, A)."""
        rng = np.random.default_rng(seed)
        with use_weights(self.store, self.ema.shadow):
            rgb, pmap = self._observation_batch(obs)
            inputs = self.prepare_inputs(rgb, pmap, requires_grad=True)
            tokens = self.tokenize(inputs, [obs.instruction])
            loss = self.score_match_loss(tokens, clean_chunk[None], rng)
            loss.backward()
        maps = {}
        for (mod, view), tensor in inputs.items():
            grad = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
            sal = np.abs(grad[0]).max(axis=-1)
            lo, hi = sal.min(), sal.max()
            maps[(mod, view)] = (sal - lo) / (hi - lo) if hi > lo else np.zeros_like(sal)
        return maps

    # -- persistence --------------------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        extras = {"norm.action_min": self.stats.amin, "norm.action_max": self.stats.amax}
        write_weights({**self.store.state_dict(), **extras}, out / "weights.pmpc")
        write_weights({**self.ema.shadow, **extras}, out / "ema.pmpc")
        (out / "config.txt").write_text(self.cfg.snapshot(), encoding="utf-8")
        self.vocab.save(out / "vocab.txt")

    @classmethod
    def load(cls, ckpt_dir, dtype=np.float32) -> "PointMapPolicy":
        ckpt = Path(ckpt_dir)
        cfg = parse_config(ckpt / "config.txt")
        vocab = InstructionVocab.load(ckpt / "vocab.txt")
        policy = cls(cfg, vocab, dtype=dtype)
        raw = read_weights(ckpt / "weights.pmpc")
        ema = read_weights(ckpt / "ema.pmpc")
        policy.stats = NormStats(raw.pop("norm.action_min"), raw.pop("norm.action_max"))
        ema.pop("norm.action_min")
        ema.pop("norm.action_max")
        policy.store.load_state(raw)
        policy.ema.shadow = {k: np.asarray(v, dtype=policy.dtype) for k, v in ema.items()}
        return policy


# -- training data ------------------------------------------------------------------------


class TrainingData:
    """Flattened (observation, action-chunk) pairs from a demonstration set.

    Point maps are precomputed once per step; action chunks are normalized
    and zero-padded past the episode end (the expert emits the zero action
    once at the goal, so padding matches its behavior).
    """

    def __init__(self, dataset: Dataset, horizon: int, stats: NormStats | None = None):
        from pmp.geometry import normalized_world_pmap
        from pmp.envsim import WS_HI, WS_LO

        if dataset.total_steps == 0:
            raise ValueError("empty dataset")
        if stats is None:
            acts = np.concatenate([ep.actions for ep in dataset.episodes], axis=0)
            stats = NormStats(acts.min(axis=0), acts.max(axis=0))
        self.stats = stats
        self.horizon = horizon
        self.instructions = []
        rgb_steps = []
        pmap_steps = []
        chunks = []
        v = dataset.n_views
        intrs = [cal.intrinsics(dataset.img_w, dataset.img_h) for cal in dataset.views]
        extrs = [cal.extrinsics() for cal in dataset.views]
        for ep in dataset.episodes:
            n = ep.n_steps
            padded = np.zeros((n + horizon, ep.actions.shape[1]), dtype=np.float64)
            padded[:n] = ep.actions
            norm = normalize_actions(padded, stats)
            for s in range(n):
                self.instructions.append(ep.instruction)
                rgb_steps.append(rgb_to_unit(ep.rgb[s]).astype(np.float32))
                pm = [
                    normalized_world_pmap(ep.depth[s, vi].astype(np.float64),
                                          dataset.views[vi].d_min, dataset.views[vi].d_max,
                                          intrs[vi], extrs[vi], WS_LO, WS_HI).coords
                    for vi in range(v)
                ]
                pmap_steps.append(np.stack(pm).astype(np.float32))
                chunks.append(norm[s : s + horizon].astype(np.float32))
        self.rgb = np.stack(rgb_steps)  # (T, V, H, W, 3)
        self.pmap = np.stack(pmap_steps)  # (T, V, H, W, 3)
        self.chunks = np.stack(chunks)  # (T, H, A)

    def __len__(self):
        return self.rgb.shape[0]

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> dict:
        idx = rng.integers(0, len(self), size=batch_size)
        return {
            "rgb": self.rgb[idx],
            "pmap": self.pmap[idx],
            "instructions": [self.instructions[i] for i in idx],
            "actions": self.chunks[idx].astype(np.float64),
        }
