"""Euler sampler with two-scale classifier-free guidance.

The guided velocity combines an unconditional pass, a reference-only pass and
a full-condition pass; exactly three forward evaluations per call. Projectors
and target encoders are never touched on this path (the dual-encoder-input
training mode is the deliberate exception: it needs target features as model
input at sampling time as well).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import LatentCodec, LatentTokens
from .data import PromptTokens
from .encoders import EncoderBank
from .errors import InvalidArgumentError, InvalidStateError, SamplingDivergedError
from .model import RefDiT


@dataclass
class CFGConfig:
    mu1: float = 5.0       # reference-condition guidance scale
    mu2: float = 7.5       # text-condition guidance scale
    steps: int = 20
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if not (np.isfinite(self.mu1) and np.isfinite(self.mu2)):
            raise InvalidArgumentError("guidance scales must be finite")


class Sampler:
    def __init__(self, model: RefDiT, codec: LatentCodec,
                 bank: EncoderBank | None = None, dual_input: bool = False,
                 encoder_id: str = "identity_sensitive"):
        self.model = model
        self.codec = codec
        self.dual_input = dual_input
        self.bank = bank
        self.encoder_id = encoder_id
        if dual_input and bank is None:
            raise InvalidStateError("dual-input checkpoints need target encoders at sampling")

    def _extra_for(self, refs_pixels) -> np.ndarray | None:
        if not self.dual_input or refs_pixels is None or len(refs_pixels) == 0:
            return None
        mx = self.codec.cfg.m_max
        nr = self.model.n_ref_tokens
        extra = np.zeros((1, mx, nr, self.model.mcfg.d_target))
        feats = self.bank.encode_refs(np.asarray(refs_pixels), self.encoder_id)
        extra[0, :feats.shape[0]] = feats
        return extra

    def guided_velocity(self, z_t: np.ndarray, text: PromptTokens | None,
                        ref_tokens: list | None, t: float, cfg: CFGConfig,
                        extra: np.ndarray | None = None) -> np.ndarray:
        """mu-weighted combination of (null,null), (null,refs), (text,refs)."""
        cfg.validate()
        mk = self.model.make_batch
        zb = z_t[None]
        tb = np.array([t])
        e_null = self.model.eval_velocity(mk(zb, tb, [None], [None]))[0]
        e_ref = self.model.eval_velocity(
            mk(zb, tb, [None], [ref_tokens], extra_cond=extra))[0]
        e_full = self.model.eval_velocity(
            mk(zb, tb, [text], [ref_tokens], extra_cond=extra))[0]
        return (e_null + cfg.mu1 * (e_ref - e_null) + cfg.mu2 * (e_full - e_ref))

    def sample_latents(self, text: PromptTokens | None, ref_tokens: list | None,
                       cfg: CFGConfig, extra: np.ndarray | None = None) -> np.ndarray:
        """Euler integration of the guided velocity from t=1 down to t=0."""
        cfg.validate()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((cfg.seed, 0x5A3))))
        z = rng.standard_normal((self.model.n_video_tokens, self.model.mcfg.d_latent))
        dt = 1.0 / cfg.steps
        for k in range(cfg.steps):
            t_k = 1.0 - k * dt
            v = self.guided_velocity(z, text, ref_tokens, t_k, cfg, extra=extra)
            z = z - dt * v
            if not np.all(np.isfinite(z)):
                raise SamplingDivergedError(k)
        return z

    def sample(self, text: PromptTokens | None, refs_pixels, cfg: CFGConfig) -> np.ndarray:
        """Generate a video (T, H, W, 3) in [0,1] from prompt + reference images."""
        ref_tokens = None
        if refs_pixels is not None and len(refs_pixels) > 0:
            ref_tokens = [self.codec.encode(np.asarray(r)).tokens for r in refs_pixels]
        extra = self._extra_for(refs_pixels)
        z = self.sample_latents(text, ref_tokens, cfg, extra=extra)
        lat = LatentTokens(z, self.codec.grid_shape(), self.codec.cfg.frames)
        return self.codec.decode_clamped(lat)
