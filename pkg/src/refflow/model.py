"""Reference-conditioned velocity transformer.

One joint self-attention stack over [noisy video tokens | reference tokens |
(optional extra condition tokens) | text tokens], with segment and
per-reference-slot embeddings, timestep conditioning added to every token,
per-block reference-token taps from the first K blocks and per-block
projection MLPs used only at training time.

Sequences use a fixed layout padded to M_max reference slots; absent slots
are masked out of attention, which is numerically identical to removing them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataConfig, VOCAB_SIZE, PromptTokens
from .codec import LatentTokens
from .errors import InvalidArgumentError, InvalidStateError
from .grad import Tensor, concat, embedding, no_grad
from . import nn


@dataclass
class ModelConfig:
    l_blocks: int = 12          # total transformer blocks
    k_align: int = 4            # leading blocks whose reference taps are aligned
    d_model: int = 64
    heads: int = 4
    d_latent: int = 48
    d_text: int = 32
    d_target: int = 32          # target-encoder feature width
    mlp_ratio: int = 4
    attn_mode: str = "joint"    # "joint" | "ref-isolated"
    dtype: str = "float32"
    seed: int = 0

    def validate(self):
        if not (0 <= self.k_align <= self.l_blocks):
            raise InvalidArgumentError("need 0 <= k_align <= l_blocks")
        if self.d_model % self.heads:
            raise InvalidArgumentError("d_model must be divisible by heads")
        if self.attn_mode not in ("joint", "ref-isolated"):
            raise InvalidArgumentError(f"unknown attn_mode {self.attn_mode}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class Batch:
    """Model inputs in fixed layout. All arrays are plain numpy."""
    z_t: np.ndarray            # (B, Nv, d_latent)
    t: np.ndarray              # (B,)
    text_ids: np.ndarray       # (B, L_text) int32, PAD-filled
    text_len: np.ndarray       # (B,) number of real tokens
    text_drop: np.ndarray      # (B,) bool, null text condition
    refs: np.ndarray           # (B, M_max, N_ref, d_latent), zero-filled pad
    ref_mask: np.ndarray       # (B, M_max) bool, which slots hold a reference
    extra_cond: np.ndarray | None = None   # (B, M_max, N_ref, d_target)


class RefDiT:
    """Toy diffusion transformer with reference-token taps."""

    SEG_VIDEO, SEG_REF, SEG_EXTRA, SEG_TEXT = 0, 1, 2, 3

    def __init__(self, mcfg: ModelConfig | None = None, dcfg: DataConfig | None = None):
        self.mcfg = mcfg or ModelConfig()
        self.dcfg = dcfg or DataConfig()
        self.mcfg.validate()
        self.dcfg.validate()
        p = self.dcfg.patch
        if self.mcfg.d_latent != 3 * p * p:
            raise InvalidArgumentError(
                f"d_latent {self.mcfg.d_latent} != 3*patch^2 = {3 * p * p}")
        self.grid = (self.dcfg.height // p, self.dcfg.width // p)
        self.n_ref_tokens = self.grid[0] * self.grid[1]
        self.n_video_tokens = self.dcfg.frames * self.n_ref_tokens
        self.forward_count = 0

        m = self.mcfg
        dt = m.np_dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((m.seed, 0xD17))))
        s = self.params = nn.ParamStore()
        nn.init_linear(s, "dit.latent_in", m.d_latent, m.d_model, rng, dt)
        nn.init_linear(s, "dit.extra_in", m.d_target, m.d_model, rng, dt)
        s.add("dit.text_emb", rng.normal(0, 0.02, size=(VOCAB_SIZE, m.d_text)).astype(dt))
        nn.init_linear(s, "dit.text_in", m.d_text, m.d_model, rng, dt)
        s.add("dit.null_text", rng.normal(0, 0.02, size=(m.d_text,)).astype(dt))
        s.add("dit.pos_video", rng.normal(0, 0.02, size=(self.n_video_tokens, m.d_model)).astype(dt))
        s.add("dit.pos_ref", rng.normal(0, 0.02, size=(self.n_ref_tokens, m.d_model)).astype(dt))
        s.add("dit.pos_text", rng.normal(0, 0.02, size=(self.dcfg.l_text, m.d_model)).astype(dt))
        s.add("dit.seg", rng.normal(0, 0.02, size=(4, m.d_model)).astype(dt))
        s.add("dit.ref_index", rng.normal(0, 0.02, size=(self.dcfg.m_max, m.d_model)).astype(dt))
        nn.init_linear(s, "dit.time.fc1", m.d_model, m.d_model, rng, dt)
        nn.init_linear(s, "dit.time.fc2", m.d_model, m.d_model, rng, dt)
        self.blocks = [nn.TransformerBlock(s, f"dit.block{i}", m.d_model, m.heads,
                                           m.mlp_ratio, rng, dt)
                       for i in range(m.l_blocks)]
        nn.init_layernorm(s, "dit.head_ln", m.d_model, dt)
        nn.init_linear(s, "dit.head", m.d_model, m.d_latent, rng, dt, zero=True)
        for l in range(m.k_align):
            nn.init_linear(s, f"dit.proj{l}.fc1", m.d_model, m.d_model, rng, dt)
            nn.init_linear(s, f"dit.proj{l}.fc2", m.d_model, m.d_target, rng, dt)

    # -- sequence layout ----------------------------------------------------------
    def _segment_bounds(self, with_extra: bool):
        nv, nr, mx = self.n_video_tokens, self.n_ref_tokens, self.dcfg.m_max
        ref_start = nv
        ref_end = ref_start + mx * nr
        extra_end = ref_end + (mx * nr if with_extra else 0)
        text_end = extra_end + self.dcfg.l_text
        return ref_start, ref_end, extra_end, text_end

    def _allow_matrix(self, with_extra: bool) -> np.ndarray:
        """Static query->key allowance for the configured attention mode."""
        ref_start, ref_end, extra_end, s_total = self._segment_bounds(with_extra)
        allow = np.ones((s_total, s_total), dtype=bool)
        if self.mcfg.attn_mode == "ref-isolated":
            nr = self.n_ref_tokens
            for j in range(self.dcfg.m_max):
                q0 = ref_start + j * nr
                allow[q0:q0 + nr, :] = False
                allow[q0:q0 + nr, q0:q0 + nr] = True
        return allow

    def _attention_mask(self, batch: Batch, with_extra: bool) -> np.ndarray:
        b = batch.z_t.shape[0]
        ref_start, ref_end, extra_end, s_total = self._segment_bounds(with_extra)
        nr = self.n_ref_tokens
        key_mask = np.zeros((b, s_total), dtype=bool)
        key_mask[:, :self.n_video_tokens] = True
        for j in range(self.dcfg.m_max):
            cols = slice(ref_start + j * nr, ref_start + (j + 1) * nr)
            key_mask[:, cols] = batch.ref_mask[:, j:j + 1]
            if with_extra:
                cols2 = slice(ref_end + j * nr, ref_end + (j + 1) * nr)
                key_mask[:, cols2] = batch.ref_mask[:, j:j + 1]
        pos = np.arange(self.dcfg.l_text)
        real = pos[None, :] < batch.text_len[:, None]
        text_keys = np.where(batch.text_drop[:, None], pos[None, :] == 0, real)
        key_mask[:, extra_end:extra_end + self.dcfg.l_text] = text_keys

        allow = self._allow_matrix(with_extra)
        full = allow[None, :, :] & key_mask[:, None, :]
        diag = np.arange(s_total)
        full[:, diag, diag] = True  # empty slots still attend to themselves
        mask = np.where(full, 0.0, -1e30).astype(self.mcfg.np_dtype)
        return mask[:, None, :, :]

    # -- forward -------------------------------------------------------------------
    def forward_batch(self, batch: Batch, want_taps: bool = False,
                      tap_blocks: int | None = None, want_video_taps: bool = False):
        """Velocity prediction plus optional per-block taps.

        Returns (velocity Tensor (B, Nv, d_latent),
                 ref taps Tensor (K, B, M_max, N_ref, d_model) or None,
                 video taps Tensor (K, B, Nv, d_model) or None).

        ``tap_blocks`` overrides how many leading blocks are recorded
        (defaults to the configured alignment depth).
        """
        m, dcfg = self.mcfg, self.dcfg
        dt = m.np_dtype
        b, nv, dl = batch.z_t.shape
        if nv != self.n_video_tokens or dl != m.d_latent:
            raise InvalidArgumentError(f"z_t shape {batch.z_t.shape} inconsistent with model")
        if batch.refs.shape[1] != dcfg.m_max or batch.refs.shape[2] != self.n_ref_tokens:
            raise InvalidArgumentError("reference tensor inconsistent with model layout")
        if np.any(batch.t < 0) or np.any(batch.t > 1):
            raise InvalidArgumentError("t must lie in [0,1]")
        with_extra = batch.extra_cond is not None
        self.forward_count += 1
        s = self.params
        nr, mx = self.n_ref_tokens, dcfg.m_max

        x_vid = nn.linear(s, "dit.latent_in", Tensor(batch.z_t.astype(dt)))
        x_vid = x_vid + s["dit.pos_video"] + s["dit.seg"][self.SEG_VIDEO]

        refs_flat = Tensor(batch.refs.astype(dt).reshape(b, mx * nr, dl))
        x_ref = nn.linear(s, "dit.latent_in", refs_flat)
        pos_ref = s["dit.pos_ref"]
        ref_idx = s["dit.ref_index"]
        tile_pos = concat([pos_ref for _ in range(mx)], axis=0)
        tile_idx = concat([ref_idx[j:j + 1].reshape(1, m.d_model) * np.ones((nr, 1), dtype=dt)
                           for j in range(mx)], axis=0)
        x_ref = x_ref + tile_pos + tile_idx + s["dit.seg"][self.SEG_REF]

        segs = [x_vid, x_ref]
        if with_extra:
            extra_flat = Tensor(batch.extra_cond.astype(dt).reshape(b, mx * nr, m.d_target))
            x_extra = nn.linear(s, "dit.extra_in", extra_flat)
            x_extra = x_extra + tile_pos + tile_idx + s["dit.seg"][self.SEG_EXTRA]
            segs.append(x_extra)

        emb = embedding(s["dit.text_emb"], batch.text_ids)
        drop = batch.text_drop.astype(dt)[:, None, None]
        null = s["dit.null_text"].reshape(1, 1, m.d_text)
        emb = emb * (1.0 - drop) + null * drop
        x_text = nn.linear(s, "dit.text_in", emb) + s["dit.pos_text"] + s["dit.seg"][self.SEG_TEXT]
        segs.append(x_text)

        x = concat(segs, axis=1)
        tfeat = nn.sinusoidal_features(batch.t, m.d_model, dt)
        temb = nn.linear(s, "dit.time.fc2",
                         nn.linear(s, "dit.time.fc1", Tensor(tfeat)).silu())
        x = x + temb.reshape(b, 1, m.d_model)

        mask = self._attention_mask(batch, with_extra)
        ref_start, ref_end, _, _ = self._segment_bounds(with_extra)
        n_tap = m.k_align if tap_blocks is None else tap_blocks
        taps, vtaps = [], []
        for i, block in enumerate(self.blocks):
            x, tap = block(x, mask)
            if i < n_tap:
                if want_taps:
                    taps.append(tap[:, ref_start:ref_end].reshape(b, mx, nr, m.d_model))
                if want_video_taps:
                    vtaps.append(tap[:, :nv])

        velocity = nn.linear(s, "dit.head",
                             nn.layer_norm(s, "dit.head_ln", x[:, :nv]))
        tap_stack = nn.stack_rows(taps) if taps else None
        vtap_stack = nn.stack_rows(vtaps) if vtaps else None
        return velocity, tap_stack, vtap_stack

    def forward(self, z_t: LatentTokens, text: PromptTokens | None,
                refs: list[LatentTokens], t: float, want_taps: bool = False):
        """Single-episode forward matching the documented interface.

        Returns (velocity LatentTokens, taps (K, M, N, d_model) numpy or None).
        """
        batch = self.make_batch(z_t.tokens[None], np.array([t]),
                                [text], [[r.tokens for r in refs]])
        vel, taps, _ = self.forward_batch(batch, want_taps=want_taps)
        out = LatentTokens(vel.data[0].astype(np.float64),
                           z_t.spatial_shape, z_t.frame_count)
        m_real = len(refs)
        if not want_taps or taps is None or m_real == 0:
            return out, None
        return out, taps.data[:, 0, :m_real]

    # -- batch assembly ---------------------------------------------------------------
    def make_batch(self, z_t: np.ndarray, t: np.ndarray,
                   prompts: list, ref_token_lists: list,
                   text_drop: np.ndarray | None = None,
                   extra_cond: np.ndarray | None = None) -> Batch:
        """Pack per-sample prompts and variable-count reference tokens."""
        b = z_t.shape[0]
        mx, nr, dl = self.dcfg.m_max, self.n_ref_tokens, self.mcfg.d_latent
        text_ids = np.zeros((b, self.dcfg.l_text), dtype=np.int64)
        text_len = np.zeros(b, dtype=np.int64)
        for i, pr in enumerate(prompts):
            if pr is None:
                continue
            ids = pr.token_ids if isinstance(pr, PromptTokens) else np.asarray(pr)
            n = min(len(ids), self.dcfg.l_text)
            text_ids[i, :n] = ids[:n]
            text_len[i] = n
        drop = np.zeros(b, dtype=bool) if text_drop is None else np.asarray(text_drop, dtype=bool)
        for i, pr in enumerate(prompts):
            if pr is None:
                drop[i] = True
        refs = np.zeros((b, mx, nr, dl), dtype=np.float64)
        ref_mask = np.zeros((b, mx), dtype=bool)
        for i, toks in enumerate(ref_token_lists):
            if toks is None:
                continue
            if len(toks) > mx:
                raise InvalidArgumentError(f"{len(toks)} references exceed m_max={mx}")
            for j, tok in enumerate(toks):
                if tok.shape != (nr, dl):
                    raise InvalidArgumentError(f"reference tokens shape {tok.shape} != ({nr},{dl})")
                refs[i, j] = tok
                ref_mask[i, j] = True
        return Batch(z_t=z_t, t=np.asarray(t, dtype=np.float64),
                     text_ids=text_ids, text_len=text_len, text_drop=drop,
                     refs=refs, ref_mask=ref_mask, extra_cond=extra_cond)

    # -- projection ------------------------------------------------------------------
    def project_taps(self, taps) -> Tensor:
        """Per-block two-layer map (affine, SiLU, affine) to target width."""
        k = self.mcfg.k_align
        t = taps if isinstance(taps, Tensor) else Tensor(np.asarray(taps, dtype=self.mcfg.np_dtype))
        if t.shape[0] != k:
            raise InvalidStateError(
                f"taps carry {t.shape[0]} blocks but {k} projectors are configured")
        s = self.params
        outs = []
        for l in range(k):
            h = nn.linear(s, f"dit.proj{l}.fc1", t[l]).silu()
            outs.append(nn.linear(s, f"dit.proj{l}.fc2", h))
        return nn.stack_rows(outs)

    # -- misc ---------------------------------------------------------------------------
    def eval_velocity(self, batch: Batch) -> np.ndarray:
        """Grad-free velocity for the sampling path (projectors never touched)."""
        with no_grad():
            vel, _, _ = self.forward_batch(batch, want_taps=False)
        return vel.data
