"""Frozen target encoders used as alignment anchors.

Three variants with contrasting representational biases, all over the same
patch-token grid as the latent codec:

* ``identity_sensitive`` -- tiny transformer pretrained with a token-level
  contrastive objective so tokens of the same subject cluster and tokens of
  different subjects separate. Also carries the probe heads (foreground,
  shape, color word, subject id) the analysis metrics rely on.
* ``semantic``           -- same trunk pretrained only with pooled image-level
  shape/color-word classification; token features inherit category structure
  without explicit instance separation.
* ``random_proj``        -- fixed random orthogonal patch projection, the
  untrained control.

All variants emit unit-norm token features and never receive gradients after
pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import data as datamod
from . import nn
from .data import DataConfig, SHAPE_CLASSES, COLOR_WORDS
from .errors import InvalidArgumentError, InvalidStateError
from .grad import Tensor, no_grad

ENCODER_IDS = ("identity_sensitive", "semantic", "random_proj")


@dataclass
class EncoderPretrainConfig:
    d_enc: int = 48
    heads: int = 4
    blocks: int = 2
    d_target: int = 32
    steps: int = 500
    batch: int = 16
    lr: float = 1e-3
    cos_push: float = 0.1      # cross-subject cosine above this is penalized
    aux_weight: float = 0.5
    seed: int = 0
    dtype: str = "float32"


def _patchify(img: np.ndarray, p: int) -> np.ndarray:
    h, w, c = img.shape
    gh, gw = h // p, w // p
    x = img.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, p * p * c)


def token_fg_fraction(mask: np.ndarray, p: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // p, p, w // p, p).mean(axis=(1, 3)).reshape(-1)


class _Trunk:
    """Patch transformer shared by the two pretrained variants."""

    def __init__(self, pcfg: EncoderPretrainConfig, dcfg: DataConfig, prefix: str,
                 n_subjects: int, with_probe_heads: bool, init_seed: int):
        self.pcfg = pcfg
        self.dcfg = dcfg
        self.prefix = prefix
        dt = np.dtype(pcfg.dtype)
        p = dcfg.patch
        self.n_tokens = (dcfg.height // p) * (dcfg.width // p)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((init_seed, 0xE14C))))
        s = self.params = nn.ParamStore()
        nn.init_linear(s, f"{prefix}.patch_in", 3 * p * p, pcfg.d_enc, rng, dt)
        s.add(f"{prefix}.pos", rng.normal(0, 0.02, size=(self.n_tokens, pcfg.d_enc)).astype(dt))
        self.blocks = [nn.TransformerBlock(s, f"{prefix}.block{i}", pcfg.d_enc,
                                           pcfg.heads, 2, rng, dt)
                       for i in range(pcfg.blocks)]
        nn.init_linear(s, f"{prefix}.feat", pcfg.d_enc, pcfg.d_target, rng, dt)
        self.with_probe_heads = with_probe_heads
        nn.init_linear(s, f"{prefix}.head_shape", pcfg.d_enc, len(SHAPE_CLASSES), rng, dt)
        nn.init_linear(s, f"{prefix}.head_color", pcfg.d_enc, len(COLOR_WORDS), rng, dt)
        if with_probe_heads:
            nn.init_linear(s, f"{prefix}.head_fg", pcfg.d_enc, 2, rng, dt)
            nn.init_linear(s, f"{prefix}.head_subject", pcfg.d_enc, n_subjects, rng, dt)

    def tokens(self, imgs: np.ndarray) -> Tensor:
        """(B, H, W, 3) -> trunk token states (B, N, d_enc)."""
        p = self.dcfg.patch
        vecs = np.stack([_patchify(im.astype(np.float64), p) for im in imgs])
        dt = np.dtype(self.pcfg.dtype)
        x = nn.linear(self.params, f"{self.prefix}.patch_in",
                      Tensor((vecs * 2.0 - 1.0).astype(dt)))
        x = x + self.params[f"{self.prefix}.pos"]
        for block in self.blocks:
            x, _ = block(x)
        return x

    def features(self, trunk: Tensor) -> Tensor:
        f = nn.linear(self.params, f"{self.prefix}.feat", trunk)
        return f * ((f * f).sum(axis=-1, keepdims=True) ** -0.5)


class EncoderBank:
    """Owns the three variants; pretrains, freezes, encodes, classifies."""

    def __init__(self, dcfg: DataConfig | None = None,
                 pcfg: EncoderPretrainConfig | None = None):
        self.dcfg = dcfg or DataConfig()
        self.pcfg = pcfg or EncoderPretrainConfig()
        self.dcfg.validate()
        p = self.dcfg.patch
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.pcfg.seed, 0x0F7))))
        a = rng.normal(size=(3 * p * p, 3 * p * p))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))[None, :]
        self._rand_w = q[:, :self.pcfg.d_target].astype(np.float64)  # orthonormal columns
        self._trunks: dict[str, _Trunk] = {}
        self._pretrained = False

    # -- pretraining ------------------------------------------------------------
    def _render_batch(self, rng: np.random.Generator, step: int):
        cfg, pc = self.dcfg, self.pcfg
        imgs = np.empty((pc.batch, cfg.height, cfg.width, 3), dtype=np.float32)
        masks = np.empty((pc.batch, cfg.height, cfg.width), dtype=bool)
        sids = np.empty(pc.batch, dtype=np.int64)
        for i in range(pc.batch):
            sid = int(rng.integers(cfg.n_subjects))
            spec = datamod.subject_spec(sid, cfg.dataset_seed)
            pose = int(rng.integers(2**31 - 1))
            imgs[i], masks[i] = datamod.render_reference(spec, pose, cfg,
                                                         zoomed=bool(rng.integers(2)))
            sids[i] = sid
        return imgs, masks, sids

    def _token_labels(self, masks, sids):
        p = self.dcfg.patch
        fg = np.stack([token_fg_fraction(m, p) >= 0.3 for m in masks])  # (B, N)
        shape_lab = np.array([SHAPE_CLASSES.index(
            datamod.subject_spec(int(s), self.dcfg.dataset_seed).shape_class) for s in sids])
        color_lab = np.array([datamod.color_word_index(
            datamod.subject_spec(int(s), self.dcfg.dataset_seed).color) for s in sids])
        return fg, shape_lab, color_lab

    def pretrain(self, log_every: int = 0) -> dict:
        """Train identity_sensitive and semantic variants, then freeze them."""
        pc, cfg = self.pcfg, self.dcfg
        stats = {}
        for variant in ("identity_sensitive", "semantic"):
            trunk = _Trunk(pc, cfg, f"enc.{variant}", cfg.n_subjects,
                           with_probe_heads=(variant == "identity_sensitive"),
                           init_seed=pc.seed + (0 if variant == "identity_sensitive" else 7))
            opt = nn.AdamW(trunk.params, lr=pc.lr, weight_decay=0.0)
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((pc.seed, 0x7A41, variant == "semantic"))))
            last = 0.0
            for step in range(pc.steps):
                imgs, masks, sids = self._render_batch(rng, step)
                fg, shape_lab, color_lab = self._token_labels(masks, sids)
                trunk.params.zero_grad()
                loss = self._pretrain_loss(trunk, variant, imgs, fg, shape_lab,
                                           color_lab, sids)
                loss.backward()
                opt.step()
                last = loss.item()
                if log_every and (step + 1) % log_every == 0:
                    print(f"[pretrain {variant}] step {step + 1}/{pc.steps} loss {last:.4f}")
            for _, t in trunk.params.items():
                t.requires_grad = False
                t.grad = None
            self._trunks[variant] = trunk
            stats[variant] = {"final_loss": last}
        self._pretrained = True
        return stats

    def _pretrain_loss(self, trunk, variant, imgs, fg, shape_lab, color_lab, sids):
        pc = self.pcfg
        b, n = fg.shape
        trunk_feats = trunk.tokens(imgs)                       # (B, N, d_enc)
        if variant == "semantic":
            pooled = trunk_feats.mean(axis=1)                  # all tokens
            loss = nn.cross_entropy(nn.linear(trunk.params, f"{trunk.prefix}.head_shape", pooled),
                                    shape_lab)
            loss = loss + nn.cross_entropy(
                nn.linear(trunk.params, f"{trunk.prefix}.head_color", pooled), color_lab)
            return loss

        feats = trunk.features(trunk_feats)                    # (B, N, D) unit norm
        flat = feats.reshape(b * n, pc.d_target)
        fg_idx = np.nonzero(fg.reshape(-1))[0]
        fsel = flat[fg_idx]
        subj = np.repeat(sids, n)[fg_idx]
        cos = fsel @ fsel.swapaxes(0, 1)
        same = (subj[:, None] == subj[None, :]) & ~np.eye(len(fg_idx), dtype=bool)
        diff = subj[:, None] != subj[None, :]
        same_f = same.astype(flat.dtype)
        diff_f = diff.astype(flat.dtype)
        pull = ((1.0 - cos) * same_f).sum() * (1.0 / max(same.sum(), 1))
        push = ((cos - pc.cos_push).relu() * diff_f).sum() * (1.0 / max(diff.sum(), 1))
        loss = pull + push

        tf_flat = trunk_feats.reshape(b * n, pc.d_enc)
        ce = nn.cross_entropy(nn.linear(trunk.params, f"{trunk.prefix}.head_fg", tf_flat),
                              fg.reshape(-1).astype(np.int64))
        if len(fg_idx):
            tsel = tf_flat[fg_idx]
            ce = ce + nn.cross_entropy(
                nn.linear(trunk.params, f"{trunk.prefix}.head_shape", tsel),
                np.repeat(shape_lab, n)[fg_idx])
            ce = ce + nn.cross_entropy(
                nn.linear(trunk.params, f"{trunk.prefix}.head_color", tsel),
                np.repeat(color_lab, n)[fg_idx])
        pooled = self._masked_pool(trunk_feats, fg)
        ce = ce + nn.cross_entropy(
            nn.linear(trunk.params, f"{trunk.prefix}.head_subject", pooled), sids)
        return loss + pc.aux_weight * ce

    @staticmethod
    def _masked_pool(trunk_feats: Tensor, fg: np.ndarray) -> Tensor:
        w = fg.astype(trunk_feats.dtype)
        denom = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        return (trunk_feats * Tensor(w[:, :, None])).sum(axis=1) / Tensor(denom)

    # -- inference ---------------------------------------------------------------
    def _require(self, variant: str) -> _Trunk:
        if variant not in self._trunks:
            raise InvalidStateError(f"encoder '{variant}' is not pretrained/loaded")
        return self._trunks[variant]

    def encode(self, img: np.ndarray, encoder_id: str) -> np.ndarray:
        """Unit-norm token features (N, D) for one image."""
        if encoder_id not in ENCODER_IDS:
            raise InvalidArgumentError(f"unknown encoder_id: {encoder_id}")
        img = np.asarray(img)
        if img.shape[:2] != (self.dcfg.height, self.dcfg.width):
            raise InvalidArgumentError(
                f"image shape {img.shape} does not match the {self.dcfg.height}x"
                f"{self.dcfg.width} patch grid")
        if encoder_id == "random_proj":
            vecs = _patchify(img.astype(np.float64), self.dcfg.patch) * 2.0 - 1.0
            feats = vecs @ self._rand_w
            norms = np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)
            return feats / norms
        trunk = self._require(encoder_id)
        with no_grad():
            out = trunk.features(trunk.tokens(img[None]))
        return out.data[0].astype(np.float64)

    def encode_video(self, video: np.ndarray, encoder_id: str) -> np.ndarray:
        return np.concatenate([self.encode(f, encoder_id) for f in video], axis=0)

    def encode_refs(self, refs: np.ndarray, encoder_id: str) -> np.ndarray:
        """(M, H, W, 3) -> (M, N, D)."""
        return np.stack([self.encode(r, encoder_id) for r in refs])

    # -- probe heads (identity_sensitive only) --------------------------------------
    def probe_tokens(self, img: np.ndarray) -> dict:
        """Per-token foreground probability and shape/color logits."""
        trunk = self._require("identity_sensitive")
        with no_grad():
            tf = trunk.tokens(img[None])
            fg = nn.linear(trunk.params, f"{trunk.prefix}.head_fg", tf).softmax(-1)
            shape = nn.linear(trunk.params, f"{trunk.prefix}.head_shape", tf)
            color = nn.linear(trunk.params, f"{trunk.prefix}.head_color", tf)
        return {"fg_prob": fg.data[0, :, 1], "shape_logits": shape.data[0],
                "color_logits": color.data[0]}

    def classify_subject(self, img: np.ndarray) -> int:
        """Subject-id prediction over the closed inventory (pooled fg tokens)."""
        trunk = self._require("identity_sensitive")
        with no_grad():
            tf = trunk.tokens(img[None])
            fg = nn.linear(trunk.params, f"{trunk.prefix}.head_fg", tf).softmax(-1)
            w = (fg.data[0, :, 1] > 0.5).astype(tf.dtype)
            if w.sum() == 0:
                w = np.ones_like(w)
            pooled = (tf.data[0] * w[:, None]).sum(axis=0) / w.sum()
            logits = nn.linear(trunk.params, f"{trunk.prefix}.head_subject",
                               Tensor(pooled[None]))
        return int(np.argmax(logits.data[0]))

    # -- persistence -------------------------------------------------------------------
    def state_arrays(self, variant: str) -> dict[str, np.ndarray]:
        if variant == "random_proj":
            return {"enc.random_proj.w": self._rand_w}
        trunk = self._require(variant)
        return dict(trunk.params.state_arrays())

    def digest(self, variant: str) -> str:
        return ckpt.digest(self.state_arrays(variant))

    def save(self, directory) -> dict[str, str]:
        import os
        paths = {}
        for variant in ENCODER_IDS:
            path = os.path.join(str(directory), f"encoder_{variant}.rfck")
            ckpt.save_checkpoint(path, self.state_arrays(variant))
            paths[variant] = path
        return paths

    def load(self, directory):
        import os
        for variant in ("identity_sensitive", "semantic"):
            path = os.path.join(str(directory), f"encoder_{variant}.rfck")
            if not os.path.exists(path):
                raise InvalidStateError(f"missing encoder checkpoint: {path}")
            arrays = ckpt.load_checkpoint(path)
            trunk = _Trunk(self.pcfg, self.dcfg, f"enc.{variant}", self.dcfg.n_subjects,
                           with_probe_heads=(variant == "identity_sensitive"),
                           init_seed=self.pcfg.seed)
            trunk.params.load_state_arrays(arrays)
            for _, t in trunk.params.items():
                t.requires_grad = False
            self._trunks[variant] = trunk
        rp = os.path.join(str(directory), "encoder_random_proj.rfck")
        if os.path.exists(rp):
            self._rand_w = ckpt.load_checkpoint(rp)["enc.random_proj.w"].astype(np.float64)
        self._pretrained = True
        return self
