"""Frozen invertible patch codec between pixel space and latent token space.

A fixed orthonormal linear map per non-overlapping p x p x 3 patch, followed by
a per-channel affine normalization whose statistics are fixed at construction
from a seeded calibration batch. The codec is exactly invertible up to float
round-off, so latent tokens deliberately carry full pixel detail.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import data as datamod
from .data import DataConfig
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LatentTokens:
    tokens: np.ndarray         # (N, d_latent)
    spatial_shape: tuple       # (rows, cols) token grid per frame
    frame_count: int

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def d_latent(self) -> int:
        return int(self.tokens.shape[1])


class LatentCodec:
    """Deterministic stand-in for a learned VAE; parameters never train."""

    def __init__(self, cfg: DataConfig | None = None, seed: int = 0,
                 calibration_images: int = 48):
        self.cfg = cfg or DataConfig()
        self.cfg.validate()
        p = self.cfg.patch
        self.patch = p
        self.d_latent = 3 * p * p
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xC0DEC))))
        a = rng.normal(size=(self.d_latent, self.d_latent))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))[None, :]  # deterministic QR sign convention
        self.weight = q.astype(np.float64)

        # per-channel stats from a seeded calibration batch of rendered images
        vecs = []
        for i in range(calibration_images):
            spec = datamod.subject_spec(i % self.cfg.n_subjects, self.cfg.dataset_seed)
            img, _ = datamod.render_reference(spec, pose_seed=10_000 + i, cfg=self.cfg,
                                              zoomed=bool(i % 2))
            vecs.append(self._patchify(img.astype(np.float64)))
        y = np.concatenate(vecs, axis=0) @ self.weight.T
        self.offset = y.mean(axis=0)
        self.scale = np.maximum(y.std(axis=0), 1e-6)

    # -- helpers ---------------------------------------------------------------
    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        if frames.ndim == 3:
            frames = frames[None]
        t, h, w, c = frames.shape
        p = self.patch
        if h % p or w % p:
            raise InvalidArgumentError(f"dims {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        x = frames.reshape(t, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(t * gh * gw, p * p * c)

    def _unpatchify(self, vecs: np.ndarray, frame_count: int, gh: int, gw: int) -> np.ndarray:
        p = self.patch
        x = vecs.reshape(frame_count, gh, gw, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        out = x.reshape(frame_count, gh * p, gw * p, 3)
        return out[0] if frame_count == 1 else out

    def grid_shape(self) -> tuple:
        return (self.cfg.height // self.patch, self.cfg.width // self.patch)

    # -- public API --------------------------------------------------------------
    def encode(self, img_or_video: np.ndarray) -> LatentTokens:
        x = np.asarray(img_or_video, dtype=np.float64)
        if x.ndim not in (3, 4):
            raise InvalidArgumentError("expected (H,W,3) or (T,H,W,3)")
        frame_count = 1 if x.ndim == 3 else x.shape[0]
        h, w = (x.shape[0], x.shape[1]) if x.ndim == 3 else (x.shape[1], x.shape[2])
        p = self.patch
        if h % p or w % p:
            raise InvalidArgumentError(f"dims {h}x{w} not divisible by patch {p}")
        vecs = self._patchify(x)
        tokens = (vecs @ self.weight.T - self.offset) / self.scale
        return LatentTokens(tokens=tokens, spatial_shape=(h // p, w // p),
                            frame_count=frame_count)

    def decode(self, lat: LatentTokens) -> np.ndarray:
        gh, gw = lat.spatial_shape
        expected = gh * gw * lat.frame_count
        if lat.tokens.shape != (expected, self.d_latent):
            raise InvalidArgumentError(
                f"latent shape {lat.tokens.shape} inconsistent with "
                f"grid {lat.spatial_shape} x {lat.frame_count} frames")
        vecs = (lat.tokens * self.scale + self.offset) @ self.weight
        return self._unpatchify(vecs, lat.frame_count, gh, gw)

    def decode_clamped(self, lat: LatentTokens) -> np.ndarray:
        return np.clip(self.decode(lat), 0.0, 1.0)

    def decode_array(self, tokens: np.ndarray, frame_count: int) -> np.ndarray:
        gh, gw = self.grid_shape()
        return self.decode(LatentTokens(tokens, (gh, gw), frame_count))

    # -- serialization -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"codec.weight": self.weight, "codec.offset": self.offset,
                "codec.scale": self.scale}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.weight = arrays["codec.weight"].astype(np.float64)
        self.offset = arrays["codec.offset"].astype(np.float64)
        self.scale = arrays["codec.scale"].astype(np.float64)

    def digest(self) -> str:
        h = hashlib.sha256()
        for key in ("codec.weight", "codec.offset", "codec.scale"):
            h.update(key.encode())
            h.update(self.state_arrays()[key].astype("<f8").tobytes())
        return h.hexdigest()
