"""Training loop: noise sampling, three-way condition dropout, staged
regular-then-cross schedule, decoupled-weight-decay adaptive updates,
checkpointing and newline-delimited metric records."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from . import losses
from .codec import LatentCodec
from .data import DataConfig, generate_episode, episode_seed_for, Episode
from .encoders import EncoderBank
from .errors import InvalidArgumentError, InvalidStateError, NumericalError
from .grad import Tensor
from .losses import RAConfig
from .model import RefDiT
from .nn import AdamW

LOSS_MODES = ("refalign", "refalign_no_neg", "none", "dual_input", "repa_baseline")
_ALIGN_MODES = ("refalign", "refalign_no_neg", "repa_baseline")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 16
    iters_stage1: int = 3000
    iters_stage2: int = 2400
    drop_text_p: float = 0.1
    drop_ref_p: float = 0.1
    drop_both_p: float = 0.1
    ra: RAConfig = field(default_factory=RAConfig)
    seed: int = 0
    loss_mode: str = "refalign"
    encoder_id: str = "identity_sensitive"
    ckpt_every: int = 1000

    def validate(self):
        for name in ("drop_text_p", "drop_ref_p", "drop_both_p"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise InvalidArgumentError(f"{name} must lie in [0,1]")
        if self.drop_text_p + self.drop_ref_p + self.drop_both_p > 1.0 + 1e-12:
            raise InvalidArgumentError("dropout probabilities must sum to <= 1")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidArgumentError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        self.ra.validate()
        if self.loss_mode in _ALIGN_MODES and self.ra.k_align < 1:
            raise InvalidArgumentError(f"loss_mode={self.loss_mode} requires k_align >= 1")


@dataclass
class StepLog:
    step: int
    stage: int
    rf_loss: float
    ra_pos: float | None
    ra_neg: float | None
    ra_loss: float | None
    total: float
    grad_norm: float
    lr: float


METRIC_FIELDS = ("step", "stage", "rf_loss", "ra_pos", "ra_neg", "ra_loss",
                 "total", "grad_norm", "lr")


def steplog_line(log: StepLog) -> str:
    vals = []
    for name in METRIC_FIELDS:
        v = getattr(log, name)
        vals.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
    return ",".join(vals)


class Trainer:
    def __init__(self, model: RefDiT, codec: LatentCodec, bank: EncoderBank | None,
                 tcfg: TrainConfig):
        tcfg.validate()
        if tcfg.loss_mode in _ALIGN_MODES + ("dual_input",):
            if bank is None:
                raise InvalidStateError(
                    f"loss_mode={tcfg.loss_mode} needs pretrained target encoders")
        if tcfg.loss_mode in _ALIGN_MODES and tcfg.ra.k_align != model.mcfg.k_align:
            raise InvalidArgumentError(
                f"alignment depth mismatch: ra.k_align={tcfg.ra.k_align} "
                f"vs model k_align={model.mcfg.k_align}")
        self.model = model
        self.codec = codec
        self.bank = bank
        self.tcfg = tcfg
        self.opt = AdamW(model.params, lr=tcfg.lr, beta1=tcfg.beta1,
                         beta2=tcfg.beta2, weight_decay=tcfg.weight_decay)
        self.rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((tcfg.seed, 0x7EA1))))
        self.step = 0

    # -- data --------------------------------------------------------------------
    def total_steps(self) -> int:
        return self.tcfg.iters_stage1 + self.tcfg.iters_stage2

    def stage_of(self, step: int) -> int:
        return 1 if step < self.tcfg.iters_stage1 else 2

    def draw_batch(self, step: int) -> list[Episode]:
        """Episodes for one step; per-slot seeds are step-derived so parallel
        data workers could never change the stream."""
        pair = "regular" if self.stage_of(step) == 1 else "cross"
        dcfg = self.codec.cfg
        out = []
        for slot in range(self.tcfg.batch_size):
            srng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence((self.tcfg.seed, 0x4D, step, slot))))
            m = int(srng.integers(1, dcfg.m_max + 1))
            out.append(generate_episode(episode_seed_for(self.tcfg.seed, step, slot),
                                        m, pair, dcfg))
        return out

    # -- one optimization step ------------------------------------------------------
    def train_step(self, episodes: list[Episode]) -> StepLog:
        if not episodes:
            raise InvalidArgumentError("batch must be nonempty")
        tcfg, model = self.tcfg, self.model
        b = len(episodes)
        nv, dl = model.n_video_tokens, model.mcfg.d_latent

        z0 = np.stack([self.codec.encode(ep.video).tokens for ep in episodes])
        t = np.empty(b)
        eps = np.empty((b, nv, dl))
        drop_text = np.zeros(b, dtype=bool)
        drop_ref = np.zeros(b, dtype=bool)
        for i in range(b):
            t[i] = self.rng.uniform()
            eps[i] = self.rng.standard_normal((nv, dl))
            u = self.rng.uniform()
            if u < tcfg.drop_text_p:
                drop_text[i] = True
            elif u < tcfg.drop_text_p + tcfg.drop_ref_p:
                drop_ref[i] = True
            elif u < tcfg.drop_text_p + tcfg.drop_ref_p + tcfg.drop_both_p:
                drop_text[i] = True
                drop_ref[i] = True
        z_t = (1.0 - t)[:, None, None] * z0 + t[:, None, None] * eps

        prompts = [None if drop_text[i] else ep.prompt for i, ep in enumerate(episodes)]
        ref_lists = []
        targets = []
        for i, ep in enumerate(episodes):
            if drop_ref[i]:
                ref_lists.append(None)
                targets.append(None)
            else:
                ref_lists.append([self.codec.encode(r).tokens for r in ep.refs])
                if tcfg.loss_mode in _ALIGN_MODES + ("dual_input",):
                    if tcfg.loss_mode == "repa_baseline":
                        targets.append(self.bank.encode_video(ep.video, tcfg.encoder_id))
                    else:
                        targets.append(self.bank.encode_refs(ep.refs, tcfg.encoder_id))
                else:
                    targets.append(None)

        extra = None
        if tcfg.loss_mode == "dual_input":
            mx, nr, d_t = self.codec.cfg.m_max, model.n_ref_tokens, model.mcfg.d_target
            extra = np.zeros((b, mx, nr, d_t))
            for i, ep in enumerate(episodes):
                if not drop_ref[i]:
                    extra[i, :ep.refs.shape[0]] = self.bank.encode_refs(ep.refs, tcfg.encoder_id)

        batch = model.make_batch(z_t, t, prompts, ref_lists, extra_cond=extra)
        want_ref_taps = tcfg.loss_mode in ("refalign", "refalign_no_neg") and batch.ref_mask.any()
        want_video_taps = tcfg.loss_mode == "repa_baseline" and batch.ref_mask.any()
        velocity, taps, video_taps = model.forward_batch(
            batch, want_taps=want_ref_taps, want_video_taps=want_video_taps)

        rf = losses.rf_loss(velocity, eps.astype(velocity.dtype), z0.astype(velocity.dtype))

        ra_terms, pos_vals, neg_vals = [], [], []
        if want_ref_taps:
            eff = tcfg.ra if tcfg.loss_mode == "refalign" else replace(tcfg.ra, lambda_neg=0.0)
            for i, ep in enumerate(episodes):
                if targets[i] is None:
                    continue
                m_i = ep.refs.shape[0]
                proj = model.project_taps(taps[:, i, :m_i])
                tgt = targets[i].astype(proj.dtype)
                ra_terms.append(losses.ra_loss(proj, tgt, eff))
                pos_vals.append(float(losses.ra_pos(proj, tgt).data.mean()))
                neg_vals.append(float(losses.ra_neg(proj, tgt, eff.delta).data.mean()))
        elif want_video_taps:
            for i, ep in enumerate(episodes):
                if targets[i] is None:
                    continue
                proj = model.project_taps(video_taps[:, i])
                ra_terms.append(losses.repa_loss(proj, targets[i].astype(proj.dtype)))

        ra_mean = None
        if ra_terms:
            acc = ra_terms[0]
            for term in ra_terms[1:]:
                acc = acc + term
            ra_mean = acc * (1.0 / len(ra_terms))
        total = losses.total_loss(rf, ra_mean, tcfg.ra.eta) if ra_mean is not None else rf

        comps = {"rf_loss": float(rf.data), "total": float(total.data)}
        if ra_mean is not None:
            comps["ra_loss"] = float(ra_mean.data)
        for name, val in comps.items():
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss component {name}={val} "
                                     f"at step {self.step}")

        model.params.zero_grad()
        total.backward()
        gnorm = self.opt.grad_norm()
        self.opt.step()
        self.step += 1
        return StepLog(
            step=self.step, stage=self.stage_of(self.step - 1),
            rf_loss=float(rf.data),
            ra_pos=float(np.mean(pos_vals)) if pos_vals else None,
            ra_neg=float(np.mean(neg_vals)) if neg_vals else None,
            ra_loss=float(ra_mean.data) if ra_mean is not None else None,
            total=float(total.data), grad_norm=gnorm, lr=tcfg.lr)

    # -- persistence --------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.model.params.state_arrays())
        arrays.update(self.opt.state_arrays())
        arrays.update(self.codec.state_arrays())
        arrays["rng.pcg64"] = ckpt.rng_state_array(self.rng)
        arrays["trainer.step"] = np.array([self.step], dtype=np.int64)
        return arrays

    def save(self, path):
        ckpt.save_checkpoint(path, self.state_arrays())

    def load(self, path):
        arrays = ckpt.load_checkpoint(path)
        self.model.params.load_state_arrays(
            {k: v for k, v in arrays.items() if k.startswith("dit.")})
        self.opt.load_state_arrays(arrays)
        self.codec.load_state_arrays(arrays)
        self.rng = ckpt.restore_rng(arrays["rng.pcg64"])
        self.step = int(arrays["trainer.step"][0])
        return self

    # -- full run ------------------------------------------------------------------
    def run(self, run_dir, log_every: int = 0, resume_from=None) -> str:
        """Train to completion; returns the final checkpoint path."""
        os.makedirs(run_dir, exist_ok=True)
        if resume_from is not None:
            self.load(resume_from)
        codec_before = self.codec.digest()
        bank_before = self.bank.digest("identity_sensitive") if self.bank else None
        metrics_path = os.path.join(run_dir, "metrics.csv")
        mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
        with open(metrics_path, mode) as f:
            if mode == "w":
                f.write(",".join(METRIC_FIELDS) + "\n")
            while self.step < self.total_steps():
                episodes = self.draw_batch(self.step)
                log = self.train_step(episodes)
                f.write(steplog_line(log) + "\n")
                if log_every and log.step % log_every == 0:
                    ra = f" ra={log.ra_loss:.4f}" if log.ra_loss is not None else ""
                    print(f"[train] step {log.step}/{self.total_steps()} "
                          f"stage {log.stage} rf={log.rf_loss:.4f}{ra}")
                if self.tcfg.ckpt_every and log.step % self.tcfg.ckpt_every == 0 \
                        and log.step < self.total_steps():
                    self.save(os.path.join(run_dir, f"ckpt_step{log.step}.rfck"))
        if self.codec.digest() != codec_before:
            raise InvalidStateError("codec parameters changed during training")
        if bank_before is not None and self.bank.digest("identity_sensitive") != bank_before:
            raise InvalidStateError("target encoder parameters changed during training")
        final = os.path.join(run_dir, "ckpt_final.rfck")
        self.save(final)
        return final
