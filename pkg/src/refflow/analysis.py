"""Quantitative proxies for the qualitative failure modes: feature
separability, copy-paste artifact score, multi-subject confusion, 2D
embedding export, and whole-run evaluation used by the ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import data as datamod
from .codec import LatentCodec
from .data import DataConfig, Episode, generate_episode, SHAPE_CLASSES
from .encoders import EncoderBank
from .errors import DegenerateInputError, InvalidArgumentError, SamplingDivergedError
from .grad import no_grad
from .model import RefDiT
from .sampler import CFGConfig, Sampler


# -- separability ----------------------------------------------------------------

@dataclass(frozen=True)
class SeparabilityReport:
    intra_cos: float
    inter_cos: float
    gap: float
    silhouette: float


def separability(features: np.ndarray, labels: np.ndarray) -> SeparabilityReport:
    """Exhaustive pairwise-cosine cluster statistics over labeled tokens."""
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
        raise InvalidArgumentError("features must be (n, D) with one label per row")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise InvalidArgumentError("separability needs >= 2 subjects")
    if counts.min() < 2:
        raise InvalidArgumentError("separability needs >= 2 tokens per subject")
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("zero-norm token in separability input")
    unit = feats / norms[:, None]
    cos = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = float(cos[same & off].mean())
    inter = float(cos[~same].mean())

    dist = 1.0 - cos
    sil_vals = np.zeros(len(labels))
    for i in range(len(labels)):
        own = same[i] & off[i]
        a = dist[i, own].mean() if own.any() else 0.0
        b = np.inf
        for u in uniq:
            if u == labels[i]:
                continue
            b = min(b, dist[i, labels == u].mean())
        denom = max(a, b)
        sil_vals[i] = 0.0 if (not own.any() or denom == 0) else (b - a) / denom
    return SeparabilityReport(intra_cos=intra, inter_cos=inter, gap=intra - inter,
                              silhouette=float(sil_vals.mean()))


# -- copy-paste ---------------------------------------------------------------------

def _ncc(window: np.ndarray, ref: np.ndarray) -> float:
    w = window.reshape(-1) - window.mean()
    r = ref.reshape(-1) - ref.mean()
    denom = np.sqrt((w * w).sum() * (r * r).sum())
    if denom < 1e-12:
        return 0.0  # zero-variance convention
    return float((w * r).sum() / denom)


def copy_paste_score(video: np.ndarray, refs: np.ndarray) -> float:
    """Max normalized cross-correlation of each reference against same-size
    sliding windows of every frame; 1.0 means a verbatim copy. In [0, 1]."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 3:
        video = video[None]
    best = -1.0
    for ref in np.asarray(refs, dtype=np.float64):
        rh, rw = ref.shape[:2]
        for frame in video:
            fh, fw = frame.shape[:2]
            if rh > fh or rw > fw:
                raise InvalidArgumentError("reference larger than frame")
            for y in range(fh - rh + 1):
                for x in range(fw - rw + 1):
                    best = max(best, _ncc(frame[y:y + rh, x:x + rw], ref))
    return float(min(max(best, 0.0), 1.0))


# -- multi-subject confusion -----------------------------------------------------------

@dataclass
class ConfusionReport:
    score: float
    instances: int
    mixed: int
    matched: int
    no_detection_frames: int


def confusion_report(videos, episodes, bank: EncoderBank,
                     min_tokens: int = 2) -> ConfusionReport:
    """Fraction of detected subject instances whose shape matches one
    reference subject while the color matches the other.

    Frames where the detector finds no instance at all count toward the score
    and are also reported separately. Requires M=2 episodes whose subjects
    differ in both shape class and color word.
    """
    instances = mixed = matched = no_det = 0
    gh = bank.dcfg.height // bank.dcfg.patch
    gw = bank.dcfg.width // bank.dcfg.patch
    for video, ep in zip(videos, episodes):
        if len(ep.subjects) != 2:
            raise InvalidArgumentError("confusion_report needs M=2 episodes")
        a, b = ep.subjects
        sa, sb = SHAPE_CLASSES.index(a.shape_class), SHAPE_CLASSES.index(b.shape_class)
        ca, cb = datamod.color_word_index(a.color), datamod.color_word_index(b.color)
        if sa == sb or ca == cb:
            raise InvalidArgumentError(
                "confusion eval needs subjects distinct in shape and color word")
        for frame in video:
            probe = bank.probe_tokens(frame)
            fg = (probe["fg_prob"] > 0.5).reshape(gh, gw)
            lab, n_comp = ndimage.label(fg)
            lab = lab.reshape(-1)
            found = 0
            for comp in range(1, n_comp + 1):
                sel = lab == comp
                if sel.sum() < min_tokens:
                    continue
                found += 1
                instances += 1
                shape_pred = int(np.argmax(probe["shape_logits"][sel].mean(axis=0)))
                color_pred = int(np.argmax(probe["color_logits"][sel].mean(axis=0)))
                shape_owner = {sa: 0, sb: 1}.get(shape_pred)
                color_owner = {ca: 0, cb: 1}.get(color_pred)
                if shape_owner is not None and color_owner is not None:
                    if shape_owner != color_owner:
                        mixed += 1
                    else:
                        matched += 1
            if found == 0:
                no_det += 1
    denom = instances + no_det
    score = (mixed + no_det) / denom if denom else 1.0
    return ConfusionReport(score=float(score), instances=instances, mixed=mixed,
                           matched=matched, no_detection_frames=no_det)


def confusion_score(videos, episodes, bank: EncoderBank) -> float:
    return confusion_report(videos, episodes, bank).score


# -- 2D embedding export -----------------------------------------------------------------

def embedding_export(features: np.ndarray, labels, path) -> np.ndarray:
    """Deterministic 2-component principal projection, written as CSV."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 3:
        raise InvalidArgumentError("embedding export needs >= 3 token rows")
    centered = feats - feats.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > 1e-10 * max(s[0], 1e-30)).sum())
    if len(s) < 2:
        vt = np.vstack([vt, np.zeros((2 - len(s), feats.shape[1]))])
    coords = centered @ vt[:2].T
    if rank < 2:
        coords[:, 1] = 0.0
    for j in range(2):  # sign convention: largest-|coordinate| entry positive
        i = int(np.argmax(np.abs(coords[:, j])))
        if coords[i, j] < 0:
            coords[:, j] = -coords[:, j]
    with open(path, "w") as f:
        f.write(f"# rank_deficient={'true' if rank < 2 else 'false'}\n")
        f.write("label,x,y\n")
        for lab, (x, y) in zip(labels, coords):
            f.write(f"{lab},{x!r},{y!r}\n")
    return coords


# -- whole-run evaluation ---------------------------------------------------------------

@dataclass
class EvalConfig:
    n_episodes: int = 6        # per pair kind
    base_seed: int = 9000
    taps_t: float = 0.5
    cfg: CFGConfig = field(default_factory=CFGConfig)

    def validate(self):
        self.cfg.validate()
        if self.n_episodes < 1:
            raise InvalidArgumentError("n_episodes must be >= 1")


def eval_episode_set(dcfg: DataConfig, n: int, pair_kind: str,
                     base_seed: int) -> list[Episode]:
    """First n M=2 episodes (scanning seeds) whose subjects differ in both
    shape class and color word, so confusion stays well defined."""
    out = []
    seed = base_seed
    while len(out) < n:
        ep = generate_episode(seed, 2, pair_kind, dcfg)
        a, b = ep.subjects
        if (a.shape_class != b.shape_class
                and datamod.color_word_index(a.color) != datamod.color_word_index(b.color)):
            out.append(ep)
        seed += 1
    return out


def tap_token_sets(model: RefDiT, codec: LatentCodec, episodes, taps_t: float,
                   seed: int = 1234):
    """Labeled reference-tap tokens for separability evaluation.

    Raw taps always come from block 1 so runs with different alignment depths
    stay comparable; projected taps pool all K aligned blocks (None if K=0).
    Returns (proj_tokens, proj_labels, raw_tokens, raw_labels).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x7A9))))
    k = model.mcfg.k_align
    proj_rows, proj_labels, raw_rows, raw_labels = [], [], [], []
    for ep in episodes:
        z0 = codec.encode(ep.video).tokens[None]
        eps = rng.standard_normal(z0.shape)
        z_t = (1 - taps_t) * z0 + taps_t * eps
        ref_tokens = [codec.encode(r).tokens for r in ep.refs]
        batch = model.make_batch(z_t, np.array([taps_t]), [ep.prompt], [ref_tokens])
        with no_grad():
            _, taps, _ = model.forward_batch(batch, want_taps=True,
                                             tap_blocks=max(k, 1))
            proj = model.project_taps(taps) if k >= 1 else None
        m = len(ep.subjects)
        sids = [s.subject_id for s in ep.subjects]
        raw = taps.data[0, 0, :m]                    # (M, N, d_model)
        n_tok = raw.shape[1]
        for j in range(m):
            raw_rows.append(raw[j])
            raw_labels.extend([sids[j]] * n_tok)
        if proj is not None:
            pdata = proj.data[:, 0, :m]              # (K, M, N, D)
            for l in range(k):
                for j in range(m):
                    proj_rows.append(pdata[l, j])
                    proj_labels.extend([sids[j]] * n_tok)
    raw_tokens = np.concatenate(raw_rows, axis=0)
    proj_tokens = np.concatenate(proj_rows, axis=0) if proj_rows else None
    return (proj_tokens, np.asarray(proj_labels), raw_tokens, np.asarray(raw_labels))


def evaluate_model(model: RefDiT, codec: LatentCodec, bank: EncoderBank,
                   ecfg: EvalConfig, dual_input: bool = False) -> dict:
    """Fixed seeded evaluation of one trained model; returns one metrics row."""
    ecfg.validate()
    dcfg = codec.cfg
    cross_eps = eval_episode_set(dcfg, ecfg.n_episodes, "cross", ecfg.base_seed)
    reg_eps = eval_episode_set(dcfg, ecfg.n_episodes, "regular", ecfg.base_seed + 50_000)
    sampler = Sampler(model, codec, bank=bank if dual_input else None,
                      dual_input=dual_input)

    diverged = 0

    def _sample(ep: Episode, idx: int) -> np.ndarray:
        nonlocal diverged
        cfg_i = replace(ecfg.cfg, seed=ecfg.cfg.seed + idx)
        try:
            return sampler.sample(ep.prompt, ep.refs, cfg_i)
        except SamplingDivergedError:
            diverged += 1
            return np.zeros_like(ep.video)

    videos_cross = [_sample(ep, i) for i, ep in enumerate(cross_eps)]
    videos_reg = [_sample(ep, 10_000 + i) for i, ep in enumerate(reg_eps)]

    cp_cross = float(np.mean([copy_paste_score(v, ep.refs)
                              for v, ep in zip(videos_cross, cross_eps)]))
    cp_reg = float(np.mean([copy_paste_score(v, ep.refs)
                            for v, ep in zip(videos_reg, reg_eps)]))
    conf = confusion_report(videos_cross, cross_eps, bank)

    proj_tokens, proj_labels, raw_tokens, raw_labels = tap_token_sets(
        model, codec, cross_eps, ecfg.taps_t, seed=ecfg.base_seed)
    gap_raw = separability(raw_tokens, raw_labels).gap
    gap_proj = (separability(proj_tokens, proj_labels).gap
                if proj_tokens is not None else float("nan"))

    composite = gap_raw + (1.0 - cp_cross) + (1.0 - conf.score)
    return {
        "copy_paste_cross": cp_cross,
        "copy_paste_regular": cp_reg,
        "confusion": conf.score,
        "confusion_instances": conf.instances,
        "confusion_no_detection": conf.no_detection_frames,
        "gap_proj": gap_proj,
        "gap_raw": gap_raw,
        "composite": composite,
        "diverged": diverged,
    }
