"""Deterministic synthetic multi-subject episodes.

A closed world of textured geometric subjects moving over dark procedural
backgrounds. Every generator here is a pure function of its seed arguments:
identical seeds give bit-identical arrays, which the training, evaluation and
caching layers all rely on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

# -- closed prompt vocabulary -------------------------------------------------

SHAPE_CLASSES = ("circle", "square", "triangle", "star")

COLOR_WORDS = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white")
PALETTE = np.array([
    [0.90, 0.15, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.92],
])

ACTION_WORDS = ("slide_left", "slide_right", "slide_up", "slide_down",
                "orbit_cw", "orbit_ccw", "grow", "shrink")

PAD, SEP, AND = 0, 1, 2
_SPECIALS = ("<pad>", "<sep>", "and")
_SHAPE_BASE = len(_SPECIALS)
_COLOR_BASE = _SHAPE_BASE + len(SHAPE_CLASSES)
_ACTION_BASE = _COLOR_BASE + len(COLOR_WORDS)
VOCAB = _SPECIALS + SHAPE_CLASSES + COLOR_WORDS + ACTION_WORDS
VOCAB_SIZE = 64  # closed vocabulary, trailing ids reserved

_FG_THRESHOLD = 0.40  # backgrounds stay below ~0.33 luminance by construction


@dataclass(frozen=True)
class SubjectSpec:
    """Ground-truth identity parameters of one synthetic subject."""
    subject_id: int
    shape_class: str
    color: np.ndarray          # RGB in [0,1]
    texture_seed: int
    scale: float               # in [0.3, 1.0]


@dataclass(frozen=True)
class PromptTokens:
    token_ids: np.ndarray      # int32, length <= l_text

    def __len__(self):
        return int(self.token_ids.shape[0])


@dataclass(frozen=True)
class Episode:
    prompt: PromptTokens
    refs: np.ndarray           # (M, H, W, 3) float32 in [0,1]
    video: np.ndarray          # (T, H, W, 3) float32 in [0,1]
    subjects: tuple            # tuple of SubjectSpec, length M
    pair_kind: str             # "regular" | "cross"


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    frames: int = 8
    m_max: int = 3
    patch: int = 4
    n_subjects: int = 32       # closed subject inventory per dataset seed
    l_text: int = 16
    regular_ratio: float = 0.6  # regular:cross mix when drawing mixed batches
    dataset_seed: int = 0

    def validate(self):
        if self.height % self.patch or self.width % self.patch:
            raise InvalidArgumentError("image dims must be divisible by patch size")
        if not (1 <= self.m_max):
            raise InvalidArgumentError("m_max must be >= 1")


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


# -- subjects -----------------------------------------------------------------

def subject_spec(subject_id: int, dataset_seed: int = 0) -> SubjectSpec:
    """Identity table lookup: subject_id + dataset seed determine everything."""
    if subject_id < 0:
        raise InvalidArgumentError("subject_id must be non-negative")
    rng = _rng(dataset_seed, 0x5EED, subject_id)
    shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
    base = PALETTE[int(rng.integers(len(PALETTE)))]
    color = np.clip(base + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    scale = float(rng.uniform(0.3, 1.0))
    texture_seed = int(rng.integers(2**31 - 1))
    return SubjectSpec(subject_id, shape, color.astype(np.float64), texture_seed, scale)


def color_word_index(color: np.ndarray) -> int:
    d = np.sum((PALETTE - np.asarray(color)[None, :]) ** 2, axis=1)
    return int(np.argmin(d))


def prompt_for(subjects, actions, l_text: int) -> PromptTokens:
    ids = []
    for i, (spec, action) in enumerate(zip(subjects, actions)):
        if i > 0:
            ids.append(AND)
        ids.append(_COLOR_BASE + color_word_index(spec.color))
        ids.append(_SHAPE_BASE + SHAPE_CLASSES.index(spec.shape_class))
        ids.append(_ACTION_BASE + ACTION_WORDS.index(action))
    ids = ids[:l_text]
    return PromptTokens(np.asarray(ids, dtype=np.int32))


# -- rendering ----------------------------------------------------------------

def _background(bg_seed: int, h: int, w: int) -> np.ndarray:
    rng = _rng(0xB6, bg_seed)
    base = rng.uniform(0.05, 0.20, size=3)
    gdir = rng.uniform(-0.06, 0.06, size=(2, 3))
    fx, fy = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    tex = 0.025 * np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + phase)
    img = (base[None, None, :]
           + gdir[0][None, None, :] * (xx / w)[:, :, None]
           + gdir[1][None, None, :] * (yy / h)[:, :, None]
           + tex[:, :, None])
    return np.clip(img, 0.0, 0.32)


def _polygon_sdf(xx, yy, verts):
    """Signed distance surrogate for a convex polygon (max of half-plane dists)."""
    d = None
    n = len(verts)
    cx = sum(v[0] for v in verts) / n
    cy = sum(v[1] for v in verts) / n
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        nx, ny = ey, -ex
        norm = np.hypot(nx, ny)
        nx, ny = nx / norm, ny / norm
        # orient outward relative to the centroid
        if nx * (cx - x0) + ny * (cy - y0) > 0:
            nx, ny = -nx, -ny
        di = nx * (xx - x0) + ny * (yy - y0)
        d = di if d is None else np.maximum(d, di)
    return d


def _shape_sdf(shape: str, xx, yy, cx, cy, r, theta):
    if shape == "circle":
        return np.hypot(xx - cx, yy - cy) - r
    if shape == "square":
        c, s = np.cos(-theta), np.sin(-theta)
        xr = c * (xx - cx) - s * (yy - cy)
        yr = s * (xx - cx) + c * (yy - cy)
        return np.maximum(np.abs(xr), np.abs(yr)) - 0.9 * r

    def tri(rot, rad):
        angs = rot + np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        verts = [(cx + rad * np.cos(a), cy + rad * np.sin(a)) for a in angs]
        return _polygon_sdf(xx, yy, verts)

    if shape == "triangle":
        return tri(theta, 1.2 * r)
    if shape == "star":
        return np.minimum(tri(theta, 1.25 * r), tri(theta + np.pi / 3, 1.25 * r))
    raise InvalidArgumentError(f"unknown shape class: {shape}")


def _subject_texture(texture_seed: int, xx, yy, cx, cy):
    rng = _rng(0x7E, texture_seed)
    fx, fy = rng.uniform(0.12, 0.40, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    return 1.0 + 0.12 * np.sin(2 * np.pi * (fx * (xx - cx) + fy * (yy - cy)) + phase)


def draw_subject(img: np.ndarray, spec: SubjectSpec, cx: float, cy: float,
                 radius: float, theta: float):
    """Composite one subject onto img in place; returns its alpha mask."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    d = _shape_sdf(spec.shape_class, xx, yy, cx, cy, radius, theta)
    alpha = np.clip(0.5 - d / 1.2, 0.0, 1.0)
    tex = _subject_texture(spec.texture_seed, xx, yy, cx, cy)
    fill = np.clip(spec.color[None, None, :] * tex[:, :, None], 0.0, 1.0)
    img[:] = img * (1.0 - alpha[:, :, None]) + fill * alpha[:, :, None]
    return alpha > 0.5


def _lane(i, m, h, w, r):
    x0 = i * w / m + r + 1.5
    x1 = (i + 1) * w / m - r - 1.5
    y0, y1 = r + 1.5, h - r - 1.5
    if x1 < x0:
        x0 = x1 = (x0 + x1) / 2
    if y1 < y0:
        y0 = y1 = (y0 + y1) / 2
    return x0, x1, y0, y1


def _effective_radius(spec: SubjectSpec, m: int, h: int, w: int) -> float:
    r = 3.0 + 4.5 * spec.scale
    return float(min(r, w / (2 * m) - 2.2, h / 2 - 2.2))


def _trajectory(action: str, rng: np.random.Generator, lane, t_frames: int):
    """Per-frame (cx, cy, radius_mult) for one subject inside its lane box."""
    x0, x1, y0, y1 = lane
    u = np.linspace(0.0, 1.0, t_frames) if t_frames > 1 else np.zeros(1)
    px = rng.uniform(x0, x1)
    py = rng.uniform(y0, y1)
    rmult = np.ones(t_frames)
    if action == "slide_left":
        cx, cy = x1 + (x0 - x1) * u, np.full(t_frames, py)
    elif action == "slide_right":
        cx, cy = x0 + (x1 - x0) * u, np.full(t_frames, py)
    elif action == "slide_up":
        cx, cy = np.full(t_frames, px), y1 + (y0 - y1) * u
    elif action == "slide_down":
        cx, cy = np.full(t_frames, px), y0 + (y1 - y0) * u
    elif action in ("orbit_cw", "orbit_ccw"):
        mx, my = (x0 + x1) / 2, (y0 + y1) / 2
        rad = max(min(x1 - x0, y1 - y0) / 2, 0.0)
        phi0 = rng.uniform(0, 2 * np.pi)
        sign = 1.0 if action == "orbit_cw" else -1.0
        ang = phi0 + sign * 2 * np.pi * u
        cx, cy = mx + rad * np.cos(ang), my + rad * np.sin(ang)
    elif action == "grow":
        cx, cy = np.full(t_frames, px), np.full(t_frames, py)
        rmult = 0.7 + 0.5 * u
    elif action == "shrink":
        cx, cy = np.full(t_frames, px), np.full(t_frames, py)
        rmult = 1.2 - 0.5 * u
    else:
        raise InvalidArgumentError(f"unknown action: {action}")
    return cx, cy, rmult


def render_video(subjects, actions, pose_seed: int, cfg: DataConfig):
    """Render T frames with all subjects; returns (frames, masks (T,M,H,W))."""
    h, w, t = cfg.height, cfg.width, cfg.frames
    m = len(subjects)
    rng = _rng(cfg.dataset_seed, 0xF1, pose_seed)
    bg_seed = int(rng.integers(2**31 - 1))
    trajs = []
    thetas = []
    for i, (spec, action) in enumerate(zip(subjects, actions)):
        r = _effective_radius(spec, m, h, w)
        trajs.append((_trajectory(action, rng, _lane(i, m, h, w, r), t), r))
        thetas.append(rng.uniform(0, 2 * np.pi))
    frames = np.empty((t, h, w, 3), dtype=np.float32)
    masks = np.zeros((t, m, h, w), dtype=bool)
    for k in range(t):
        img = _background(bg_seed, h, w)
        for i, (spec, _) in enumerate(zip(subjects, actions)):
            (cx, cy, rmult), r = trajs[i]
            masks[k, i] = draw_subject(img, spec, cx[k], cy[k], r * rmult[k], thetas[i])
        frames[k] = img.astype(np.float32)
    return frames, masks


def render_reference(spec: SubjectSpec, pose_seed: int, cfg: DataConfig,
                     zoomed: bool = True):
    """Render a single-subject image with its own pose/background; returns (img, mask)."""
    h, w = cfg.height, cfg.width
    rng = _rng(cfg.dataset_seed, 0xC2, pose_seed, spec.subject_id)
    bg_seed = int(rng.integers(2**31 - 1))
    img = _background(bg_seed, h, w)
    if zoomed:
        radius = 7.5 + 5.0 * spec.scale
    else:
        radius = _effective_radius(spec, 1, h, w)
    radius = float(min(radius, h / 2 - 2.5))
    cx = w / 2 + rng.uniform(-2.5, 2.5)
    cy = h / 2 + rng.uniform(-2.5, 2.5)
    theta = rng.uniform(0, 2 * np.pi)
    mask = draw_subject(img, spec, cx, cy, radius, theta)
    return img.astype(np.float32), mask


# -- resampling helpers ---------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    out = (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
           + c * wy * (1 - wx) + d * wy * wx)
    return out.astype(img.dtype)


def warp_affine(img: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Inverse-map bilinear warp about the image center, edge-replicated."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = np.linalg.inv(mat)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * (xx - cx) + inv[0, 1] * (yy - cy) + cx
    sy = inv[1, 0] * (xx - cx) + inv[1, 1] * (yy - cy) + cy
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    out = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
           + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)
    return out.astype(img.dtype)


def foreground_mask(img: np.ndarray) -> np.ndarray:
    """Bright-pixel heuristic; backgrounds are kept dark by construction."""
    return img.max(axis=-1) > _FG_THRESHOLD


def augment_reference(img: np.ndarray, seed: int) -> np.ndarray:
    """Seeded augmentation pipeline: rotation, scale, flip, shear, blur, jitter.

    A seeded subset of the ops is applied in seeded random order. Color jitter
    is additive and restricted to foreground pixels; output stays in [0,1].
    """
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise InvalidArgumentError("image values must lie in [0,1]")
    rng = _rng(0xA6, seed)
    coins = rng.random(6) < 0.5
    theta = np.deg2rad(rng.uniform(-25, 25))
    scale = rng.uniform(0.8, 1.2)
    shear = np.tan(np.deg2rad(rng.uniform(-10, 10)))
    sigma = rng.uniform(0.2, 1.0)
    jitter = rng.uniform(-0.1, 0.1, size=3)
    order = rng.permutation(6)

    out = img.astype(np.float64)
    for op in order:
        if not coins[op]:
            continue
        if op == 0:
            c, s = np.cos(theta), np.sin(theta)
            out = warp_affine(out, np.array([[c, -s], [s, c]]))
        elif op == 1:
            out = warp_affine(out, np.array([[scale, 0.0], [0.0, scale]]))
        elif op == 2:
            out = out[:, ::-1].copy()
        elif op == 3:
            out = warp_affine(out, np.array([[1.0, shear], [0.0, 1.0]]))
        elif op == 4:
            out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="nearest")
        elif op == 5:
            fg = foreground_mask(out)
            out = out + fg[:, :, None] * jitter[None, None, :]
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


# -- episodes -------------------------------------------------------------------

def sample_pair_kind(rng: np.random.Generator, cfg: DataConfig) -> str:
    return "regular" if rng.random() < cfg.regular_ratio else "cross"


def generate_episode(seed: int, m: int, pair_kind: str,
                     cfg: DataConfig | None = None) -> Episode:
    """Fully populated episode; bit-identical for identical arguments."""
    cfg = cfg or DataConfig()
    cfg.validate()
    if not (1 <= m <= cfg.m_max):
        raise InvalidArgumentError(f"m={m} outside [1, {cfg.m_max}]")
    if seed < 0:
        raise InvalidArgumentError("seed must be non-negative")
    if pair_kind not in ("regular", "cross"):
        raise InvalidArgumentError(f"unknown pair kind: {pair_kind}")

    rng = _rng(cfg.dataset_seed, 0xE9, seed, m, pair_kind == "cross")
    ids = rng.choice(cfg.n_subjects, size=m, replace=False)
    subjects = tuple(subject_spec(int(i), cfg.dataset_seed) for i in ids)
    actions = tuple(ACTION_WORDS[int(rng.integers(len(ACTION_WORDS)))] for _ in range(m))
    pose_seed = int(rng.integers(2**31 - 1))
    video, masks = render_video(subjects, actions, pose_seed, cfg)

    refs = np.empty((m, cfg.height, cfg.width, 3), dtype=np.float32)
    if pair_kind == "regular":
        for i, spec in enumerate(subjects):
            k = int(rng.integers(cfg.frames))
            ys, xs = np.nonzero(masks[k, i])
            if len(ys) == 0:  # fully occluded never happens by construction
                ys, xs = np.array([cfg.height // 2]), np.array([cfg.width // 2])
            cy, cx = ys.mean(), xs.mean()
            r = _effective_radius(spec, m, cfg.height, cfg.width)
            side = int(np.clip(round(3.6 * r + rng.uniform(-2, 2)), 9, min(cfg.height, cfg.width)))
            y0 = int(np.clip(round(cy - side / 2 + rng.uniform(-2, 2)), 0, cfg.height - side))
            x0 = int(np.clip(round(cx - side / 2 + rng.uniform(-2, 2)), 0, cfg.width - side))
            crop = video[k, y0:y0 + side, x0:x0 + side]
            up = bilinear_resize(crop, cfg.height, cfg.width)
            refs[i] = augment_reference(up, int(rng.integers(2**31 - 1)))
    else:
        for i, spec in enumerate(subjects):
            refs[i], _ = render_reference(spec, int(rng.integers(2**31 - 1)), cfg)

    prompt = prompt_for(subjects, actions, cfg.l_text)
    return Episode(prompt=prompt, refs=refs, video=video,
                   subjects=subjects, pair_kind=pair_kind)


def episode_seed_for(master_seed: int, step: int, slot: int) -> int:
    """Deterministic per-(step, slot) episode seed; safe for parallel workers."""
    ss = np.random.SeedSequence((master_seed, 0xDA7A, step, slot))
    return int(ss.generate_state(1)[0])


def probe_renders(cfg: DataConfig, n_images: int, seed: int = 0,
                  n_subjects: int | None = None):
    """Fixed probe set of single-subject renders cycling the inventory.

    Returns (images (n,H,W,3), masks (n,H,W) bool, subject_ids (n,)).
    """
    n_subj = n_subjects or cfg.n_subjects
    imgs = np.empty((n_images, cfg.height, cfg.width, 3), dtype=np.float32)
    masks = np.empty((n_images, cfg.height, cfg.width), dtype=bool)
    sids = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        sid = i % n_subj
        spec = subject_spec(sid, cfg.dataset_seed)
        imgs[i], masks[i] = render_reference(spec, pose_seed=seed * 1_000_003 + i,
                                             cfg=cfg, zoomed=bool(i % 2))
        sids[i] = sid
    return imgs, masks, sids


# -- on-disk episode cache -------------------------------------------------------

_MAGIC = b"RFA1"
_VERSION = 1
_PAIR_CODE = {"regular": 0, "cross": 1}
_PAIR_NAME = {v: k for k, v in _PAIR_CODE.items()}


def _write_varint(buf: bytearray, n: int):
    while n >= 0x80:
        buf.append((n & 0x7F) | 0x80)
        n >>= 7
    buf.append(n)


def _read_varint(data: bytes, pos: int):
    shift, n = 0, 0
    while True:
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, pos
        shift += 7


def write_episode(path, ep: Episode) -> None:
    """Cache record: header | refs+video pixels (f32 LE) | varint tokens | subject trailer."""
    m = ep.refs.shape[0]
    t, h, w = ep.video.shape[:3]
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<5H", _VERSION, h, w, t, m)
    buf += ep.refs.astype("<f4").tobytes()
    buf += ep.video.astype("<f4").tobytes()
    _write_varint(buf, len(ep.prompt.token_ids))
    for tok in ep.prompt.token_ids:
        _write_varint(buf, int(tok))
    buf += struct.pack("<B", _PAIR_CODE[ep.pair_kind])
    for spec in ep.subjects:
        buf += struct.pack("<IB3fIf", spec.subject_id,
                           SHAPE_CLASSES.index(spec.shape_class),
                           *[float(c) for c in spec.color],
                           spec.texture_seed, spec.scale)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def read_episode(path) -> Episode:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise InvalidArgumentError("bad episode file magic")
    version, h, w, t, m = struct.unpack_from("<5H", data, 4)
    if version != _VERSION:
        raise InvalidArgumentError(f"unsupported episode version {version}")
    pos = 4 + 10
    nref = m * h * w * 3
    nvid = t * h * w * 3
    refs = np.frombuffer(data, "<f4", count=nref, offset=pos).reshape(m, h, w, 3).copy()
    pos += nref * 4
    video = np.frombuffer(data, "<f4", count=nvid, offset=pos).reshape(t, h, w, 3).copy()
    pos += nvid * 4
    ntok, pos = _read_varint(data, pos)
    toks = []
    for _ in range(ntok):
        v, pos = _read_varint(data, pos)
        toks.append(v)
    (pair_code,) = struct.unpack_from("<B", data, pos)
    pos += 1
    subjects = []
    for _ in range(m):
        sid, shape_i, c0, c1, c2, tex, scale = struct.unpack_from("<IB3fIf", data, pos)
        pos += struct.calcsize("<IB3fIf")
        subjects.append(SubjectSpec(sid, SHAPE_CLASSES[shape_i],
                                    np.array([c0, c1, c2], dtype=np.float64), tex, float(scale)))
    return Episode(prompt=PromptTokens(np.asarray(toks, dtype=np.int32)),
                   refs=refs, video=video, subjects=tuple(subjects),
                   pair_kind=_PAIR_NAME[pair_code])
