"""Procedural subject renderer and dataset plumbing.

Subjects are flat 2-D shapes whose identity (shape class, fill/outline color,
texture) is independent of per-render nuisance attributes (view angle,
position, scale, background).  Every render comes with an exact mask and a
templated caption containing a single subject placeholder token.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import CapacityError, DataError, RejectedInputError

CANVAS = 64
SHAPE_CLASSES = ("circle", "square", "triangle", "star", "cross", "ring")
BACKGROUNDS = ("grass", "sky", "sand", "water", "brick", "wood", "metal", "checker")
QUADRANTS = ("topleft", "topright", "bottomleft", "bottomright")
SIZES = ("small", "medium", "large")

PLACEHOLDER = "*"

# ~48-word caption vocabulary; index 0 is padding.
VOCAB = (
    ["<pad>", "a", "an", "photo", "image", "picture", "drawing", "of", "the",
     "on", "at", "in", "with", "is", "shown", "scene", PLACEHOLDER]
    + list(SHAPE_CLASSES)
    + list(BACKGROUNDS)
    + list(QUADRANTS)
    + list(SIZES)
    + ["bright", "dark", "plain", "tiny", "huge", "render", "snapshot",
       "background", "centered", "object", "flat"]
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = 0
PLACEHOLDER_ID = WORD_TO_ID[PLACEHOLDER]
CAPTION_LEN = 12

# Each template is a word sequence with <shape>/<bg>/<quad>/<size> slots.
TEMPLATES = (
    ("a", "photo", "of", "a", PLACEHOLDER, "<shape>", "on", "<bg>", "at", "<quad>", "<size>"),
    ("a", "<size>", PLACEHOLDER, "<shape>", "on", "<bg>", "at", "<quad>"),
    ("an", "image", "of", "a", PLACEHOLDER, "<shape>", "on", "<bg>", "at", "<quad>", "<size>"),
    ("a", "picture", "of", "the", "<size>", PLACEHOLDER, "<shape>", "on", "<bg>", "at", "<quad>"),
)

VIEW_RANGE = (0.0, 360.0)
POS_RANGE = (0.2, 0.8)
SCALE_RANGE = (0.25, 0.6)
_SCALE_EDGES = np.linspace(SCALE_RANGE[0], SCALE_RANGE[1], len(SIZES) + 1)


@dataclass(frozen=True)
class SubjectSpec:
    """Intrinsic attributes of one subject; renders identically under equal nuisances."""
    subject_id: int
    shape_class: str
    fill_color: tuple
    texture_seed: int
    outline_color: tuple


@dataclass(frozen=True)
class RedundantAttrs:
    """Per-render nuisance attributes, independent of the subject."""
    view_angle: float
    position: tuple
    scale: float
    background_id: int

    def validate(self):
        if not (VIEW_RANGE[0] <= self.view_angle < VIEW_RANGE[1]):
            raise RejectedInputError(f"view_angle {self.view_angle} outside [0, 360)")
        for coord in self.position:
            if not (POS_RANGE[0] <= coord <= POS_RANGE[1]):
                raise RejectedInputError(f"position {self.position} outside {POS_RANGE}^2")
        if not (SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]):
            raise RejectedInputError(f"scale {self.scale} outside {SCALE_RANGE}")
        if not (0 <= self.background_id < len(BACKGROUNDS)):
            raise RejectedInputError(f"background_id {self.background_id} out of range")


@dataclass
class RenderedSample:
    image: np.ndarray          # (64, 64, 3) float32 in [0, 1]
    mask: np.ndarray           # (64, 64) uint8 in {0, 1}
    caption: np.ndarray        # (CAPTION_LEN,) int64 token ids
    placeholder_index: int
    subject_id: int
    redundant: RedundantAttrs


@dataclass
class Batch:
    samples: list              # N RenderedSamples, pairwise-distinct subject ids
    positives: list            # positives[i]: same subject as samples[i], fresh attrs


def make_subject(seed: int) -> SubjectSpec:
    """Deterministically derive a subject's intrinsic attributes from a seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([77, seed])))
    shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
    # keep fills mid-bright so outline and shading stay visible
    fill = tuple(np.round(rng.uniform(0.15, 0.95, size=3), 6).tolist())
    outline = tuple(np.round(rng.uniform(0.0, 1.0, size=3), 6).tolist())
    return SubjectSpec(
        subject_id=seed,
        shape_class=shape,
        fill_color=fill,
        texture_seed=int(rng.integers(1 << 31)),
        outline_color=outline,
    )


def sample_attrs(rng: np.random.Generator) -> RedundantAttrs:
    return RedundantAttrs(
        view_angle=float(rng.uniform(*VIEW_RANGE)),
        position=(float(rng.uniform(*POS_RANGE)), float(rng.uniform(*POS_RANGE))),
        scale=float(rng.uniform(*SCALE_RANGE)),
        background_id=int(rng.integers(len(BACKGROUNDS))),
    )


# ---------------------------------------------------------------------------
# rasterization

def _shape_sdf(shape: str, x, y):
    """Signed-distance-like field in shape-local units (boundary radius 0.5)."""
    if shape == "circle":
        return np.hypot(x, y) - 0.5
    if shape == "ring":
        r = np.hypot(x, y)
        return np.maximum(r - 0.5, 0.33 - r)
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 0.42
    if shape == "cross":
        horiz = np.maximum(np.abs(x) - 0.5, np.abs(y) - 0.17)
        vert = np.maximum(np.abs(x) - 0.17, np.abs(y) - 0.5)
        return np.minimum(horiz, vert)
    if shape == "triangle":
        # equilateral, circumradius 0.5, one vertex pointing up (-y)
        sdf = None
        for k in range(3):
            ang = -np.pi / 2 + 2 * np.pi * k / 3
            nx, ny = np.cos(ang), np.sin(ang)
            # edge opposite the vertex at `ang`; inradius = 0.25
            d = -(nx * x + ny * y) - 0.25
            sdf = d if sdf is None else np.maximum(sdf, d)
        return sdf
    if shape == "star":
        # 5-point star via angular radius modulation (pseudo-SDF)
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        sector = np.mod(phi * 5 / (2 * np.pi) + 0.5, 1.0)  # 0..1 inside each point
        blend = np.abs(sector - 0.5) * 2                   # 0 at tip, 1 at valley
        radius = 0.5 * (1 - blend) + 0.21 * blend
        return r - radius
    raise RejectedInputError(f"unknown shape class {shape!r}")


def _texture(spec: SubjectSpec, xl, yl):
    """Brightness modulation in shape-local coords so texture moves with the shape."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([13, spec.texture_seed])))
    kind = int(rng.integers(2))
    freq = float(rng.uniform(3.0, 7.0))
    phase = float(rng.uniform(0, 2 * np.pi))
    depth = float(rng.uniform(0.12, 0.3))
    if kind == 0:  # stripes
        wave = np.sin(2 * np.pi * freq * xl + phase)
    else:          # dots
        wave = np.sin(2 * np.pi * freq * xl + phase) * np.sin(2 * np.pi * freq * yl + phase)
    return 1.0 - depth * 0.5 * (1 + wave)


def _background(background_id: int, size=CANVAS):
    """Deterministic textured background, one per id."""
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u, v = ii / size, jj / size
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([29, background_id])))
    base = rng.uniform(0.2, 0.8, size=3)
    tint = rng.uniform(-0.15, 0.15, size=3)
    patterns = [
        np.sin(40 * u) * np.sin(40 * v),                       # grass-ish speckle
        v,                                                      # sky gradient
        np.sin(25 * (u + v)),                                   # sand ripples
        np.sin(18 * v + 3 * np.sin(6 * u)),                     # water waves
        ((ii // 8 + jj // 16) % 2) * 2.0 - 1.0,                 # brick
        np.sin(60 * u + 2 * np.sin(9 * v)),                     # wood grain
        np.abs(np.sin(10 * u) * np.sin(10 * v)) * 2 - 1,        # metal weave
        (((ii // 8) + (jj // 8)) % 2) * 2.0 - 1.0,              # checker
    ]
    pat = patterns[background_id % len(patterns)]
    img = base[None, None, :] + 0.22 * pat[..., None] * (1.0 + tint[None, None, :])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def quadrant_of(position) -> int:
    x, y = position
    return (0 if y < 0.5 else 2) + (0 if x < 0.5 else 1)


def size_bucket(scale: float) -> int:
    return int(np.clip(np.searchsorted(_SCALE_EDGES[1:-1], scale, side="right"), 0, len(SIZES) - 1))


def make_caption(spec: SubjectSpec, attrs: RedundantAttrs, template: int):
    words = TEMPLATES[template % len(TEMPLATES)]
    out, p = [], -1
    for w in words:
        if w == "<shape>":
            w = spec.shape_class
        elif w == "<bg>":
            w = BACKGROUNDS[attrs.background_id]
        elif w == "<quad>":
            w = QUADRANTS[quadrant_of(attrs.position)]
        elif w == "<size>":
            w = SIZES[size_bucket(attrs.scale)]
        if w == PLACEHOLDER:
            p = len(out)
        out.append(WORD_TO_ID[w])
    out += [PAD_ID] * (CAPTION_LEN - len(out))
    return np.asarray(out, dtype=np.int64), p


def detokenize(tokens) -> str:
    return " ".join(VOCAB[t] for t in np.asarray(tokens) if t != PAD_ID)


_EDIT_SETS = {
    "background": [WORD_TO_ID[w] for w in BACKGROUNDS],
    "position": [WORD_TO_ID[w] for w in QUADRANTS],
    "scale": [WORD_TO_ID[w] for w in SIZES],
}


def edit_caption(tokens, category: str, target: int):
    """Replace the background/position/scale word with the target's word."""
    if category not in _EDIT_SETS:
        raise RejectedInputError(f"unknown edit category {category!r}")
    ids = _EDIT_SETS[category]
    tokens = np.asarray(tokens).copy()
    slots = np.nonzero(np.isin(tokens, ids))[0]
    if len(slots) != 1:
        raise RejectedInputError(f"caption has {len(slots)} {category} words, expected 1")
    tokens[slots[0]] = ids[target]
    return tokens


def tokenize(text: str):
    """Tokenize a whitespace-separated caption; returns (ids, placeholder index)."""
    words = text.split()
    if len(words) > CAPTION_LEN:
        raise RejectedInputError(f"caption longer than {CAPTION_LEN} tokens")
    ids = []
    for w in words:
        if w not in WORD_TO_ID:
            raise RejectedInputError(f"unknown caption word {w!r}")
        ids.append(WORD_TO_ID[w])
    if ids.count(PLACEHOLDER_ID) != 1:
        raise RejectedInputError("caption must contain exactly one placeholder token")
    p = ids.index(PLACEHOLDER_ID)
    ids += [PAD_ID] * (CAPTION_LEN - len(ids))
    return np.asarray(ids, dtype=np.int64), p


def render(spec: SubjectSpec, attrs: RedundantAttrs, caption_template: int = 0) -> RenderedSample:
    """Rasterize one subject; the mask is exactly the rendered support."""
    attrs.validate()
    size = CANVAS
    ii, jj = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    # canvas-fraction coords; x is horizontal (j), y vertical (i, downward)
    px = jj / size - attrs.position[0]
    py = ii / size - attrs.position[1]
    theta = np.deg2rad(attrs.view_angle)
    c, s = np.cos(theta), np.sin(theta)
    xl = (c * px + s * py) / attrs.scale
    yl = (-s * px + c * py) / attrs.scale

    sdf = _shape_sdf(spec.shape_class, xl, yl)
    mask = sdf <= 0.0

    img = _background(attrs.background_id, size).copy()
    fill = np.asarray(spec.fill_color, dtype=np.float32)
    outline = np.asarray(spec.outline_color, dtype=np.float32)

    tex = _texture(spec, xl, yl)
    # shading gradient fixed in the canvas frame ("light from the left"), so
    # rotating the view changes appearance without touching identity
    shade = 0.72 + 0.28 * np.clip(px / attrs.scale + 0.5, 0.0, 1.0)
    body = fill[None, None, :] * (tex * shade)[..., None]
    img[mask] = np.clip(body, 0.0, 1.0)[mask]

    rim = mask & (sdf > -0.07)
    img[rim] = outline[None, :]

    caption, p = make_caption(spec, attrs, caption_template)
    return RenderedSample(
        image=img.astype(np.float32),
        mask=mask.astype(np.uint8),
        caption=caption,
        placeholder_index=p,
        subject_id=spec.subject_id,
        redundant=attrs,
    )


# ---------------------------------------------------------------------------
# dataset persistence

def generate_dataset(out_dir, subjects=64, renders_per_subject=8, seed=0):
    """Write images, masks, and a JSON-lines manifest under out_dir."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for si in range(subjects):
            spec = make_subject(seed * 100003 + si)
            for ri in range(renders_per_subject):
                rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([seed, si, ri])))
                attrs = sample_attrs(rng)
                template = int(rng.integers(len(TEMPLATES)))
                sample = render(spec, attrs, template)
                img_rel = f"images/s{si:04d}_r{ri:03d}.png"
                msk_rel = f"masks/s{si:04d}_r{ri:03d}.png"
                save_image(sample.image, os.path.join(out_dir, img_rel))
                Image.fromarray(sample.mask * 255).save(os.path.join(out_dir, msk_rel))
                record = {
                    "image": img_rel,
                    "mask": msk_rel,
                    "subject_id": sample.subject_id,
                    "caption_tokens": sample.caption.tolist(),
                    "placeholder_index": sample.placeholder_index,
                    "view_angle": sample.redundant.view_angle,
                    "position": list(sample.redundant.position),
                    "scale": sample.redundant.scale,
                    "background_id": sample.redundant.background_id,
                }
                fh.write(json.dumps(record) + "\n")
    return manifest


def save_image(image: np.ndarray, path: str):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_image(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


class Dataset:
    """In-memory view over a generated dataset directory."""

    def __init__(self, root):
        self.root = root
        manifest = os.path.join(root, "manifest.jsonl")
        if not os.path.exists(manifest):
            raise DataError(f"no manifest at {manifest}")
        self.records = []
        with open(manifest) as fh:
            for line in fh:
                self.records.append(json.loads(line))
        if not self.records:
            raise DataError(f"empty manifest at {manifest}")
        self.by_subject = {}
        for idx, rec in enumerate(self.records):
            self.by_subject.setdefault(rec["subject_id"], []).append(idx)
        self._cache = {}

    def __len__(self):
        return len(self.records)

    @property
    def subject_ids(self):
        return sorted(self.by_subject)

    def sample(self, idx) -> RenderedSample:
        if idx not in self._cache:
            rec = self.records[idx]
            image = load_image(os.path.join(self.root, rec["image"]))
            mask = (np.asarray(Image.open(os.path.join(self.root, rec["mask"]))) > 127)
            attrs = RedundantAttrs(
                view_angle=rec["view_angle"],
                position=tuple(rec["position"]),
                scale=rec["scale"],
                background_id=rec["background_id"],
            )
            self._cache[idx] = RenderedSample(
                image=image,
                mask=mask.astype(np.uint8),
                caption=np.asarray(rec["caption_tokens"], dtype=np.int64),
                placeholder_index=rec["placeholder_index"],
                subject_id=rec["subject_id"],
                redundant=attrs,
            )
        return self._cache[idx]

    def render_index(self, idx) -> int:
        """Position of record idx within its subject's render list."""
        rec = self.records[idx]
        return self.by_subject[rec["subject_id"]].index(idx)

    def split_indices(self, holdout_renders=0):
        """(train, holdout) record indices; the last renders of each subject are held out."""
        train, hold = [], []
        for sid in self.subject_ids:
            idxs = self.by_subject[sid]
            cut = len(idxs) - holdout_renders
            train.extend(idxs[:cut])
            hold.extend(idxs[cut:])
        return train, hold


def assemble_batch(dataset: Dataset, n: int, rng: np.random.Generator,
                   indices=None) -> Batch:
    """Draw n distinct subjects, each with an (anchor, positive) render pair."""
    pool = indices if indices is not None else list(range(len(dataset)))
    by_subject = {}
    for idx in pool:
        by_subject.setdefault(dataset.records[idx]["subject_id"], []).append(idx)
    eligible = [sid for sid, idxs in sorted(by_subject.items()) if len(idxs) >= 2]
    if len(eligible) < n:
        raise CapacityError(
            f"need {n} subjects with >=2 renders, found {len(eligible)}")
    chosen = rng.choice(len(eligible), size=n, replace=False)
    samples, positives = [], []
    for ci in chosen:
        idxs = by_subject[eligible[int(ci)]]
        a, b = rng.choice(len(idxs), size=2, replace=False)
        anchor = dataset.sample(idxs[int(a)])
        positive = dataset.sample(idxs[int(b)])
        if anchor.redundant == positive.redundant:
            raise DataError("anchor and positive share identical nuisance attributes")
        samples.append(anchor)
        positives.append(positive)
    return Batch(samples=samples, positives=positives)
