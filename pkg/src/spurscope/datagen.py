"""Synthetic datasets with controllable spurious features.

Procedural glyphs stand in for the MNIST family so that every experiment
runs without downloads. Spurious features are injected on top of a clean
copy of the images (kept in ``LabeledDataset.base``) so that an
intervention can re-sample them without touching anything else.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio

# Stroke templates in normalized coordinates (x right, y down, both in [-1, 1]).
# Each template is a list of polylines.
_RING = [(0.7 * math.cos(t), 0.7 * math.sin(t)) for t in np.linspace(0, 2 * math.pi, 17)]
GLYPH_TEMPLATES = [
    [[(-0.7, 0.0), (0.7, 0.0)], [(0.0, -0.7), (0.0, 0.7)]],                      # plus
    [[(-0.5, -0.7), (-0.5, 0.7)], [(0.5, -0.7), (0.5, 0.7)], [(-0.5, 0.0), (0.5, 0.0)]],  # H
    [_RING],                                                                     # ring
    [[(-0.6, -0.6), (0.6, 0.6)], [(-0.6, 0.6), (0.6, -0.6)]],                    # X
    [[(-0.4, -0.7), (-0.4, 0.7), (0.5, 0.7)]],                                   # L
    [[(-0.6, -0.6), (0.6, -0.6), (-0.6, 0.6), (0.6, 0.6)]],                      # Z
    [[(0.0, -0.7), (0.7, 0.6), (-0.7, 0.6), (0.0, -0.7)]],                       # triangle
    [[(-0.6, -0.7), (0.0, 0.7), (0.6, -0.7)]],                                   # V
    [[(-0.6, -0.6), (0.6, -0.6), (0.6, 0.6), (-0.6, 0.6), (-0.6, -0.6)]],        # box
    [[(-0.5, 0.7), (-0.5, -0.7), (0.5, 0.7), (0.5, -0.7)]],                      # N
]


@dataclass
class LabeledDataset:
    """Images ``N×C×H×W`` in [0, 1] with integer labels.

    ``spurious`` holds the injected attribute id per sample (``None`` when
    nothing was injected) and ``base`` the images before injection.
    """

    images: np.ndarray
    labels: np.ndarray
    classes: int
    spurious: Optional[np.ndarray] = None
    provenance: str = ""
    base: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels).astype(np.uint32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.classes:
            raise ValueError(f"label {int(self.labels.max())} >= class count {self.classes}")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       spurious=None if self.spurious is None else self.spurious[idx],
                       base=None if self.base is None else self.base[idx], meta=dict(self.meta))


@dataclass
class SpuriousSpec:
    """Where and how a spurious feature is drawn.

    ``kind`` is ``patch`` (a square whose location encodes the attribute),
    ``source-token`` (a textured token at a fixed place whose pattern
    encodes the attribute) or ``domino-top`` (the top half of a domino).
    With ``content_shared`` the patch is plain white for every attribute, so
    only its location carries the signal; otherwise each attribute also gets
    its own texture.
    """

    kind: str = "patch"
    size: int = 5
    locations: Optional[list] = None
    rho: float = 1.0
    content_shared: bool = True
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in ("patch", "source-token", "domino-top"):
            raise ValueError(f"unknown spurious kind {self.kind!r}")
        if not 0.5 <= self.rho <= 1.0:
            raise ValueError(f"correlation strength must lie in [0.5, 1], got {self.rho}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "size": self.size,
                "locations": None if self.locations is None else [list(l) for l in self.locations],
                "rho": self.rho, "content_shared": self.content_shared, "intensity": self.intensity}


def default_locations(classes: int, size: int, h: int, w: int) -> list:
    """Corners first, then edge midpoints, then quarter points on top/bottom."""
    r1, c1 = h - size, w - size
    rm, cm = (h - size) // 2, (w - size) // 2
    cq1, cq3 = (w - size) // 4, 3 * (w - size) // 4
    cand = [(0, 0), (0, c1), (r1, 0), (r1, c1), (0, cm), (r1, cm), (rm, 0), (rm, c1),
            (0, cq1), (r1, cq3)]
    if classes > len(cand):
        raise ValueError(f"no default patch layout for {classes} classes")
    return cand[:classes]


def check_locations(locations: list, size: int, h: int, w: int) -> None:
    for r, c in locations:
        if r < 0 or c < 0 or r + size > h or c + size > w:
            raise ValueError(f"patch of size {size} at {(r, c)} does not fit a {h}×{w} image")
    for i, (r0, c0) in enumerate(locations):
        for r1, c1 in locations[i + 1:]:
            if abs(r0 - r1) < size and abs(c0 - c1) < size:
                raise ValueError(f"patch locations {(r0, c0)} and {(r1, c1)} overlap")


# -- glyphs ---------------------------------------------------------------------------

def _segments(template) -> np.ndarray:
    segs = []
    for line in template:
        for a, b in zip(line, line[1:]):
            segs.append((*a, *b))
    return np.asarray(segs, dtype=np.float64)


def _render(segs: np.ndarray, h: int, w: int, thickness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    p = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)[:, None, :]
    a, b = segs[None, :, :2], segs[None, :, 2:]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-12), 0.0, 1.0)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1).min(axis=1)
    return np.clip(thickness / 2 + 0.5 - d, 0.0, 1.0).reshape(h, w)


def gen_glyphs(classes: int, per_class: int, size=(28, 28), seed: int = 0, *,
               jitter: Optional[float] = None, rotation: float = 15.0, noise: float = 0.1,
               extent: float = 0.32, thickness=(1.2, 2.4), clutter: int = 0,
               pair: Optional[tuple] = None) -> LabeledDataset:
    """Class-conditioned stroke glyphs with random pose, stroke and noise.

    Each sample draws a rotation in ``±rotation`` degrees, a scale in
    [0.85, 1.1], a translation in ``±jitter`` pixels (default 8% of the
    side), a stroke width in ``thickness`` and a stroke intensity in
    [0.6, 1]; Gaussian pixel noise of std ``noise`` is added and the image is
    clipped to [0, 1]. The glyph spans roughly ``2·extent`` of the image, so
    the corners stay free for spurious patches. Samples are ordered by class.
    """
    if not 1 <= classes <= len(GLYPH_TEMPLATES):
        raise ValueError(f"classes must be in [1, {len(GLYPH_TEMPLATES)}]")
    templates = list(pair) if pair is not None else list(range(classes))
    if len(templates) != classes:
        raise ValueError("pair must name one template per class")
    h, w = (size, size) if np.isscalar(size) else tuple(size)
    if jitter is None:
        jitter = 0.08 * min(h, w)
    rng = np.random.default_rng(seed)
    n = classes * per_class
    images = np.zeros((n, 1, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    radius = extent * min(h, w)
    for i, y in enumerate(labels):
        segs = _segments(GLYPH_TEMPLATES[templates[y]])
        ang = math.radians(rng.uniform(-rotation, rotation))
        sc = radius * rng.uniform(0.85, 1.1)
        tx, ty = rng.uniform(-jitter, jitter, size=2)
        rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
        pts = segs.reshape(-1, 2) @ rot.T * sc + (w / 2 + tx, h / 2 + ty)
        img = _render(pts.reshape(-1, 4), h, w, rng.uniform(*thickness))
        img = img * rng.uniform(0.6, 1.0)
        for _ in range(clutter):
            a = rng.uniform(0.15, 0.85, size=2) * (w, h)
            ang = rng.uniform(0, 2 * math.pi)
            ln = rng.uniform(0.1, 0.25) * min(h, w)
            seg = np.array([[*a, *(a + ln * np.array([math.cos(ang), math.sin(ang)]))]])
            img = np.maximum(img, _render(seg, h, w, 1.5) * rng.uniform(0.6, 1.0))
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, classes, provenance=f"glyphs(C={classes},n={per_class},"
                          f"{h}x{w},seed={seed},jitter={jitter:g},rot={rotation:g},noise={noise:g})")


# -- spurious features -------------------------------------------------------------------

def _token(attr: int, size: int) -> np.ndarray:
    """A per-attribute texture: stripes whose orientation/period depend on ``attr``."""
    yy, xx = np.mgrid[0:size, 0:size]
    period = 2 + attr // 4
    pattern = [xx, yy, xx + yy, xx - yy][attr % 4]
    return ((pattern // max(1, period // 2)) % 2 == 0).astype(np.float32)


def _draw(base: np.ndarray, s: np.ndarray, spec: SpuriousSpec) -> np.ndarray:
    out = base.copy()
    p = spec.size
    for i, attr in enumerate(s):
        if spec.kind == "patch":
            r, c = spec.locations[attr]
            fill = spec.intensity if spec.content_shared else spec.intensity * _token(attr, p)
        else:
            r, c = spec.locations[0]
            fill = spec.intensity * _token(attr, p)
        out[i, :, r:r + p, c:c + p] = fill
    return out


def _sample_attrs(labels: np.ndarray, classes: int, rho: float, rng) -> np.ndarray:
    s = labels.astype(np.int64).copy()
    flip = rng.random(len(labels)) >= rho
    if classes > 1:
        # a uniformly chosen *other* class
        offset = rng.integers(1, classes, size=len(labels))
        s[flip] = (s[flip] + offset[flip]) % classes
    return s


def inject_patch(ds: LabeledDataset, spec: SpuriousSpec, rho: Optional[float] = None,
                 seed: int = 0) -> LabeledDataset:
    """Add a class-correlated spurious feature.

    With probability ``rho`` the sample gets its own class's attribute,
    otherwise a uniformly random other class's. ``rho=1`` makes the feature
    a deterministic function of the label.
    """
    rho = spec.rho if rho is None else rho
    spec = replace(spec, rho=rho)
    _, _, h, w = ds.images.shape
    if spec.kind == "domino-top":
        raise ValueError("domino-top features are built with compose_dominoes")
    if spec.locations is None:
        n_loc = ds.classes if spec.kind == "patch" else 1
        spec = replace(spec, locations=default_locations(n_loc, spec.size, h, w))
    spec.locations = [tuple(l) for l in spec.locations]
    if spec.kind == "patch" and len(spec.locations) != ds.classes:
        raise ValueError(f"need one patch location per class ({ds.classes}), got {len(spec.locations)}")
    check_locations(spec.locations, spec.size, h, w)
    rng = np.random.default_rng(seed)
    s = _sample_attrs(ds.labels, ds.classes, rho, rng)
    base = ds.images if ds.base is None else ds.base
    meta = dict(ds.meta, spurious_spec=spec.to_json())
    return replace(ds, images=_draw(base, s, spec), spurious=s.astype(np.uint32), base=base,
                   meta=meta, provenance=ds.provenance + f"+{spec.kind}(rho={rho:g},seed={seed})")


def _spec_from_meta(ds: LabeledDataset) -> SpuriousSpec:
    d = dict(ds.meta["spurious_spec"])
    d["locations"] = None if d["locations"] is None else [tuple(l) for l in d["locations"]]
    return SpuriousSpec(**d)


def intervene_randomize_spurious(ds: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """do(s): re-draw the spurious attribute uniformly, independent of the label."""
    if ds.spurious is None or "spurious_spec" not in ds.meta:
        raise ValueError("dataset carries no spurious-attribute record")
    rng = np.random.default_rng(seed)
    spec = _spec_from_meta(ds)
    prov = ds.provenance + f"+do(s)(seed={seed})"
    if spec.kind == "domino-top":
        split = ds.meta["domino_split"]
        perm = rng.permutation(len(ds))
        images = ds.images.copy()
        images[:, :, :split] = ds.images[perm, :, :split]
        return replace(ds, images=images, spurious=ds.spurious[perm], provenance=prov,
                       meta=dict(ds.meta))
    n_attr = len(spec.locations) if spec.kind == "patch" else ds.classes
    s = rng.integers(0, n_attr, size=len(ds))
    return replace(ds, images=_draw(ds.base, s, spec), spurious=s.astype(np.uint32),
                   provenance=prov, meta=dict(ds.meta))


# -- dominoes ---------------------------------------------------------------------------------

def compose_dominoes(top: LabeledDataset, bottom: LabeledDataset, seed: int = 0,
                     rho: float = 1.0) -> LabeledDataset:
    """Stack a top image (spurious channel) over each bottom image (core channel).

    The composite keeps the bottom label. Each bottom sample is paired with a
    top sample of the same label with probability ``rho`` and of the other
    label otherwise; tops are drawn without replacement while the pool lasts.
    """
    if top.images.shape[3] != bottom.images.shape[3] or top.images.shape[1] != bottom.images.shape[1]:
        raise ValueError(f"domino halves must share channels and width: {top.shape} vs {bottom.shape}")
    if top.classes != 2 or bottom.classes != 2:
        raise ValueError("dominoes are built from binary datasets")
    rng = np.random.default_rng(seed)
    pools = {c: rng.permutation(np.flatnonzero(top.labels == c)) for c in (0, 1)}
    used = {0: 0, 1: 0}
    want = bottom.labels.astype(np.int64).copy()
    flip = rng.random(len(bottom)) >= rho
    want[flip] = 1 - want[flip]
    pick = np.empty(len(bottom), dtype=np.int64)
    for i, c in enumerate(want):
        pool = pools[c]
        if len(pool) == 0:
            raise ValueError(f"top dataset has no samples of class {c}")
        pick[i] = pool[used[c] % len(pool)]
        used[c] += 1
    images = np.concatenate([top.images[pick], bottom.images], axis=2)
    spec = SpuriousSpec(kind="domino-top", rho=max(rho, 0.5))
    meta = {"domino_split": int(top.images.shape[2]), "spurious_spec": spec.to_json()}
    return LabeledDataset(images, bottom.labels, 2, spurious=top.labels[pick].astype(np.uint32),
                          provenance=f"domino[{top.provenance} / {bottom.provenance}](seed={seed})",
                          meta=meta)


def mask_core_only(ds: LabeledDataset) -> LabeledDataset:
    """Zero the top (spurious) half of a domino dataset; labels unchanged."""
    if "domino_split" not in ds.meta:
        raise ValueError("mask_core_only needs a domino dataset")
    split = ds.meta["domino_split"]
    images = ds.images.copy()
    images[:, :, :split] = 0.0
    return replace(ds, images=images, meta=dict(ds.meta), provenance=ds.provenance + "+core-only")


# -- splits and persistence ---------------------------------------------------------------------

def split(ds: LabeledDataset, fractions=(0.8, 0.2), seed: int = 0) -> list:
    """Disjoint, class-stratified, seed-stable index splits."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if not math.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for c in range(ds.classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        cuts = np.round(np.cumsum(fractions)[:-1] * len(idx)).astype(int)
        for part, chunk in zip(parts, np.split(idx, cuts)):
            part.append(chunk)
    return [ds.subset(np.sort(np.concatenate(p))) for p in parts]


def load_idx(images_path, labels_path, classes: Optional[int] = None) -> LabeledDataset:
    """Read an IDX image/label pair (MNIST, KMNIST, FMNIST), scaling bytes to [0, 1]."""
    imgs = tensorio.read_idx_images(images_path)
    labels = tensorio.read_idx_labels(labels_path)
    if imgs.shape[0] != labels.shape[0]:
        raise tensorio.CountMismatchError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    images = (imgs.astype(np.float32) / 255.0)[:, None]
    classes = classes or (int(labels.max()) + 1 if len(labels) else 1)
    return LabeledDataset(images, labels, classes, provenance=f"idx:{Path(images_path).name}")


def binary_subset(ds: LabeledDataset, pos: int, neg: int) -> LabeledDataset:
    """Keep classes ``neg`` and ``pos`` relabeled to 0 and 1."""
    keep = np.flatnonzero((ds.labels == pos) | (ds.labels == neg))
    sub = ds.subset(keep)
    return replace(sub, labels=(sub.labels == pos).astype(np.uint32), classes=2,
                   provenance=ds.provenance + f"[{neg}v{pos}]")


def save_dataset(ds: LabeledDataset, directory) -> Path:
    """Write DSTF tensors plus ``manifest.json``; return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(d / "images.dstf", ds.images)
    tensorio.save_tensor(d / "labels.dstf", np.asarray(ds.labels).astype(np.uint32))
    manifest = {"images": "images.dstf", "labels": "labels.dstf", "classes": ds.classes,
                "provenance": ds.provenance, "meta": ds.meta}
    if ds.base is not None:
        tensorio.save_tensor(d / "base.dstf", ds.base)
        manifest["base"] = "base.dstf"
    if ds.spurious is not None:
        tensorio.save_tensor(d / "spurious.dstf", ds.spurious.astype(np.uint32))
        manifest["spurious"] = "spurious.dstf"
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> LabeledDataset:
    path = Path(manifest_path)
    m = json.loads(path.read_text())
    root = path.parent
    spurious = tensorio.load_tensor(root / m["spurious"]) if m.get("spurious") else None
    base = tensorio.load_tensor(root / m["base"]) if m.get("base") else None
    return LabeledDataset(tensorio.load_tensor(root / m["images"]),
                          tensorio.load_tensor(root / m["labels"]),
                          int(m["classes"]), spurious=spurious, provenance=m.get("provenance", ""),
                          base=base, meta=m.get("meta", {}))
