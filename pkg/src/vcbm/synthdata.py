"""Planted-concept dual-view videos and the data transforms used in training.

Every explanation is a glyph (a colour plus an 8x8 shape) drawn in one cell
of the front view. A maneuver is fully determined by the set of glyphs via
:func:`maneuver_for`; the gaze trajectory follows the glyph that caused the
maneuver. Two explanations are purely temporal: their lamp glyph is present
in every scene, and the explanation is active only when the lamp blinks
(on, on, off, off at native frame rate) rather than glowing steadily at half
intensity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import VideoClip
from .schema import EGO_EXPLANATIONS, MANEUVERS, N_EXPLANATIONS, N_GAZE

log = logging.getLogger(__name__)

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")
SEVERITIES = (1, 2, 4, 8, 16)
N_SAMPLED_FRAMES = 16
CELL = 8

TEMPORAL_CONCEPTS = (14, 15)

# Rule table: the first maneuver in PRIORITY whose cause set meets the
# concept set wins; a set with no cause at all means going straight.
PRIORITY = ("SS", "UT", "LT", "RT", "LLC", "RLC", "ST")
CAUSES = {
    "ST": (8, 13),
    "RT": (3,),
    "LT": (2,),
    "RLC": (5,),
    "LLC": (4,),
    "SS": (1, 7, 12),
    "UT": (9,),
}


@dataclass(frozen=True)
class ManeuverProfile:
    extra_cause_p: float = 0.0
    optional: tuple[tuple[int, float], ...] = ()
    forced: tuple[int, ...] = ()


PROFILES = {
    "ST": ManeuverProfile(0.3, ((0, 0.5), (16, 0.2))),
    "RT": ManeuverProfile(0.0, ((0, 0.5), (11, 0.5), (16, 0.2))),
    "LT": ManeuverProfile(0.0, ((0, 0.5), (11, 0.5), (16, 0.2))),
    "RLC": ManeuverProfile(0.0, ((6, 0.6), (16, 0.2))),
    "LLC": ManeuverProfile(0.0, ((6, 0.6), (16, 0.2))),
    "SS": ManeuverProfile(0.3, ((11, 0.3), (16, 0.2))),
    "UT": ManeuverProfile(0.0, ((11, 0.5), (16, 0.2)), forced=(10,)),
}

# zipf ranks follow the observed long tail: left turns most, U-turns least
ZIPF_RANK = ("LT", "ST", "RT", "SS", "LLC", "RLC", "UT")


def maneuver_for(concepts: Iterable[int]) -> str:
    present = set(concepts)
    for m in PRIORITY:
        if present.intersection(CAUSES[m]):
            return m
    return "ST"


# ---------------------------------------------------------------------------
# glyphs


def _shape_masks() -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:CELL, 0:CELL].astype(float)
    cy = cx = (CELL - 1) / 2
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    m = {
        "disc": r2 <= 3.2**2,
        "small_disc": r2 <= 2.3**2,
        "ring": (r2 <= 3.5**2) & (r2 >= 2.0**2),
        "square": (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6),
        "frame": ((yy == 1) | (yy == 6) | (xx == 1) | (xx == 6)) & (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6),
        "cross": (np.abs(yy - cy) < 1) | (np.abs(xx - cx) < 1),
        "hbar": (yy >= 3) & (yy <= 4) & (xx >= 1) & (xx <= 6),
        "lbar": (xx >= 1) & (xx <= 2) & (yy >= 1) & (yy <= 6),
        "rbar": (xx >= 5) & (xx <= 6) & (yy >= 1) & (yy <= 6),
        "diamond": (np.abs(yy - cy) + np.abs(xx - cx)) <= 3.5,
        "checker": ((yy.astype(int) // 2 + xx.astype(int) // 2) % 2 == 0),
        "tri_left": (xx >= np.abs(yy - cy) + 0.5) & (xx <= 6.5),
        "tri_right": (CELL - 1 - xx >= np.abs(yy - cy) + 0.5) & (xx >= 0.5),
        "tri_up": (yy >= np.abs(xx - cx) + 0.5) & (yy <= 6.5),
        "tri_down": (CELL - 1 - yy >= np.abs(xx - cx) + 0.5) & (yy >= 0.5),
    }
    return {k: v.astype(np.float64) for k, v in m.items()}


SHAPES = _shape_masks()

GLYPHS: tuple[tuple[str, tuple[float, float, float]], ...] = (
    ("disc", (0.1, 0.9, 0.2)),  # green signal
    ("disc", (0.95, 0.1, 0.1)),  # red signal
    ("tri_left", (1.0, 1.0, 1.0)),
    ("tri_right", (1.0, 1.0, 1.0)),
    ("lbar", (0.1, 0.9, 0.9)),
    ("rbar", (0.1, 0.9, 0.9)),
    ("square", (1.0, 0.9, 0.1)),
    ("cross", (0.9, 0.2, 0.9)),
    ("hbar", (0.4, 0.6, 1.0)),
    ("ring", (1.0, 0.55, 0.1)),
    ("diamond", (0.6, 0.4, 0.2)),
    ("frame", (1.0, 1.0, 1.0)),
    ("checker", (1.0, 0.9, 0.1)),
    ("tri_up", (0.8, 0.3, 0.5)),
    ("small_disc", (1.0, 0.6, 0.0)),  # indicator lamp
    ("diamond", (0.2, 0.3, 1.0)),  # hazard lamp
    ("tri_down", (0.5, 1.0, 0.5)),
)
assert len(GLYPHS) == N_EXPLANATIONS


def blink_on(t: np.ndarray) -> np.ndarray:
    return (np.asarray(t) // 2) % 2 == 0


@dataclass(frozen=True)
class Placement:
    concept: int
    row: int  # cell indices
    col: int
    mode: str = "steady"  # "steady" | "blink" | "dim"


def render_scene(placements: Sequence[Placement], shape, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Render placements into a float (T, H, W, C) clip on a black background."""
    t, h, w, c = shape
    frames = np.zeros(shape, dtype=np.float64)
    times = np.arange(t)
    for p in placements:
        shape_name, color = GLYPHS[p.concept]
        col = np.asarray(color)
        if c == 1:
            col = np.array([col.mean()])
        elif c != 3:
            raise ValueError(f"channels must be 1 or 3, got {c}")
        patch = SHAPES[shape_name][:, :, None] * col  # (CELL, CELL, C)
        if p.mode == "blink":
            level = blink_on(times).astype(np.float64)
        elif p.mode == "dim":
            level = np.full(t, 0.5)
        else:
            level = np.ones(t)
        y0, x0 = p.row * CELL, p.col * CELL
        region = frames[:, y0 : y0 + CELL, x0 : x0 + CELL, :]
        np.maximum(region, level[:, None, None, None] * patch, out=region)
    if noise > 0:
        frames += rng.normal(0.0, noise, size=frames.shape)
        np.clip(frames, 0.0, 1.0, out=frames)
    return frames


def to_u8(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# records


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    maneuver: str
    ego_explanations: tuple[int, ...]
    gaze_explanation: int
    split: str | None = None
    front_clip: str | None = None
    gaze_track: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ego_explanations", tuple(int(b) for b in self.ego_explanations))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.sample_id, str) or not self.sample_id:
            raise AnnotationError("sample_id must be a non-empty string")
        if self.maneuver not in MANEUVERS:
            raise AnnotationError(f"{self.sample_id}: unknown maneuver {self.maneuver!r}")
        e = self.ego_explanations
        if len(e) != N_EXPLANATIONS or any(b not in (0, 1) for b in e):
            raise AnnotationError(f"{self.sample_id}: ego_explanations must be {N_EXPLANATIONS} bits")
        if not any(e):
            raise AnnotationError(f"{self.sample_id}: at least one ego explanation must be set")
        if not isinstance(self.gaze_explanation, int) or not 0 <= self.gaze_explanation < N_GAZE:
            raise AnnotationError(f"{self.sample_id}: gaze_explanation must be an id in [0, {N_GAZE})")
        if self.split is not None and self.split not in SPLITS:
            raise AnnotationError(f"{self.sample_id}: unknown split {self.split!r}")

    @property
    def label(self) -> int:
        return MANEUVERS.index(self.maneuver)

    @property
    def concepts(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.ego_explanations) if b)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["ego_explanations"] = list(self.ego_explanations)
        return d


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


_RECORD_FIELDS = {f.name for f in dataclasses.fields(AnnotationRecord)}


def load_annotations(path) -> list[AnnotationRecord]:
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise AnnotationError("record is not a JSON object")
                rec = AnnotationRecord(**{k: v for k, v in raw.items() if k in _RECORD_FIELDS})
            except (json.JSONDecodeError, TypeError, AnnotationError) as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            if rec.sample_id in seen:
                raise AnnotationError(f"{path}:{lineno}: duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# gaze views


def gaze_crop(frame: np.ndarray, center, radius: float) -> np.ndarray:
    """Keep pixels within ``radius`` of ``center=(u, v)`` (column, row); zero the rest."""
    h, w = frame.shape[:2]
    u, v = center
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        raise ValueError(f"gaze centre {center} lies outside a {w}x{h} frame")
    yy, xx = np.mgrid[0:h, 0:w]
    keep = (xx - u) ** 2 + (yy - v) ** 2 <= radius * radius
    return frame * keep.reshape(h, w, *([1] * (frame.ndim - 2)))


@dataclass(frozen=True)
class GazeVariant:
    kind: str = "crop"  # "none" | "overlaid" | "crop"
    radius: float = 16.0
    overlay_radius: float = 3.0
    overlay_intensity: float = 1.0

    @classmethod
    def parse(cls, spec) -> "GazeVariant":
        if isinstance(spec, GazeVariant):
            return spec
        s = str(spec).strip().lower()
        if s in ("none", "overlaid"):
            return cls(kind=s)
        if s == "crop":
            return cls()
        if s.startswith("crop:"):
            s = s[5:]
        try:
            r = float(s)
        except ValueError:
            raise ValueError(f"unknown gaze variant {spec!r}; use none, overlaid, crop or crop:<radius>") from None
        if r < 0:
            raise ValueError(f"crop radius must be >= 0, got {r}")
        return cls(kind="crop", radius=r)

    def __str__(self) -> str:
        return f"crop:{self.radius:g}" if self.kind == "crop" else self.kind


def render_gaze(front: np.ndarray, track: np.ndarray, variant: GazeVariant) -> np.ndarray:
    """Driver-view frames ``(T, H, W, C)`` for one gaze variant."""
    if variant.kind == "none":
        return np.zeros_like(front)
    t, h, w = front.shape[:3]
    yy, xx = np.mgrid[0:h, 0:w]
    u = track[:, 0, None, None]
    v = track[:, 1, None, None]
    d2 = (xx[None] - u) ** 2 + (yy[None] - v) ** 2
    if variant.kind == "crop":
        return front * (d2 <= variant.radius**2)[..., None]
    if variant.kind == "overlaid":
        out = front.copy()
        disc = d2 <= variant.overlay_radius**2
        out[disc] = variant.overlay_intensity
        return out
    raise ValueError(f"unknown gaze variant kind {variant.kind!r}")


# ---------------------------------------------------------------------------
# temporal resampling


def check_severity(s: int) -> int:
    if s not in SEVERITIES:
        raise ValueError(f"shuffle severity must be one of {SEVERITIES}, got {s!r}")
    return int(s)


def shuffle_indices(n_frames: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Frame indices for severity ``s``: 16 segments, merged s at a time, s draws each."""
    check_severity(s)
    if n_frames < N_SAMPLED_FRAMES:
        raise ValueError(f"need at least {N_SAMPLED_FRAMES} frames, got {n_frames}")
    seg = n_frames // N_SAMPLED_FRAMES
    out = []
    for m in range(N_SAMPLED_FRAMES // s):
        lo = m * s * seg
        hi = n_frames if m == N_SAMPLED_FRAMES // s - 1 else (m + 1) * s * seg
        out.append(lo + np.sort(rng.choice(hi - lo, size=s, replace=False)))
    return np.concatenate(out)


def shuffle_severity(frames, s: int, rng: np.random.Generator):
    idx = shuffle_indices(len(frames), s, rng)
    if isinstance(frames, np.ndarray):
        return frames[idx]
    return [frames[i] for i in idx]


# ---------------------------------------------------------------------------
# splitting


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    base = [int(math.floor(q + 1e-9)) for q in quotas]
    left = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def stratified_split(records: Sequence[AnnotationRecord], ratios=(0.7, 0.2, 0.1), seed: int = 0) -> list[AnnotationRecord]:
    """Assign train/val/test per maneuver stratum with largest-remainder rounding.

    Ties in the remainder go to train, then val, then test. Strata with
    fewer than three members go entirely to train.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    assigned: dict[str, str] = {}
    for li, label in enumerate(MANEUVERS):
        members = sorted(r.sample_id for r in records if r.maneuver == label)
        if not members:
            continue
        rng = np.random.default_rng([seed, li])
        members = [members[i] for i in rng.permutation(len(members))]
        counts = _largest_remainder(len(members), ratios) if len(members) >= 3 else [len(members), 0, 0]
        it = iter(members)
        for split, c in zip(SPLITS, counts):
            for sid in itertools.islice(it, c):
                assigned[sid] = split
    return [dataclasses.replace(r, split=assigned[r.sample_id]) for r in records]


def split_counts(records: Iterable[AnnotationRecord]) -> dict[str, dict[str, int]]:
    out = {m: {s: 0 for s in SPLITS} for m in MANEUVERS}
    for r in records:
        out[r.maneuver][r.split] += 1
    return out


# ---------------------------------------------------------------------------
# generation


@dataclass
class GeneratorConfig:
    shape: tuple[int, int, int, int] = (32, 64, 64, 3)
    noise: float = 0.05
    frequency: tuple[float, ...] | str = "zipf"
    lamps: bool = True
    gaze_jitter: float = 1.0
    distinct: bool = False

    def __post_init__(self):
        self.shape = tuple(int(x) for x in self.shape)
        t, h, w, c = self.shape
        if t < N_SAMPLED_FRAMES or h % CELL or w % CELL or h < 2 * CELL or w < 2 * CELL or c not in (1, 3):
            raise ValueError(
                f"shape {self.shape} unsupported: need T >= {N_SAMPLED_FRAMES}, H and W multiples of {CELL}"
                f" (at least {2 * CELL}), C in (1, 3)"
            )

        lamps = set(TEMPORAL_CONCEPTS) if self.lamps else set()
        most = max(len(x | lamps) for m in MANEUVERS for x in concept_support(m, self.lamps))
        if (h // CELL) * (w // CELL) < most:
            raise ValueError(f"shape {self.shape} has {(h // CELL) * (w // CELL)} glyph cells; scenes need up to {most}")

    def weights(self) -> np.ndarray:
        return frequency_profile(self.frequency)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shape"] = list(self.shape)
        d["frequency"] = self.frequency if isinstance(self.frequency, str) else list(self.frequency)
        return d


def frequency_profile(spec) -> np.ndarray:
    """Maneuver sampling weights (MANEUVERS order) from 'zipf[:a]', 'uniform' or 7 numbers."""
    if isinstance(spec, str):
        s = spec.strip().lower()
        if s == "uniform":
            w = np.ones(len(MANEUVERS))
        elif s.startswith("zipf"):
            a = float(s.split(":", 1)[1]) if ":" in s else 1.0
            w = np.array([1.0 / (ZIPF_RANK.index(m) + 1) ** a for m in MANEUVERS])
        else:
            w = np.array([float(x) for x in s.split(",")])
    else:
        w = np.asarray(spec, dtype=np.float64)
    if w.shape != (len(MANEUVERS),) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"frequency profile must give {len(MANEUVERS)} non-negative weights, got {spec!r}")
    return w / w.sum()


def concept_support(maneuver: str, lamps: bool = True) -> list[frozenset[int]]:
    """Every concept set the generator can emit for ``maneuver``."""
    prof = PROFILES[maneuver]
    causes = [(c,) for c in CAUSES[maneuver]]
    if prof.extra_cause_p > 0:
        causes += list(itertools.combinations(CAUSES[maneuver], 2))
    optional = [c for c, _ in prof.optional] + (list(TEMPORAL_CONCEPTS) if lamps else [])
    out = []
    for cause in causes:
        for k in range(len(optional) + 1):
            for extra in itertools.combinations(optional, k):
                out.append(frozenset(cause + prof.forced + extra))
    return out


def _draw_concepts(maneuver: str, rng: np.random.Generator, lamps: bool) -> tuple[list[int], list[int]]:
    prof = PROFILES[maneuver]
    pool = list(CAUSES[maneuver])
    causes = [pool.pop(rng.integers(len(pool)))]
    if pool and rng.random() < prof.extra_cause_p:
        causes.append(pool.pop(rng.integers(len(pool))))
    ctx = list(prof.forced)
    for c, p in prof.optional:
        if rng.random() < p:
            ctx.append(c)
    blinking = [c for c in TEMPORAL_CONCEPTS if lamps and rng.random() < 0.5]
    return causes, ctx + blinking


def gaze_region(u: float, v: float, width: int, height: int) -> int:
    col = min(4, int(u / width * 5))
    row = min(2, int(v / height * 3))
    return row * 5 + col


@dataclass
class Sample:
    """One generated sample; unpacks as ``(gaze_clip, front_clip, record)``."""

    record: AnnotationRecord
    front_u8: np.ndarray  # (T, H, W, C) uint8, value / 255 in [0, 1]
    gaze_track: np.ndarray  # (T, 2) pixel (u, v) per frame
    placements: tuple[Placement, ...] = ()
    gaze_variant: GazeVariant = field(default_factory=GazeVariant)

    @property
    def front(self) -> VideoClip:
        return VideoClip("front", self.front_u8 / 255.0)

    def gaze_clip(self, variant: GazeVariant | str | None = None) -> VideoClip:
        v = self.gaze_variant if variant is None else GazeVariant.parse(variant)
        return VideoClip("gaze", render_gaze(self.front_u8 / 255.0, self.gaze_track, v))

    @property
    def gaze(self) -> VideoClip:
        return self.gaze_clip()

    def __iter__(self):
        return iter((self.gaze, self.front, self.record))


def _render_sample(index: int, maneuver: str, seed: int, cfg: GeneratorConfig, causes=None, ctx=None) -> Sample:
    t, h, w, c = cfg.shape
    rng = np.random.default_rng([seed, 1, index])
    if causes is None:
        causes, ctx = _draw_concepts(maneuver, rng, cfg.lamps)
    active = sorted(set(causes) | set(ctx))
    shown = sorted(set(active) | (set(TEMPORAL_CONCEPTS) if cfg.lamps else set()))
    cells = rng.choice((h // CELL) * (w // CELL), size=len(shown), replace=False)
    placements = []
    for concept, cell in zip(shown, cells):
        mode = "steady"
        if concept in TEMPORAL_CONCEPTS:
            mode = "blink" if concept in active else "dim"
        placements.append(Placement(concept, int(cell) // (w // CELL), int(cell) % (w // CELL), mode))
    frames = render_scene(placements, cfg.shape, cfg.noise, rng)
    target = next(p for p in placements if p.concept == causes[0])
    centre = np.array([target.col * CELL + (CELL - 1) / 2, target.row * CELL + (CELL - 1) / 2])
    track = centre + rng.normal(0.0, cfg.gaze_jitter, size=(t, 2))
    track[:, 0] = np.clip(track[:, 0], 0, w - 1)
    track[:, 1] = np.clip(track[:, 1], 0, h - 1)
    bits = [1 if i in active else 0 for i in range(N_EXPLANATIONS)]
    mean_u, mean_v = track.mean(axis=0)
    record = AnnotationRecord(
        sample_id=f"s{index:05d}",
        maneuver=maneuver,
        ego_explanations=tuple(bits),
        gaze_explanation=gaze_region(mean_u, mean_v, w, h),
    )
    return Sample(record, to_u8(frames), track, tuple(placements))


def generate(n: int, seed: int, shape=None, config: GeneratorConfig | None = None) -> list[Sample]:
    """Generate ``n`` labelled samples; identical for identical (n, seed, config)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if config is None:
        cfg = GeneratorConfig() if shape is None else GeneratorConfig(shape=shape)
    else:
        cfg = config
        if shape is not None and tuple(shape) != cfg.shape:
            raise ValueError(f"shape {tuple(shape)} conflicts with config shape {cfg.shape}")
    counts = _largest_remainder(n, cfg.weights())
    labels = [m for m, k in zip(MANEUVERS, counts) for _ in range(k)]
    order = np.random.default_rng([seed, 0]).permutation(n)
    labels = [labels[i] for i in order]

    if cfg.distinct:
        for m, k in zip(MANEUVERS, counts):
            support = len(concept_support(m, cfg.lamps))
            if k > support:
                raise ValueError(f"{k} distinct {m} samples requested but only {support} concept sets exist")

    samples, used = [], set()
    for i, m in enumerate(labels):
        if cfg.distinct:
            rng = np.random.default_rng([seed, 2, i])
            options = [s for s in concept_support(m, cfg.lamps) if s not in used]
            pick = sorted(options[rng.integers(len(options))])
            used.add(frozenset(pick))
            causes = [c for c in pick if c in CAUSES[m]]
            rng.shuffle(causes)
            ctx = [c for c in pick if c not in CAUSES[m]]
            samples.append(_render_sample(i, m, seed, cfg, causes, ctx))
        else:
            samples.append(_render_sample(i, m, seed, cfg))
    return samples


def assign_splits(samples: Sequence[Sample], ratios=(0.7, 0.2, 0.1), seed: int = 0) -> list[Sample]:
    records = stratified_split([s.record for s in samples], ratios, seed)
    return [dataclasses.replace(s, record=r) for s, r in zip(samples, records)]


# ---------------------------------------------------------------------------
# batching


def make_batch(samples: Sequence[Sample], severity: int, variant: GazeVariant, rngs) -> tuple[np.ndarray, np.ndarray]:
    """Float (B, 16, H, W, C) gaze and front arrays after temporal resampling."""
    gaze, front = [], []
    for s, rng in zip(samples, rngs):
        idx = shuffle_indices(s.front_u8.shape[0], severity, rng)
        f = s.front_u8[idx] / 255.0
        front.append(f)
        gaze.append(render_gaze(f, s.gaze_track[idx], variant))
    return np.stack(gaze), np.stack(front)


def labels_of(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    y = np.array([s.record.label for s in samples], dtype=np.int64)
    e = np.array([s.record.ego_explanations for s in samples], dtype=np.float64)
    return y, e


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(out_dir, samples: Sequence[Sample], info: dict) -> list[AnnotationRecord]:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        sid = s.record.sample_id
        d = out / "clips" / sid
        d.mkdir(exist_ok=True)
        np.save(d / "front.npy", s.front_u8)
        np.save(d / "gaze.npy", s.gaze_track)
        meta = {
            "sample_id": sid,
            "views": {
                "front": {"file": "front.npy", "view": "front", "shape": list(s.front_u8.shape), "dtype": "uint8", "scale": 255},
                "gaze": {"file": "gaze.npy", "view": "gaze", "kind": "gaze_track", "shape": list(s.gaze_track.shape)},
            },
        }
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        records.append(
            dataclasses.replace(s.record, front_clip=f"clips/{sid}/front.npy", gaze_track=f"clips/{sid}/gaze.npy")
        )
    write_annotations(out / "manifest.jsonl", records)
    doc = {"format": "vcbm-dataset", "version": DATASET_VERSION, **info}
    (out / "dataset.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    return records


def load_dataset(path) -> tuple[list[Sample], dict]:
    root = Path(path)
    info_path = root / "dataset.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    if info and info.get("version") != DATASET_VERSION:
        raise AnnotationError(f"{root}: unsupported dataset version {info.get('version')!r}")
    samples = []
    for rec in load_annotations(root / "manifest.jsonl"):
        if rec.front_clip is None or rec.gaze_track is None:
            raise AnnotationError(f"{rec.sample_id}: record has no clip references")
        front = np.load(root / rec.front_clip)
        track = np.load(root / rec.gaze_track)
        if front.dtype != np.uint8 or front.ndim != 4 or track.shape != (front.shape[0], 2):
            raise AnnotationError(f"{rec.sample_id}: clip files have unexpected shape or dtype")
        samples.append(Sample(rec, front, track))
    return samples, info


def dataset_checksum(path) -> str:
    """sha256 over every file's relative path and bytes; run manifests are excluded."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "run_manifest.json"):
        h.update(str(f.relative_to(root)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()
