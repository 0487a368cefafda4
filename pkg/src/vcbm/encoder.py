"""Dual-view tubelet tokenizer.

Each view is cut into non-overlapping (t_p, h_p, w_p) tubelets which are
flattened and linearly projected. Token coordinates are tubelet centres in
normalized [0, 1] units, which the token merger uses for its spatial and
temporal distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

VIEWS = ("gaze", "front")


class AlignmentError(ValueError):
    pass


@dataclass
class VideoClip:
    view: str
    frames: np.ndarray  # (T, H, W, C) in [0, 1]
    frame_times: np.ndarray | None = None

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or min(self.frames.shape) <= 0:
            raise ValueError(f"clip frames must be a non-empty T x H x W x C array, got {self.frames.shape}")
        if not np.isfinite(self.frames).all() or self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("clip values must be finite and within [0, 1]")
        if self.frame_times is None:
            self.frame_times = np.arange(self.frames.shape[0], dtype=np.float64)
        elif len(self.frame_times) != self.frames.shape[0]:
            raise ValueError("frame_times must have one entry per frame")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape


@dataclass
class TokenSet:
    """Token features ``(..., N, Dim)`` plus shared ``(N, 3)`` (x, y, t) coords."""

    features: Tensor
    coords: np.ndarray

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


@dataclass
class EncoderParams:
    weight: Tensor  # (t_p*h_p*w_p*C, Dim)
    bias: Tensor  # (Dim,)

    @classmethod
    def init(cls, rng: np.random.Generator, patch_dim: int, dim: int, prefix: str = "enc") -> "EncoderParams":
        w = rng.normal(0.0, np.sqrt(1.0 / patch_dim), size=(patch_dim, dim))
        return cls(tape.parameter(w, f"{prefix}.weight"), tape.parameter(np.zeros(dim), f"{prefix}.bias"))


def token_grid(shape, tubelet) -> tuple[int, int, int]:
    """Number of tubelets along (t, h, w); raises if any axis does not divide."""
    t, h, w = shape[:3]
    out = []
    for axis, n, p in zip(("T", "H", "W"), (t, h, w), tubelet):
        if p <= 0 or n % p:
            raise ValueError(f"tubelet size {p} does not divide {axis}={n}")
        out.append(n // p)
    return tuple(out)


def tubelet_coords(shape, tubelet) -> np.ndarray:
    t, h, w = shape[:3]
    nt, nh, nw = token_grid(shape, tubelet)
    tp, hp, wp = tubelet
    ti, hi, wi = np.meshgrid(np.arange(nt), np.arange(nh), np.arange(nw), indexing="ij")
    x = (wi.ravel() * wp + wp / 2) / w
    y = (hi.ravel() * hp + hp / 2) / h
    tt = (ti.ravel() * tp + tp / 2) / t
    return np.stack([x, y, tt], axis=1)


def tubelet_patches(frames: np.ndarray, tubelet) -> np.ndarray:
    """(..., T, H, W, C) -> (..., N, t_p*h_p*w_p*C), tokens in (t, h, w) order."""
    *lead, t, h, w, c = frames.shape
    nt, nh, nw = token_grid((t, h, w), tubelet)
    tp, hp, wp = tubelet
    x = frames.reshape(*lead, nt, tp, nh, hp, nw, wp, c)
    k = len(lead)
    perm = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    return x.transpose(perm).reshape(*lead, nt * nh * nw, tp * hp * wp * c)


def embed_frames(frames: np.ndarray, tubelet, params: EncoderParams) -> TokenSet:
    """Batched tubelet embedding of a ``(..., T, H, W, C)`` array."""
    patches = tubelet_patches(np.asarray(frames, dtype=np.float64), tubelet)
    if params.weight.shape[0] != patches.shape[-1]:
        raise ValueError(
            f"projection expects {params.weight.shape[0]} inputs per tubelet, got {patches.shape[-1]}"
        )
    feats = tape.add(tape.matmul(Tensor(patches), params.weight), params.bias)
    return TokenSet(feats, tubelet_coords(frames.shape[-4:], tubelet))


def tubelet_embed(clip: VideoClip, tubelet_size, dim: int, params: EncoderParams) -> TokenSet:
    if params.weight.shape[1] != dim:
        raise ValueError(f"projection has width {params.weight.shape[1]}, requested dim {dim}")
    return embed_frames(clip.frames, tubelet_size, params)


def fuse_views(gaze_tokens: TokenSet, front_tokens: TokenSet) -> TokenSet:
    """Concatenate per-token features on the channel axis (gaze first)."""
    if gaze_tokens.n != front_tokens.n:
        raise AlignmentError(f"views have different token counts: {gaze_tokens.n} vs {front_tokens.n}")
    if not np.array_equal(gaze_tokens.coords, front_tokens.coords):
        raise AlignmentError("views were tokenized on different grids")
    if gaze_tokens.features.shape[:-1] != front_tokens.features.shape[:-1]:
        raise AlignmentError(
            f"feature shapes {gaze_tokens.features.shape} and {front_tokens.features.shape} do not align"
        )
    feats = tape.concat([gaze_tokens.features, front_tokens.features], axis=-1)
    return TokenSet(feats, front_tokens.coords.copy())
