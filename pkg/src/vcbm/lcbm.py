"""Localized concept bottleneck and the assembled video model.

One affine unit per explanation is applied to every merged token and the
per-token logits are averaged afterwards (late averaging). A linear layer
maps the 17 explanation logits to the 7 maneuver logits; its L1 norm is
penalized during training so each maneuver reads off a few explanations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape
from .encoder import EncoderParams, TokenSet, embed_frames, fuse_views, token_grid
from .ltm import ClusterParams, MergedTokenSet, check_cluster_count, merge
from .schema import N_EXPLANATIONS, N_MANEUVERS
from .tape import Tensor


@dataclass
class BottleneckParams:
    head_weight: Tensor  # (Dim', 17); column j is explanation j's unit
    head_bias: Tensor  # (17,)
    final_weight: Tensor  # (7, 17)
    final_bias: Tensor  # (7,)
    l1_strength: float = 1e-3

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, l1_strength: float = 1e-3) -> "BottleneckParams":
        return cls(
            tape.parameter(rng.normal(0.0, np.sqrt(1.0 / dim), (dim, N_EXPLANATIONS)), "lcbm.head_weight"),
            tape.parameter(np.zeros(N_EXPLANATIONS), "lcbm.head_bias"),
            tape.parameter(
                rng.normal(0.0, np.sqrt(1.0 / N_EXPLANATIONS), (N_MANEUVERS, N_EXPLANATIONS)),
                "lcbm.final_weight",
            ),
            tape.parameter(np.zeros(N_MANEUVERS), "lcbm.final_bias"),
            l1_strength,
        )

    def head(self, j: int) -> tuple[np.ndarray, float]:
        return self.head_weight.data[:, j], float(self.head_bias.data[j])

    def l1_penalty(self) -> Tensor:
        return tape.scalar_mul(tape.sum(tape.absolute(self.final_weight)), self.l1_strength)


@dataclass
class Prediction:
    """Batched outputs; every field carries a leading sample axis."""

    per_token_expl: Tensor  # (B, K, 17)
    expl_logits: Tensor  # (B, 17)
    expl_probs: Tensor  # (B, 17)
    maneuver_logits: Tensor  # (B, 7)
    maneuver_probs: Tensor  # (B, 7)
    pooled: Tensor | None = None  # (B, Dim') mean of the tokens fed to the heads

    def __len__(self) -> int:
        return self.expl_logits.shape[0]


def _features(merged) -> Tensor:
    return merged.features if isinstance(merged, (MergedTokenSet, TokenSet)) else tape.as_tensor(merged)


def explanation_logits(merged, params: BottleneckParams) -> tuple[Tensor, Tensor]:
    feats = _features(merged)
    if feats.shape[-1] != params.head_weight.shape[0]:
        raise ValueError(f"merged width {feats.shape[-1]} != head width {params.head_weight.shape[0]}")
    per_token = tape.add(tape.matmul(feats, params.head_weight), params.head_bias)
    return per_token, tape.mean(per_token, axis=-2)


def pooled_explanation_logits(merged, params: BottleneckParams) -> Tensor:
    """Pool first, then one joint linear head (the no-LCBM ablation)."""
    pooled = tape.mean(_features(merged), axis=-2, keepdims=True)
    return tape.add(tape.matmul(pooled, params.head_weight), params.head_bias)


def maneuver_logits(expl, params: BottleneckParams) -> Tensor:
    expl = tape.as_tensor(expl)
    if expl.shape[-1] != N_EXPLANATIONS:
        raise ValueError(f"expected {N_EXPLANATIONS} explanation inputs, got {expl.shape[-1]}")
    squeeze = expl.ndim == 1
    if squeeze:
        expl = tape.reshape(expl, (1, N_EXPLANATIONS))
    out = tape.add(tape.matmul(expl, params.final_weight, transpose_b=True), params.final_bias)
    return tape.reshape(out, (N_MANEUVERS,)) if squeeze else out


@dataclass
class ModelConfig:
    frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3
    tubelet: tuple[int, int, int] = (4, 8, 8)
    dim: int = 16  # per view; fused width is 2 * dim
    k: int = 5
    ltm_on: bool = True
    lcbm_on: bool = True
    use_probabilities_for_f: bool = False
    ltm_iterations: int = 1
    l1_strength: float = 1e-3

    def __post_init__(self):
        self.tubelet = tuple(int(x) for x in self.tubelet)

    @property
    def n_tokens(self) -> int:
        nt, nh, nw = token_grid((self.frames, self.height, self.width), self.tubelet)
        return nt * nh * nw

    @property
    def patch_dim(self) -> int:
        tp, hp, wp = self.tubelet
        return tp * hp * wp * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tubelet"] = list(self.tubelet)
        return d


@dataclass
class VCBM:
    config: ModelConfig
    gaze_encoder: EncoderParams
    front_encoder: EncoderParams
    clusters: ClusterParams
    bottleneck: BottleneckParams
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "VCBM":
        check_cluster_count(config.k, config.n_tokens)
        rng = np.random.default_rng([seed, 0])
        gaze = EncoderParams.init(rng, config.patch_dim, config.dim, "enc.gaze")
        front = EncoderParams.init(rng, config.patch_dim, config.dim, "enc.front")
        clusters = ClusterParams.init(rng, config.k, 2 * config.dim)
        bottleneck = BottleneckParams.init(rng, 2 * config.dim, config.l1_strength)
        return cls(config, gaze, front, clusters, bottleneck)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "enc.gaze.weight": self.gaze_encoder.weight,
            "enc.gaze.bias": self.gaze_encoder.bias,
            "enc.front.weight": self.front_encoder.weight,
            "enc.front.bias": self.front_encoder.bias,
            "ltm.centers": self.clusters.centers,
            "ltm.positions": self.clusters.positions,
            "ltm.weight_logits": self.clusters.weight_logits,
            "lcbm.head_weight": self.bottleneck.head_weight,
            "lcbm.head_bias": self.bottleneck.head_bias,
            "lcbm.final_weight": self.bottleneck.final_weight,
            "lcbm.final_bias": self.bottleneck.final_bias,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def tokens(self, gaze_frames: np.ndarray, front_frames: np.ndarray) -> TokenSet:
        tub = self.config.tubelet
        return fuse_views(
            embed_frames(gaze_frames, tub, self.gaze_encoder),
            embed_frames(front_frames, tub, self.front_encoder),
        )

    def forward_batch(self, gaze_frames: np.ndarray, front_frames: np.ndarray) -> Prediction:
        """Run the whole pipeline on ``(B, T, H, W, C)`` gaze and front arrays."""
        cfg = self.config
        fused = self.tokens(gaze_frames, front_frames)
        if cfg.ltm_on:
            merged = merge(fused, self.clusters, cfg.ltm_iterations).features
        else:
            merged = fused.features
        pooled = tape.mean(merged, axis=-2)
        if cfg.lcbm_on:
            per_token, expl = explanation_logits(merged, self.bottleneck)
        else:
            per_token = pooled_explanation_logits(merged, self.bottleneck)
            expl = tape.reshape(per_token, (per_token.shape[0], N_EXPLANATIONS))
        probs = tape.sigmoid(expl)
        man = maneuver_logits(probs if cfg.use_probabilities_for_f else expl, self.bottleneck)
        return Prediction(per_token, expl, probs, man, tape.softmax(man, axis=-1), pooled)


def forward(x_g, x_f, model: VCBM) -> Prediction:
    """Single-sample forward; the returned tensors keep a batch axis of 1."""
    if x_g.frames.shape != x_f.frames.shape:
        raise ValueError(f"gaze clip {x_g.frames.shape} and front clip {x_f.frames.shape} differ in shape")
    return model.forward_batch(x_g.frames[None], x_f.frames[None])
