"""Joint bottleneck training, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tape
from .lcbm import VCBM, ModelConfig, Prediction
from .ltm import check_cluster_count
from .metrics import TABLE_COLUMNS, MetricReport, report
from .schema import N_MANEUVERS
from .synthdata import N_SAMPLED_FRAMES, GazeVariant, Sample, check_severity, labels_of, make_batch
from .tape import Tensor

log = logging.getLogger(__name__)

ABLATION_AXES = ("clusters", "lambda", "severity", "gaze_variant", "components")
COMPONENTS = {"none": (False, False), "ltm": (True, False), "lcbm": (False, True), "ltm+lcbm": (True, True)}


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.5
    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    k: int = 5
    dim: int = 16
    tubelet: tuple[int, int, int] = (4, 8, 8)
    ltm_on: bool = True
    lcbm_on: bool = True
    freeze_distance_weights: bool = False
    use_probabilities_for_f: bool = False
    ltm_iterations: int = 1
    l1_strength: float = 1e-3
    gaze_variant: str = "crop:16"
    shuffle_severity: int = 1
    threshold: float = 0.5
    eval_batch_size: int = 32

    def __post_init__(self):
        self.tubelet = tuple(int(x) for x in self.tubelet)
        self.gaze_variant = str(GazeVariant.parse(self.gaze_variant))
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.l1_strength < 0:
            raise ValueError("l1_strength must be >= 0")
        check_severity(self.shuffle_severity)

    @property
    def variant(self) -> GazeVariant:
        return GazeVariant.parse(self.gaze_variant)

    def model_config(self, frame_shape) -> ModelConfig:
        h, w, c = frame_shape
        return ModelConfig(
            frames=N_SAMPLED_FRAMES,
            height=h,
            width=w,
            channels=c,
            tubelet=self.tubelet,
            dim=self.dim,
            k=self.k,
            ltm_on=self.ltm_on,
            lcbm_on=self.lcbm_on,
            use_probabilities_for_f=self.use_probabilities_for_f,
            ltm_iterations=self.ltm_iterations,
            l1_strength=self.l1_strength,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["tubelet"] = list(self.tubelet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# loss


def _one_hot(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= n):
        raise ValueError(f"maneuver labels must lie in [0, {n}), got {y.tolist()}")
    out = np.zeros((y.size, n))
    out[np.arange(y.size), y] = 1.0
    return out


def loss_terms(pred: Prediction, y, e) -> tuple[Tensor, Tensor]:
    """Batch means of the maneuver cross-entropy and the summed explanation BCEs."""
    logits = pred.maneuver_logits
    onehot = _one_hot(y, N_MANEUVERS)
    if onehot.shape[0] != logits.shape[0]:
        raise ValueError(f"{onehot.shape[0]} labels for a batch of {logits.shape[0]}")
    e = np.asarray(e, dtype=np.float64).reshape(logits.shape[0], -1)
    if not np.isin(e, (0.0, 1.0)).all():
        raise ValueError("explanation targets must be 0/1")
    picked = tape.sum(tape.mul(logits, onehot), axis=-1, keepdims=True)
    l_y = tape.mean(tape.sub(tape.log_sum_exp(logits, axis=-1), picked))
    x = pred.expl_logits
    bce = tape.sub(tape.softplus(x), tape.mul(x, e))
    l_c = tape.mean(tape.sum(bce, axis=-1))
    return l_y, l_c


def joint_loss(pred: Prediction, y, e, lam: float) -> Tensor:
    """L_Y + lam * sum_j L_Cj, averaged over the batch."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    l_y, l_c = loss_terms(pred, y, e)
    return tape.add(l_y, tape.scalar_mul(l_c, lam))


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Mini-batch gradient descent with heavy-ball momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, frozen: Sequence[str] = ()):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.frozen = set(frozen)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        tape.zero_grad(self.params)

    def step(self) -> None:
        for name, p in self.params.items():
            if name in self.frozen or p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
        # cluster positions live in the unit cube
        if "ltm.positions" in self.params:
            np.clip(self.params["ltm.positions"].data, 0.0, 1.0, out=self.params["ltm.positions"].data)


# ---------------------------------------------------------------------------
# evaluation


def _sid_key(sample: Sample) -> int:
    return zlib.crc32(sample.record.sample_id.encode())


def eval_rngs(samples: Sequence[Sample], seed: int):
    return [np.random.default_rng([seed, 3, _sid_key(s)]) for s in samples]


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


@dataclass
class EvalResult:
    report: MetricReport
    maneuver_probs: np.ndarray
    expl_probs: np.ndarray
    pooled: np.ndarray
    l_y: float
    l_c: float


def evaluate(model: VCBM, samples: Sequence[Sample], config: TrainConfig, severity: int | None = None, seed: int | None = None) -> EvalResult:
    """Forward every sample once (fixed per-sample frame draws) and score it."""
    if not samples:
        raise ValueError("nothing to evaluate")
    s = config.shuffle_severity if severity is None else check_severity(severity)
    seed = config.seed if seed is None else seed
    variant = config.variant
    rngs = eval_rngs(samples, seed)
    y, e = labels_of(samples)
    man, expl, pooled = [], [], []
    ly = lc = 0.0
    for sl in _batches(len(samples), config.eval_batch_size):
        g, f = make_batch(samples[sl], s, variant, rngs[sl])
        pred = model.forward_batch(g, f)
        l_y, l_c = loss_terms(pred, y[sl], e[sl])
        n = sl.stop - sl.start
        ly += l_y.item() * n
        lc += l_c.item() * n
        man.append(pred.maneuver_probs.data)
        expl.append(pred.expl_probs.data)
        pooled.append(pred.pooled.data)
    man, expl = np.concatenate(man), np.concatenate(expl)
    rep = report(man, y, expl, e, config.threshold)
    return EvalResult(rep, man, expl, np.concatenate(pooled), ly / len(samples), lc / len(samples))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]

    def to_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.rows, indent=1))


def _log_row(epoch: int, lam: float, l1: float, results: dict[str, EvalResult]) -> dict:
    row = {"epoch": epoch}
    for split, res in results.items():
        total = res.l_y + lam * res.l_c + l1
        row[f"{split}_total_loss"] = total
        row[f"{split}_L_Y"] = res.l_y
        row[f"{split}_L_C"] = res.l_c
        row[f"{split}_l1"] = l1
        for k, v in res.report.row().items():
            row[f"{split}_{k}"] = v
        if abs(total - (row[f"{split}_L_Y"] + lam * row[f"{split}_L_C"] + l1)) > 1e-9:
            raise NumericError("logged loss parts do not add up")
    return row


def _better(cand: tuple[float, float], best: tuple[float, float] | None) -> bool:
    return best is None or cand > best


@dataclass
class TrainState:
    """What a resumed run needs besides the parameters."""

    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    best_state: dict[str, np.ndarray] | None = None
    best_score: tuple[float, float] | None = None
    log: TrainLog = field(default_factory=TrainLog)
    last_state: dict[str, np.ndarray] | None = None


def train(
    model: VCBM,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    config: TrainConfig,
    state: TrainState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[VCBM, TrainLog]:
    """Optimize the joint loss; leaves ``model`` at the best-validation parameters.

    Validation picks the highest maneuver accuracy, ties broken by explanation
    micro-F1. All randomness derives from ``config.seed``, the epoch and the
    sample ids, so a resumed run matches an uninterrupted one.
    """
    if not train_set or not val_set:
        raise ValueError("need non-empty train and validation sets")
    overlap = {s.record.sample_id for s in train_set} & {s.record.sample_id for s in val_set}
    if overlap:
        raise ValueError(f"train and validation share samples: {sorted(overlap)[:5]}")
    state = state or TrainState()
    params = model.parameters()
    frozen = ["ltm.weight_logits"] if config.freeze_distance_weights else []
    opt = SGD(params, config.learning_rate, config.momentum, frozen)
    for k, v in state.velocity.items():
        opt.velocity[k] = v.copy()
    variant = config.variant
    y_all, e_all = labels_of(train_set)
    n = len(train_set)

    for epoch in range(state.epoch, config.epochs):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
        for b, sl in enumerate(_batches(n, config.batch_size)):
            idx = order[sl]
            batch = [train_set[i] for i in idx]
            rngs = [np.random.default_rng([config.seed, 2, epoch, _sid_key(s)]) for s in batch]
            g, f = make_batch(batch, config.shuffle_severity, variant, rngs)
            pred = model.forward_batch(g, f)
            l_y, l_c = loss_terms(pred, y_all[idx], e_all[idx])
            loss = tape.add(tape.add(l_y, tape.scalar_mul(l_c, config.lam)), model.bottleneck.l1_penalty())
            if not np.isfinite(loss.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()

        l1 = model.bottleneck.l1_penalty().item()
        results = {"train": evaluate(model, train_set, config), "val": evaluate(model, val_set, config)}
        row = _log_row(epoch, config.lam, l1, results)
        state.log.append(row)
        score = (row["val_action_acc"], row["val_expl_f1_micro"])
        if _better(score, state.best_score):
            state.best_score = score
            state.best_state = model.state_dict()
        state.epoch = epoch + 1
        state.velocity = {k: v.copy() for k, v in opt.velocity.items()}
        log.info(
            "epoch %d loss %.4f train acc %.3f val acc %.3f val micro-F1 %.3f",
            epoch, row["train_total_loss"], row["train_action_acc"], row["val_action_acc"], row["val_expl_f1_micro"],
        )
        if on_epoch is not None:
            on_epoch(row)

    state.last_state = model.state_dict()
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    return model, state.log


def lambda_gradient_check(model: VCBM, samples: Sequence[Sample], config: TrainConfig) -> dict:
    """Check that the explanation-loss path adds nothing to head gradients at lambda = 0.

    Compares head gradients of (L_Y + 0 * sum L_C) against L_Y alone, and
    confirms the concept term is linear in lambda (1e-9 scaled vs 1).
    """
    rngs = eval_rngs(samples, config.seed)
    g, f = make_batch(samples, config.shuffle_severity, config.variant, rngs)
    y, e = labels_of(samples)
    heads = [model.bottleneck.head_weight, model.bottleneck.head_bias]

    def head_grads(lam: float, with_y: bool = True) -> list[np.ndarray]:
        tape.zero_grad(model.parameters())
        pred = model.forward_batch(g, f)
        l_y, l_c = loss_terms(pred, y, e)
        loss = tape.scalar_mul(l_c, lam)
        if with_y:
            loss = tape.add(l_y, loss)
        tape.backward(loss)
        out = [np.zeros_like(h.data) if h.grad is None else h.grad.copy() for h in heads]
        tape.zero_grad(model.parameters())
        return out

    concept_only = head_grads(0.0, with_y=False)
    at_zero = head_grads(0.0)
    tape.zero_grad(model.parameters())
    l_y, _ = loss_terms(model.forward_batch(g, f), y, e)
    tape.backward(l_y)
    y_only = [np.zeros_like(h.data) if h.grad is None else h.grad.copy() for h in heads]
    tape.zero_grad(model.parameters())
    tiny = head_grads(1e-9, with_y=False)
    unit = head_grads(1.0, with_y=False)
    scale_err = max(float(np.max(np.abs(t / 1e-9 - u))) / max(1.0, float(np.max(np.abs(u)))) for t, u in zip(tiny, unit))
    max_concept = max(float(np.max(np.abs(c))) for c in concept_only)
    identical = all(np.array_equal(a, b) for a, b in zip(at_zero, y_only))
    return {
        "passed": max_concept == 0.0 and identical and scale_err < 1e-6,
        "max_abs_concept_grad_at_zero": max_concept,
        "total_equals_task_grad": identical,
        "lambda_scaling_rel_err": scale_err,
    }


# ---------------------------------------------------------------------------
# ablations


def _axis_config(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "clusters":
        return base.replace(k=int(value))
    if axis == "lambda":
        return base.replace(lam=float(value))
    if axis == "severity":
        return base.replace(shuffle_severity=int(value))
    if axis == "gaze_variant":
        return base.replace(gaze_variant=str(value))
    if axis == "components":
        if str(value) not in COMPONENTS:
            raise ValueError(f"components value must be one of {sorted(COMPONENTS)}, got {value!r}")
        ltm, lcbm = COMPONENTS[str(value)]
        return base.replace(ltm_on=ltm, lcbm_on=lcbm)
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def validate_axis(axis: str, values, base: TrainConfig, frame_shape) -> list[TrainConfig]:
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    if not values:
        raise ValueError("no ablation values given")
    configs = []
    for v in values:
        try:
            cfg = _axis_config(base, axis, v)
            mc = cfg.model_config(frame_shape)
            check_cluster_count(mc.k, mc.n_tokens)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"invalid value {v!r} for axis {axis!r}: {exc}") from None
        configs.append(cfg)
    return configs


def ablate(
    splits: dict[str, Sequence[Sample]],
    axis: str,
    values,
    base: TrainConfig,
) -> list[dict]:
    """Train and test once per value under identical seeds; one table row each."""
    frame_shape = splits["train"][0].front_u8.shape[1:]
    configs = validate_axis(axis, values, base, frame_shape)
    rows = []
    for v, cfg in zip(values, configs):
        model = VCBM.init(cfg.model_config(frame_shape), cfg.seed)
        train(model, splits["train"], splits["val"], cfg)
        res = evaluate(model, splits["test"], cfg)
        rows.append({"axis": axis, "value": str(v), "seed": cfg.seed, **res.report.row()})
    return rows


def write_table(rows: Sequence[dict], path) -> None:
    cols = ["axis", "value", "seed", *TABLE_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r.get(k), float) else r.get(k) for k in cols})


def split_samples(samples: Sequence[Sample]) -> dict[str, list[Sample]]:
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        if s.record.split not in out:
            raise ValueError(f"{s.record.sample_id}: no split assigned")
        out[s.record.split].append(s)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: VCBM, config: TrainConfig, state: TrainState | None = None) -> None:
    """Parameters plus everything needed to resume: epoch, velocity, best-so-far and log."""
    params: dict[str, np.ndarray] = model.state_dict()
    meta = {"train_config": config.to_dict(), "model_config": model.config.to_dict()}
    if state is not None:
        meta.update(epoch=state.epoch, best_score=list(state.best_score) if state.best_score else None, log=state.log.rows)
        params.update({f"velocity.{k}": v for k, v in state.velocity.items()})
        if state.last_state is not None:
            params.update({f"last.{k}": v for k, v in state.last_state.items()})
    tape.save_params(path, params, meta)


def load_checkpoint(path, resume: bool = False) -> tuple[VCBM, TrainConfig, TrainState]:
    """Rebuild model, config and state; the model holds the best parameters
    unless ``resume`` asks for the final-epoch ones."""
    arrays, meta = tape.load_params(path)
    try:
        config = TrainConfig.from_dict(meta["train_config"])
        mc = ModelConfig(**meta["model_config"])
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint metadata lacks {exc}") from None
    model = VCBM.init(mc, config.seed)
    best = {k: v for k, v in arrays.items() if k.split(".")[0] in ("enc", "ltm", "lcbm")}
    last = {k[5:]: v for k, v in arrays.items() if k.startswith("last.")}
    model.load_state_dict(last if resume and last else best)
    state = TrainState(
        epoch=int(meta.get("epoch", 0)),
        velocity={k[9:]: v for k, v in arrays.items() if k.startswith("velocity.")},
        best_state=best,
        last_state=last or None,
        best_score=tuple(meta["best_score"]) if meta.get("best_score") else None,
        log=TrainLog(list(meta.get("log", []))),
    )
    return model, config, state
