"""Composed cross-entropy loss, double-pass training, gradient checking.

Each training iteration can run two forward passes on the same batch: the
first with all modalities, the second with the RGB input zeroed. The total
loss is the sum of the per-pass losses and both passes contribute to a
single optimizer update. In multihead configurations the first pass adds
cross entropy on the RGB and auxiliary heads; the second pass adds cross
entropy on the auxiliary head only (the RGB head output is ignored there).

Variants:  baseline = neither flag, "h" = multihead, "d" = double pass,
"dh" = both.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataio import FrameBundle
from .evaluation import evaluate
from .model import (ModelConfig, Params, PredictionSet, backward, forward,
                    init_params, softmax_ce_grad, softmax_ce_value)

EPOCH_LOG_HEADER = ("epoch,ce_joint,ce_head_rgb,ce_head_aux,"
                    "ce_masked_joint,ce_masked_aux,l_f,l_s,total,val_miou")

VARIANTS = {
    "baseline": (False, False),
    "h": (False, True),
    "d": (True, False),
    "dh": (True, True),
}

_TERMS = ("ce_joint", "ce_head_rgb", "ce_head_aux", "ce_masked_joint", "ce_masked_aux")


class TrainingError(RuntimeError):
    """Diverged or inconsistent training state."""


@dataclass(frozen=True)
class LossBreakdown:
    """The five cross-entropy terms and their per-pass and total sums."""

    ce_joint: float = 0.0
    ce_head_rgb: float = 0.0
    ce_head_aux: float = 0.0
    ce_masked_joint: float = 0.0
    ce_masked_aux: float = 0.0
    l_f: float = 0.0
    l_s: float = 0.0
    total: float = 0.0

    @staticmethod
    def mean(parts: list["LossBreakdown"]) -> "LossBreakdown":
        vals = {f.name: float(np.mean([getattr(p, f.name) for p in parts]))
                for f in fields(LossBreakdown)}
        return LossBreakdown(**vals)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    double_pass: bool = True
    multihead: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        # lr = 0 is allowed so a no-op step can be exercised directly.
        if self.lr < 0:
            raise TrainingError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "TrainConfig":
        if variant not in VARIANTS:
            raise TrainingError(f"unknown variant {variant!r}; expected "
                                f"{sorted(VARIANTS)}")
        double, multi = VARIANTS[variant]
        return cls(double_pass=double, multihead=multi, **kwargs)


@dataclass(eq=False)
class OptimState:
    """Adam moment accumulators; unused (but kept zero-shaped) for sgd."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "OptimState":
        return cls(m={k: np.zeros_like(t) for k, t in params.tensors.items()},
                   v={k: np.zeros_like(t) for k, t in params.tensors.items()})


# ---------------------------------------------------------------------------
# Loss composition


def loss_first_pass(preds: PredictionSet, gt: np.ndarray,
                    multihead: bool) -> LossBreakdown:
    """First-pass terms: joint head plus, in multihead mode, both extra heads."""
    terms, _ = _first_pass_terms(preds, gt, multihead)
    l_f = sum(terms.values())
    return LossBreakdown(**terms, l_f=l_f, total=l_f)


def loss_second_pass(preds_masked: PredictionSet, gt: np.ndarray,
                     multihead: bool) -> LossBreakdown:
    """Second-pass terms for RGB-masked predictions; the RGB head is ignored."""
    terms, _ = _second_pass_terms(preds_masked, gt, multihead)
    l_s = sum(terms.values())
    return LossBreakdown(**terms, l_s=l_s, total=l_s)


def total_loss(first: LossBreakdown, second: LossBreakdown | None,
               double_pass: bool) -> LossBreakdown:
    """Combine per-pass breakdowns; without the double pass l_s stays zero."""
    if not double_pass or second is None:
        return LossBreakdown(ce_joint=first.ce_joint,
                             ce_head_rgb=first.ce_head_rgb,
                             ce_head_aux=first.ce_head_aux,
                             l_f=first.l_f, l_s=0.0, total=first.l_f)
    return LossBreakdown(ce_joint=first.ce_joint,
                         ce_head_rgb=first.ce_head_rgb,
                         ce_head_aux=first.ce_head_aux,
                         ce_masked_joint=second.ce_masked_joint,
                         ce_masked_aux=second.ce_masked_aux,
                         l_f=first.l_f, l_s=second.l_s,
                         total=first.l_f + second.l_s)


def _require_heads(preds: PredictionSet):
    if preds.z_rgb is None or preds.z_aux is None:
        raise TrainingError("multihead loss requested but the prediction set "
                            "has no rgb/aux head outputs")


def _first_pass_terms(preds, gt, multihead):
    ce_joint, d_joint = softmax_ce_grad(preds.z_joint, gt)
    terms = {"ce_joint": ce_joint, "ce_head_rgb": 0.0, "ce_head_aux": 0.0}
    dlogits = {"z_joint": d_joint}
    if multihead:
        _require_heads(preds)
        terms["ce_head_rgb"], dlogits["z_rgb"] = softmax_ce_grad(preds.z_rgb, gt)
        terms["ce_head_aux"], dlogits["z_aux"] = softmax_ce_grad(preds.z_aux, gt)
    return terms, dlogits


def _second_pass_terms(preds, gt, multihead):
    ce_joint, d_joint = softmax_ce_grad(preds.z_joint, gt)
    terms = {"ce_masked_joint": ce_joint, "ce_masked_aux": 0.0}
    dlogits = {"z_joint": d_joint}
    if multihead:
        _require_heads(preds)
        terms["ce_masked_aux"], dlogits["z_aux"] = softmax_ce_grad(preds.z_aux, gt)
    return terms, dlogits


def frame_loss_and_grads(params: Params, bundle: FrameBundle, double_pass: bool,
                         multihead: bool) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Full composed loss for one frame plus exact parameter gradients."""
    gt = bundle.labels
    preds1, cache1 = forward(params, bundle)
    terms1, dlogits1 = _first_pass_terms(preds1, gt, multihead)
    grads = backward(params, cache1, dlogits1)
    first = LossBreakdown(**terms1, l_f=sum(terms1.values()))
    second = None
    if double_pass:
        preds2, cache2 = forward(params, bundle, frozenset({"rgb"}))
        terms2, dlogits2 = _second_pass_terms(preds2, gt, multihead)
        grads2 = backward(params, cache2, dlogits2)
        for name in grads:
            grads[name] += grads2[name]
        second = LossBreakdown(**terms2, l_s=sum(terms2.values()))
    return total_loss(first, second, double_pass), grads


def frame_loss_value(params: Params, bundle: FrameBundle, double_pass: bool,
                     multihead: bool):
    """Total composed loss without the backward passes.

    Returned in the dtype the forward pass ran at, so extended-precision
    inputs keep their precision.
    """
    gt = bundle.labels
    preds1, _ = forward(params, bundle)
    total = softmax_ce_value(preds1.z_joint, gt)
    if multihead:
        _require_heads(preds1)
        total = total + softmax_ce_value(preds1.z_rgb, gt) \
            + softmax_ce_value(preds1.z_aux, gt)
    if double_pass:
        preds2, _ = forward(params, bundle, frozenset({"rgb"}))
        total = total + softmax_ce_value(preds2.z_joint, gt)
        if multihead:
            total = total + softmax_ce_value(preds2.z_aux, gt)
    return total


# ---------------------------------------------------------------------------
# Optimization


def _apply_update(params: Params, optim: OptimState, grads: dict, config) -> Params:
    tensors = {}
    if config.optimizer == "adam":
        b1, b2, eps = 0.9, 0.999, 1e-8
        optim.step += 1
        corr1 = 1.0 - b1 ** optim.step
        corr2 = 1.0 - b2 ** optim.step
        for name, theta in params.tensors.items():
            g = grads[name]
            optim.m[name] = b1 * optim.m[name] + (1 - b1) * g
            optim.v[name] = b2 * optim.v[name] + (1 - b2) * g * g
            mhat = optim.m[name] / corr1
            vhat = optim.v[name] / corr2
            tensors[name] = theta - config.lr * mhat / (np.sqrt(vhat) + eps)
    else:
        optim.step += 1
        for name, theta in params.tensors.items():
            tensors[name] = theta - config.lr * grads[name]
    return params.updated(tensors)


def train_step(params: Params, optim: OptimState, batch: list[FrameBundle],
               config: TrainConfig) -> tuple[Params, LossBreakdown]:
    """One optimizer update from the batch-mean gradients of the total loss."""
    if not batch:
        raise TrainingError("empty training batch")
    acc: dict[str, np.ndarray] = {k: np.zeros_like(t)
                                  for k, t in params.tensors.items()}
    parts = []
    for bundle in batch:
        breakdown, grads = frame_loss_and_grads(params, bundle,
                                                config.double_pass, config.multihead)
        if not np.isfinite(breakdown.total):
            raise TrainingError(
                f"non-finite loss at optimizer step {optim.step + 1} "
                f"(frame {bundle.frame_id or '?'}): {breakdown}")
        parts.append(breakdown)
        for name in acc:
            acc[name] += grads[name]
    scale = 1.0 / len(batch)
    for name in acc:
        acc[name] *= scale
    new_params = _apply_update(params, optim, acc, config)
    return new_params, LossBreakdown.mean(parts)


@dataclass(eq=False)
class TrainResult:
    params: Params               # best-validation snapshot
    best_epoch: int
    best_val_miou: float
    log_rows: list[dict]
    final_params: Params


def train(model_config: ModelConfig, config: TrainConfig,
          train_bundles: list[FrameBundle],
          val_bundles: list[FrameBundle]) -> TrainResult:
    """Epoch loop with per-epoch validation and best-checkpoint retention.

    The best snapshot is selected on validation mIoU with ties going to the
    earlier epoch. Everything is a deterministic function of the configs,
    the data, and the seed.
    """
    if not train_bundles or not val_bundles:
        raise TrainingError("training and validation splits must be non-empty")
    model_config = replace(model_config, multihead=config.multihead)
    params = init_params(model_config, config.seed)
    optim = OptimState.for_params(params)
    rng = np.random.default_rng(config.seed)

    best_params, best_epoch, best_miou = params, 0, -np.inf
    log_rows = []
    n = len(train_bundles)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_parts = []
        for lo in range(0, n, config.batch_size):
            batch = [train_bundles[i] for i in order[lo:lo + config.batch_size]]
            params, breakdown = train_step(params, optim, batch, config)
            epoch_parts.extend([breakdown] * len(batch))
        means = LossBreakdown.mean(epoch_parts)
        val_miou = evaluate(params, val_bundles).miou
        row = {"epoch": epoch, **{f.name: getattr(means, f.name)
                                  for f in fields(LossBreakdown)},
               "val_miou": float(val_miou)}
        log_rows.append(row)
        if np.isfinite(val_miou) and val_miou > best_miou:
            best_params, best_epoch, best_miou = params, epoch, float(val_miou)
    if best_epoch == 0:
        best_params, best_epoch = params, config.epochs
        best_miou = float("nan")
    return TrainResult(params=best_params, best_epoch=best_epoch,
                       best_val_miou=best_miou, log_rows=log_rows,
                       final_params=params)


def write_epoch_log(log_rows: list[dict], path: Path) -> None:
    lines = [EPOCH_LOG_HEADER]
    for row in log_rows:
        cols = [str(row["epoch"])] + [repr(row[key]) for key in
                                      EPOCH_LOG_HEADER.split(",")[1:]]
        lines.append(",".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_epoch_log(path: Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != EPOCH_LOG_HEADER:
        raise TrainingError(f"{path} is not an epoch log")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {"epoch": int(vals[0])}
        for key, val in zip(EPOCH_LOG_HEADER.split(",")[1:], vals[1:]):
            row[key] = float(val)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Gradient verification


def finite_difference_error(params: Params, grads: dict[str, np.ndarray],
                            loss_fn, eps: float, n_samples: int,
                            rng: np.random.Generator,
                            names: list[str] | None = None) -> float:
    """Max relative error between analytic grads and central differences.

    Samples scalar parameters uniformly over the selected tensors. The
    relative-error denominator is floored at 1e-12.
    """
    names = list(names or params.tensors.keys())
    sizes = np.array([params.tensors[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate(([0], np.cumsum(sizes)))

    worst = 0.0
    for flat in np.sort(picks):
        t_idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[t_idx]
        inner = int(flat - offsets[t_idx])
        tensor = params.tensors[name]
        orig = tensor.flat[inner]
        tensor.flat[inner] = orig + eps
        up = loss_fn(params)
        tensor.flat[inner] = orig - eps
        down = loss_fn(params)
        tensor.flat[inner] = orig
        fd = (up - down) / (2.0 * eps)
        an = grads[name].flat[inner]
        denom = max(abs(fd), abs(an), 1e-12)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def grad_check(params: Params, bundle: FrameBundle, config: TrainConfig,
               eps: float = 1e-5, n_samples: int = 100,
               seed: int = 0) -> float:
    """Verify backward against central differences of the composed loss.

    The difference quotients run at extended precision (longdouble) where
    the platform provides it, which keeps rounding noise on small-gradient
    parameters well below the comparison tolerance. Note the loss surface
    has rectifier kinks exactly at zero pre-activations, so the check
    should run at a generic parameter point (e.g. init_params plus a small
    jitter) rather than at all-zero biases.
    """
    _, grads = frame_loss_and_grads(params, bundle, config.double_pass,
                                    config.multihead)

    fd_dtype = np.longdouble
    fd_params = Params(config=params.config,
                       tensors={k: t.astype(fd_dtype)
                                for k, t in params.tensors.items()})
    fd_bundle = replace_bundle_dtype(bundle, fd_dtype)

    def loss_value(p: Params) -> float:
        return frame_loss_value(p, fd_bundle, config.double_pass, config.multihead)

    rng = np.random.default_rng(seed)
    return finite_difference_error(fd_params, grads, loss_value, eps,
                                   n_samples, rng)


def replace_bundle_dtype(bundle: FrameBundle, dtype) -> FrameBundle:
    out = FrameBundle(rgb=bundle.rgb.astype(dtype),
                      thermal=bundle.thermal.astype(dtype),
                      lidar=bundle.lidar.astype(dtype),
                      labels=bundle.labels, valid=dict(bundle.valid),
                      timestamp=bundle.timestamp, frame_id=bundle.frame_id,
                      lidar_cloud=bundle.lidar_cloud, tags=dict(bundle.tags))
    return out


def jittered_params(config: ModelConfig, seed: int = 0,
                    scale: float = 0.05) -> Params:
    """Init params nudged off the rectifier kinks, for gradient checking."""
    params = init_params(config, seed)
    rng = np.random.default_rng(seed + 1)
    tensors = {name: t + scale * rng.standard_normal(t.shape)
               for name, t in params.tensors.items()}
    return Params(config=config, tensors=tensors)
