"""Losses, optimizers, schedule, training loop, and gradient checking.

Losses are built from taped primitives so one backward pass covers the whole
objective. Optimizers work directly on the accumulated parameter gradients.
The loop is fully seeded: shuffling, init, and batch order derive from the
config seed, so two runs with one seed produce identical logs and
checkpoints.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as mx
from . import model as mdl
from . import numerics as nm
from .errors import ConfigError, NumericError, ShapeError

log = logging.getLogger("mspt.training")

OPTIMIZERS = ("adamw", "lion")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 8
    optimizer: str = "adamw"
    peak_lr: float = 1e-3
    final_lr: float = 1e-5
    weight_decay: float = 0.0
    warmup_fraction: float = 0.05
    rel_l2_weight: float = 1.0
    grad_reg_weight: float = 0.0
    volume_weight: float = 1.0
    surface_weight: float = 0.5
    val_fraction: float = 0.1
    val_count: int | None = None  # overrides val_fraction when set
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if not (self.peak_lr > self.final_lr > 0.0):
            raise ConfigError(
                f"need peak_lr > final_lr > 0, got peak={self.peak_lr} final={self.final_lr}"
            )
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _flatten_samples(x):
    # (N, c) counts as one sample; a leading axis enumerates samples.
    if x.ndim < 2:
        raise ShapeError(f"loss input must be at least 2-d, got {x.shape}")
    if x.ndim == 2:
        return 1, int(np.prod(x.shape))
    s = x.shape[0]
    return s, int(np.prod(x.shape[1:]))


def relative_l2_loss(pred, target, tape=None):
    """Mean over samples of ||pred - target||_2 / ||target||_2.

    A zero-norm target sample is divided by 1e-12 instead and flagged in the
    log, so the value stays finite but visibly wrong.
    """
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"relative_l2_loss: shapes {pred.shape} and {t.shape} differ")
    s, m = _flatten_samples(pred)
    tnorm = np.linalg.norm(t.reshape(s, m), axis=1)
    if np.any(tnorm < mx.ZERO_NORM_EPS):
        log.warning(
            "relative_l2_loss: %d sample(s) have zero-norm targets; dividing by eps",
            int(np.sum(tnorm < mx.ZERO_NORM_EPS)),
        )
    tnorm = np.maximum(tnorm, mx.ZERO_NORM_EPS)

    diff = nm.add_const(pred, -t, tape)
    sq = nm.mul(diff, diff, tape)
    flat = nm.reshape(sq, (s, m), tape)
    ssum = nm.sum_axis(flat, 1, tape)
    norms = nm.sqrt(ssum, tape)
    scaled = nm.mul_const(norms, (1.0 / (s * tnorm)).astype(pred.dtype), tape)
    return nm.sum_all(scaled, tape)


def _central_differences(x, axis, tape=None):
    n = x.shape[axis]
    hi = nm.slice_axis(x, axis, 2, n, tape)
    lo = nm.slice_axis(x, axis, 0, n - 2, tape)
    return nm.mul_const(nm.sub(hi, lo, tape), 0.5, tape)


def _central_differences_np(x, axis):
    n = x.shape[axis]
    idx_hi = [slice(None)] * x.ndim
    idx_lo = [slice(None)] * x.ndim
    idx_hi[axis] = slice(2, n)
    idx_lo[axis] = slice(0, n - 2)
    return 0.5 * (x[tuple(idx_hi)] - x[tuple(idx_lo)])


def gradient_regularizer(pred, target, grid_shape, tape=None):
    """Relative L2 between interior central-difference gradients.

    pred has shape (..., H*W, c) on a regular grid with unit index spacing.
    Both grid axes contribute; the norm runs over all interior differences of
    a sample. Zero target gradients fall back to the same eps rule as the
    relative L2 loss.
    """
    if len(grid_shape) != 2:
        raise ConfigError(f"gradient_regularizer needs a 2-d grid, got {grid_shape}")
    gh, gw = grid_shape
    if gh < 3 or gw < 3:
        raise ConfigError(f"grid {grid_shape} has no interior for central differences")
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"gradient_regularizer: shapes {pred.shape} and {t.shape} differ")
    if pred.shape[-2] != gh * gw:
        raise ShapeError(
            f"gradient_regularizer: {pred.shape[-2]} points do not fill a {gh}x{gw} grid"
        )

    lead = pred.shape[:-2]
    c = pred.shape[-1]
    s = lead[0] if lead else 1
    grid = nm.reshape(pred, lead + (gh, gw, c), tape)
    tgrid = t.reshape(lead + (gh, gw, c))

    num_sq = None
    den_sq = np.zeros(s)
    for axis in (-3, -2):
        dp = _central_differences(grid, axis, tape)
        dt = _central_differences_np(tgrid, axis)
        d = nm.add_const(dp, -dt, tape)
        d2 = nm.reshape(nm.mul(d, d, tape), (s, -1), tape)
        part = nm.sum_axis(d2, 1, tape)
        num_sq = part if num_sq is None else nm.add(num_sq, part, tape)
        den_sq += np.sum((dt * dt).reshape(s, -1), axis=1)

    den = np.sqrt(den_sq)
    if np.any(den < mx.ZERO_NORM_EPS):
        log.warning(
            "gradient_regularizer: %d sample(s) have flat targets; dividing by eps",
            int(np.sum(den < mx.ZERO_NORM_EPS)),
        )
    den = np.maximum(den, mx.ZERO_NORM_EPS)
    norms = nm.sqrt(num_sq, tape)
    scaled = nm.mul_const(norms, (1.0 / (s * den)).astype(pred.dtype), tape)
    return nm.sum_all(scaled, tape)


def group_weighted_loss(pred, target, groups, tape=None, volume_weight=1.0, surface_weight=0.5):
    """Weighted sum of per-group relative L2 losses.

    groups codes: 1 marks volume points, 2 marks surface points. Points
    tagged 0 are ignored. A group with no points contributes nothing.
    """
    groups = np.asarray(groups)
    if groups.shape != (pred.shape[-2],):
        raise ShapeError(
            f"groups shape {groups.shape} does not match {pred.shape[-2]} points"
        )
    t = np.asarray(target, dtype=pred.dtype)
    total = None
    for code, weight in ((1, volume_weight), (2, surface_weight)):
        idx = np.flatnonzero(groups == code)
        if idx.size == 0:
            continue
        part = relative_l2_loss(
            nm.take_rows(pred, idx, tape),
            np.take(t, idx, axis=-2),
            tape,
        )
        part = nm.mul_const(part, weight, tape)
        total = part if total is None else nm.add(total, part, tape)
    if total is None:
        raise ConfigError("group_weighted_loss: no points tagged volume or surface")
    return total


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer_state(params):
    state = OptimizerState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.numpy())
        state.v[name] = np.zeros_like(p.numpy())
    return state


def _check_grads(params):
    for name, p in params.items():
        if p.grad is None:
            raise NumericError(f"parameter {name} has no gradient; run backward first")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}; aborting step")


def adamw_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Adam moments with bias correction and decoupled weight decay."""
    _check_grads(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def lion_step(params, state, lr, beta1=0.9, beta2=0.99, weight_decay=0.0):
    """Sign-of-interpolated-momentum update; the moment refreshes afterwards."""
    _check_grads(params)
    state.step += 1
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        direction = np.sign(beta1 * m + (1.0 - beta1) * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * direction).astype(p.data.dtype, copy=False)
        m *= beta2
        m += (1.0 - beta2) * g


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def lr_schedule(step, total_steps, cfg):
    """Linear warmup from zero to peak, then cosine decay to the final rate."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if step == warmup:
        return cfg.peak_lr
    if step == total_steps:
        return cfg.final_lr
    t = (step - warmup) / (total_steps - warmup)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    best_val: float
    best_epoch: int
    history: list


def _shared_coords(samples):
    first = samples[0].coords
    for s in samples[1:]:
        if s.coords.shape != first.shape or not np.array_equal(s.coords, first):
            return False
    return True


def _standardize_stats(samples, idx):
    feats = np.stack([samples[i].in_fields for i in idx])
    mean = feats.mean(axis=(0, 1))
    std = feats.std(axis=(0, 1))
    std = np.maximum(std, 1e-8)
    return mean, std


def _target_scale(samples, idx):
    # Per-channel RMS, not mean/std: no shift keeps exact zeros (boundary
    # conditions) at zero, and dividing by RMS puts the head's required
    # output at O(1) instead of whatever units the task uses.
    targets = np.stack([samples[i].targets for i in idx])
    rms = np.sqrt(np.mean(np.square(targets, dtype=np.float64), axis=(0, 1)))
    return np.maximum(rms, 1e-8)


def _sample_loss(pred, batch_targets, batch_samples, tcfg, tape):
    base = relative_l2_loss(pred, batch_targets, tape)
    if tcfg.rel_l2_weight != 1.0:
        base = nm.mul_const(base, tcfg.rel_l2_weight, tape)
    total = base
    if tcfg.grad_reg_weight > 0.0:
        gs = getattr(batch_samples[0], "grid_shape", None)
        if gs is None:
            raise ConfigError("grad_reg_weight > 0 requires grid samples")
        reg = gradient_regularizer(pred, batch_targets, tuple(gs), tape)
        total = nm.add(total, nm.mul_const(reg, tcfg.grad_reg_weight, tape), tape)
    return total


def predict(samples, cfg, params, in_mean=None, in_std=None, layout=None,
            out_scale=None):
    """Forward a list of samples without a tape; returns per-sample arrays.

    out_scale maps the network output back to target units when the model
    was trained against RMS-scaled targets.
    """
    outs = []
    for s in samples:
        feats = s.in_fields
        if in_mean is not None:
            feats = (feats - in_mean) / in_std
        gs = getattr(s, "grid_shape", None)
        cloud = mdl.PointCloud(coords=s.coords, features=feats, grid_shape=gs)
        lay = layout
        if lay is None:
            lay = mdl.build_layout(cfg, coords=s.coords, on_grid=gs is not None)
        out = mdl.forward(cloud, cfg, params, layout=lay).numpy()
        if out_scale is not None:
            out = out * np.asarray(out_scale, dtype=out.dtype)
        outs.append(out)
    return outs


def train(model_cfg, tcfg, samples, out_dir):
    """Run the optimization loop; writes a CSV log and the best checkpoint.

    samples provide coords (N, D), in_fields (N, F_in), targets (N, out), an
    optional grid_shape, and optional groups. All samples must share a point
    count; samples sharing coordinates are stacked into true batches,
    otherwise gradients accumulate one sample at a time.

    Inputs are standardized and targets divided by their per-channel RMS,
    both from training-split statistics kept in the checkpoint; predictions
    and the logged val_rel_l2 are always in original target units.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")

    n = len(samples)
    if n < 2:
        raise ConfigError("training needs at least two samples for a val split")
    rng = np.random.default_rng(tcfg.seed)
    order = rng.permutation(n)
    val_count = tcfg.val_count
    if val_count is None:
        val_count = max(1, int(round(tcfg.val_fraction * n)))
    if not 0 < val_count < n:
        raise ConfigError(f"val split of {val_count} impossible with {n} samples")
    val_idx = order[:val_count]
    train_idx = order[val_count:]

    in_mean, in_std = _standardize_stats(samples, train_idx)
    out_scale = _target_scale(samples, train_idx)
    shared = _shared_coords(samples)
    layout = None
    if shared:
        s0 = samples[0]
        layout = mdl.build_layout(
            model_cfg, coords=s0.coords,
            on_grid=getattr(s0, "grid_shape", None) is not None,
        )

    params = mdl.init_params(model_cfg, seed=tcfg.seed, precision=tcfg.precision)
    state = init_optimizer_state(params)
    step_fn = adamw_step if tcfg.optimizer == "adamw" else lion_step

    n_train = len(train_idx)
    steps_per_epoch = -(-n_train // tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch

    groups0 = getattr(samples[0], "groups", None)

    def batch_loss(idx_list, tape):
        targets = np.stack([np.asarray(samples[i].targets) for i in idx_list])
        targets = targets / out_scale
        batch = [samples[i] for i in idx_list]
        if shared:
            feats = np.stack([(samples[i].in_fields - in_mean) / in_std for i in idx_list])
            cloud = mdl.PointCloud(
                coords=samples[0].coords, features=feats,
                grid_shape=getattr(samples[0], "grid_shape", None),
            )
            pred = mdl.forward(cloud, model_cfg, params, layout=layout, tape=tape)
            if groups0 is not None:
                return group_weighted_loss(
                    pred, targets, groups0, tape,
                    volume_weight=tcfg.volume_weight,
                    surface_weight=tcfg.surface_weight,
                )
            return _sample_loss(pred, targets, batch, tcfg, tape)
        total = None
        for j, i in enumerate(idx_list):
            s = samples[i]
            feats = (s.in_fields - in_mean) / in_std
            gs = getattr(s, "grid_shape", None)
            cloud = mdl.PointCloud(coords=s.coords, features=feats, grid_shape=gs)
            lay = mdl.build_layout(model_cfg, coords=s.coords, on_grid=gs is not None)
            pred = mdl.forward(cloud, model_cfg, params, layout=lay, tape=tape)
            sg = getattr(s, "groups", None)
            if sg is not None:
                part = group_weighted_loss(
                    pred, targets[j], sg, tape,
                    volume_weight=tcfg.volume_weight,
                    surface_weight=tcfg.surface_weight,
                )
            else:
                part = _sample_loss(pred, targets[j], [s], tcfg, tape)
            part = nm.mul_const(part, 1.0 / len(idx_list), tape)
            total = part if total is None else nm.add(total, part, tape)
        return total

    def val_metric():
        vs = [samples[i] for i in val_idx]
        preds = predict(vs, model_cfg, params, in_mean, in_std, layout=layout,
                        out_scale=out_scale)
        targets = [np.asarray(s.targets) for s in vs]
        return float(np.mean([mx.relative_l2(p, t) for p, t in zip(preds, targets)]))

    history = []
    best_val = math.inf
    best_epoch = -1
    t0 = time.monotonic()
    new_log = not os.path.exists(log_path)
    with open(log_path, "a") as logf:
        if new_log:
            logf.write("epoch,train_loss,val_rel_l2,lr,wall_seconds\n")
        step = 0
        first_losses = []
        for epoch in range(tcfg.epochs):
            perm = rng.permutation(n_train)
            epoch_loss = 0.0
            lr = 0.0
            for b0 in range(0, n_train, tcfg.batch_size):
                idx_list = [train_idx[j] for j in perm[b0:b0 + tcfg.batch_size]]
                step += 1
                lr = lr_schedule(step, total_steps, tcfg)
                zero_grads(params)
                tape = nm.Tape()
                loss = batch_loss(idx_list, tape)
                value = float(loss.numpy())
                if not math.isfinite(value):
                    raise NumericError(f"loss became {value} at step {step}")
                tape.backward(loss)
                step_fn(params, state, lr, weight_decay=tcfg.weight_decay)
                epoch_loss += value * len(idx_list)
            epoch_loss /= n_train

            val = val_metric()
            if len(first_losses) < 10:
                first_losses.append(epoch_loss)
                if len(first_losses) == 10 and all(
                    b >= a for a, b in zip(first_losses, first_losses[1:])
                ):
                    log.warning(
                        "train loss has not decreased over the first 10 epochs"
                    )
            wall = time.monotonic() - t0
            logf.write(
                f"{epoch},{epoch_loss!r},{val!r},{lr!r},{wall!r}\n"
            )
            logf.flush()
            history.append(
                {"epoch": epoch, "train_loss": epoch_loss, "val_rel_l2": val, "lr": lr}
            )
            if val < best_val:
                best_val = val
                best_epoch = epoch
                mdl.save_checkpoint(
                    ckpt_path, model_cfg, params,
                    extra={
                        "epoch": epoch,
                        "val_rel_l2": val,
                        "in_mean": in_mean.tolist(),
                        "in_std": in_std.tolist(),
                        "out_scale": out_scale.tolist(),
                        "seed": tcfg.seed,
                    },
                )

    return TrainResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        best_val=best_val,
        best_epoch=best_epoch,
        history=history,
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict
    passed: bool


def finite_difference_check(loss_fn, params, h=1e-5, tol=1e-5):
    """Compare taped gradients against central finite differences.

    loss_fn(tape) must rebuild the forward pass from the current parameter
    values and return a scalar loss tensor. Every parameter must be 64-bit;
    float32 rounding would drown the signal.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"gradient check needs f64 parameters, {name} is {p.dtype}")

    zero_grads(params)
    tape = nm.Tape()
    loss = loss_fn(tape)
    tape.backward(loss)

    per_param = {}
    worst = ("", 0.0)
    for name, p in params.items():
        arr = p.data
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn(None).numpy())
            flat[i] = keep - h
            down = float(loss_fn(None).numpy())
            flat[i] = keep
            fd_flat[i] = (up - down) / (2.0 * h)
        g = p.grad if p.grad is not None else np.zeros_like(arr)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-12)
        err = float(np.max(np.abs(fd - g)) / scale)
        per_param[name] = err
        if err > worst[1]:
            worst = (name, err)
    return GradcheckReport(
        max_rel_err=worst[1],
        worst_param=worst[0],
        per_param=per_param,
        passed=worst[1] < tol,
    )


def gradcheck(model_cfg=None, seed=0, n_points=12, h=1e-5, tol=1e-5):
    """Full-model gradient check on a tiny 64-bit instance."""
    if model_cfg is None:
        model_cfg = mdl.ModelConfig(
            in_dim=4, out_dim=2, n_blocks=2, f_dim=8, n_heads=2,
            k_patches=2, q_per_patch=1, pooling="mean",
        )
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(n_points, 2))
    feats = rng.normal(size=(n_points, model_cfg.in_dim - 2))
    target = rng.normal(size=(n_points, model_cfg.out_dim))
    cloud = mdl.PointCloud(coords=coords, features=feats)
    layout = mdl.build_layout(model_cfg, coords=coords)
    params = mdl.init_params(model_cfg, seed=seed, precision="f64")

    def loss_fn(tape):
        pred = mdl.forward(cloud, model_cfg, params, layout=layout, tape=tape)
        return relative_l2_loss(pred, target, tape)

    return finite_difference_check(loss_fn, params, h=h, tol=tol)
