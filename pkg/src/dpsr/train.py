"""Desk-scale training: composite loss, Adam, patch loop, early stopping.

Everything downstream of the seed is deterministic: parameter init, data
order and augmentation choice all come from one Generator, so two runs
with the same seed produce identical logs.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataio import HsiCube, augment8, bicubic_downsample, extract_patches
from .errors import ContractError, NumericError
from .metrics import evaluate
from .model import DpsrParams, dpsr_forward_image
from .tensor import Tape, Tensor

SAM_COS_CLIP = 1e-7   # keeps arccos' gradient finite at collinear spectra


@dataclass
class TrainConfig:
    lr: float = 1e-4
    alpha_s: float = 0.3
    alpha_g: float = 0.1
    batch_size: int = 4
    max_steps: int = 200
    patch: int = 16           # HR patch edge; must be divisible by the SR factor
    seed: int = 0
    eval_every: int = 25
    patience: int = 10        # evaluations without val improvement before stopping

    def __post_init__(self):
        # lr == 0 is allowed for no-op sanity runs
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if self.alpha_s < 0 or self.alpha_g < 0:
            raise ContractError("loss weights must be >= 0")


def loss_terms(pred, target, alpha_s, alpha_g):
    """(total, l1, sam, grad) losses between aligned HR stacks.

    pred: Tensor (L, rW, C); target: array-like of the same shape with the
    discard rule already applied.
    """
    if pred.size == 0:
        raise ContractError("loss on empty tensors")
    tgt = T.as_tensor(np.asarray(target, dtype=pred.dtype.type))
    if pred.shape != tgt.shape:
        raise ContractError(f"loss: pred {pred.shape} vs target {tgt.shape}")

    l1 = T.reduce_mean(T.absolute(T.sub(pred, tgt)))

    # spectral-angle term (radians); masks are constant w.r.t. the tape.
    # Pixels whose spectra are collinear to within the clip margin count as
    # angle 0 exactly, so loss(pred, pred) is 0 rather than arccos rounding.
    dot = T.reduce_sum(T.mul(pred, tgt), axis=-1)
    pn = T.sqrt(T.reduce_sum(T.mul(pred, pred), axis=-1))
    tn = T.sqrt(T.reduce_sum(T.mul(tgt, tgt), axis=-1))
    ok = (pn.data > 0) & (tn.data > 0)
    denom = T.add(T.mul(pn, tn), Tensor((~ok).astype(pred.dtype)))
    cosang = T.div(dot, denom)
    keep = ok & (cosang.data < 1.0 - SAM_COS_CLIP)
    mask = Tensor(keep.astype(pred.dtype))
    safe = T.clip(cosang, -1.0 + SAM_COS_CLIP, 1.0 - SAM_COS_CLIP)
    angles = T.mul(T.arccos(safe), mask)
    count = max(int(ok.sum()), 1)
    sam = T.mul(T.reduce_sum(angles), 1.0 / count)

    # first differences along both spatial axes, no padding
    def diff(t, axis):
        n = t.shape[axis]
        return T.sub(T.slice_axis(t, axis, 1, n), T.slice_axis(t, axis, 0, n - 1))

    g_along = T.reduce_mean(T.absolute(T.sub(diff(pred, 0), diff(tgt, 0))))
    g_across = T.reduce_mean(T.absolute(T.sub(diff(pred, 1), diff(tgt, 1))))
    grad = T.mul(T.add(g_along, g_across), 0.5)

    total = T.add(l1, T.add(T.mul(sam, alpha_s), T.mul(grad, alpha_g)))
    return total, l1, sam, grad


def loss(pred, target, alpha_s, alpha_g):
    return loss_terms(pred, target, alpha_s, alpha_g)[0]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params):
        return cls(m=[np.zeros_like(p.data) for _, p in params],
                   v=[np.zeros_like(p.data) for _, p in params])


def adam_step(named_params, grads, state, lr):
    """In-place bias-corrected Adam update."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for (name, p), g, m, v in zip(named_params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LogRow:
    step: int
    loss: float
    l1: float
    sam: float
    grad: float
    val_mpsnr: float | None = None

    def line(self):
        val = f"{self.val_mpsnr:.4f}" if self.val_mpsnr is not None else ""
        return (f"{self.step},{self.loss:.6f},{self.l1:.6f},"
                f"{self.sam:.6f},{self.grad:.6f},{val}")

    @staticmethod
    def header():
        return "step,loss,l1,sam,grad,val_mpsnr"


def _prepare_pairs(cubes, scale, patch):
    """HR cubes -> list of (lr, hr) arrays, 8x augmented patches."""
    pairs = []
    for cube in cubes:
        if patch > cube.height or patch > cube.width:
            raise ContractError(
                f"patch {patch} larger than cube {cube.height}x{cube.width}")
        if patch % scale:
            raise ContractError(f"patch {patch} not divisible by scale {scale}")
        for base in extract_patches(cube, patch):
            for aug in augment8(base):
                lr = bicubic_downsample(aug, scale)
                pairs.append((lr.data, aug.data))
    return pairs


def _val_mpsnr(params, val_cubes, scale):
    scores = []
    for cube in val_cubes:
        lr = bicubic_downsample(cube, scale)
        pred = dpsr_forward_image(lr.data, params)
        pred_cube = HsiCube(data=np.clip(pred.data, 0.0, 1.0),
                            band_valid=cube.band_valid)
        scores.append(evaluate(pred_cube, cube, scale).mpsnr_db)
    return float(np.mean(scores))


def fit(train_cubes, val_cubes, model_config, train_config):
    """Train from scratch; returns (best params, log rows).

    Training uses the whole-image forward (the batch scan path); the loss
    compares its ((Hp-1)*r)-line output against the matching slice of the
    HR patch, which is exactly the discard rule.
    """
    tc = train_config
    scale = model_config.scale
    pairs = _prepare_pairs(train_cubes, scale, tc.patch)
    if not pairs:
        raise ContractError("no training patches")

    params = DpsrParams.init(model_config, seed=tc.seed)
    named = params.named_tensors()
    opt = AdamState.init(named)
    rng = np.random.default_rng(tc.seed + 1)

    log = []
    best, best_score, evals_since_best = None, -np.inf, 0
    for step in range(1, tc.max_steps + 1):
        picks = rng.integers(0, len(pairs), size=tc.batch_size)
        with Tape() as tape:
            total = None
            parts = np.zeros(3)
            for idx in picks:
                lr_arr, hr_arr = pairs[idx]
                pred = dpsr_forward_image(lr_arr, params)
                tgt = hr_arr[:pred.shape[0]]
                item, l1, sam, grad = loss_terms(pred, tgt, tc.alpha_s, tc.alpha_g)
                total = item if total is None else T.add(total, item)
                parts += [l1.item(), sam.item(), grad.item()]
            total = T.mul(total, 1.0 / tc.batch_size)
            loss_val = total.item()
            if not np.isfinite(loss_val):
                raise NumericError(f"training diverged at step {step}")
            grads = tape.gradients(total, [p for _, p in named])
        adam_step(named, grads, opt, tc.lr)
        parts /= tc.batch_size

        row = LogRow(step=step, loss=loss_val, l1=parts[0], sam=parts[1],
                     grad=parts[2])
        if val_cubes and step % tc.eval_every == 0:
            score = _val_mpsnr(params, val_cubes, scale)
            row.val_mpsnr = score
            if score > best_score:
                best, best_score = copy.deepcopy(params), score
                evals_since_best = 0
            else:
                evals_since_best += 1
        log.append(row)
        if evals_since_best >= tc.patience:
            break

    if best is None:
        best = params
    return best, log


def write_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LogRow.header() + "\n")
        for row in log:
            fh.write(row.line() + "\n")
