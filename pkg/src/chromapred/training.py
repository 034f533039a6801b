"""Losses, back-propagation, Adam and the multi-model training loop.

The loop shares one weight set across block sizes: for every batch index it
takes one optimiser step per size, smallest size first, each step seeing only
that size's sub-batch.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import BlockSample, group_by_size, stack_blocks
from .model import ModelWeights, SchemeId, Widths, build_spec, forward_batch, init_weights, save_model
from .tensor import activation_grad, pad_backward

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "size", "loss_reg", "loss_ae", "loss_total", "val_psnr_4", "val_psnr_8", "val_psnr_16"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    sizes: tuple[int, ...] = (4, 8, 16)
    lambda_reg: float = 1.0
    lambda_ae: float = 1.0
    lambda_r: float = 1.0
    lambda_s: float = 0.01
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self) -> None:
        self.sizes = tuple(sorted(int(n) for n in self.sizes))
        if not self.sizes or not set(self.sizes) <= {4, 8, 16}:
            raise ValueError("sizes must be a non-empty subset of {4, 8, 16}")
        for name in ("lambda_reg", "lambda_ae", "lambda_r", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelWeights):
        super().__init__(message)
        self.last_good = last_good


# --------------------------------------------------------------------------
# losses

def mse_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Squared error normalised by the number of predicted samples (2 N^2)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.sum((gt - pred) ** 2) / pred.size)


def ae_loss(s1: np.ndarray, s1_rec: np.ndarray, s2: np.ndarray, lambda_r: float, lambda_s: float) -> float:
    """Reconstruction error of the boundary autoencoder plus an L1 sparsity term."""
    d, b = s1.shape
    return float(lambda_r / (d * b) * np.sum((s1 - s1_rec) ** 2) + lambda_s / (s2.shape[0] * b) * np.sum(np.abs(s2)))


def total_loss(reg: float, ae: float, cfg: TrainConfig) -> float:
    return cfg.lambda_reg * reg + cfg.lambda_ae * ae


@dataclass
class LossTerms:
    reg: float
    ae: float
    total: float


# --------------------------------------------------------------------------
# back-propagation

def _effective_lambda_s(w: ModelWeights, cfg: TrainConfig) -> float:
    return cfg.lambda_s if w.spec.scheme_id.sparsity_enabled else 0.0


def evaluate_loss(w: ModelWeights, x0, s0, z, cfg: TrainConfig, cache: dict | None = None) -> LossTerms:
    """Batch-mean losses of one homogeneous batch."""
    if cache is None:
        cache = {}
    pred, _ = forward_batch(w, x0, s0, cache)
    reg = float(np.sum((pred - z) ** 2) / pred.size)
    ae = 0.0
    if w.spec.has_decoder:
        s1, s2, rec = cache["cc_out"][-2], cache["cc_out"][-1], cache["reconstruction"]
        bsz, d, b = s1.shape
        ae = float(cfg.lambda_r / (d * b) * np.sum((s1 - rec) ** 2) / bsz
                   + _effective_lambda_s(w, cfg) / (s2.shape[1] * b) * np.sum(np.abs(s2)) / bsz)
    cache["pred"] = pred
    return LossTerms(reg, ae, total_loss(reg, ae, cfg))


def _first_non_finite(w: ModelWeights, cache: dict) -> str:
    for ls in w.spec.layers:
        pre = cache.get(f"{ls.name}.pre")
        if pre is not None and not np.all(np.isfinite(pre)):
            return ls.name
    for key in ("f", "g", "xbar", "attention", "raw"):
        if key in cache and not np.all(np.isfinite(cache[key])):
            return key
    return "loss"


def _conv_backward(layer, x, dz, need_input: bool):
    k, co = layer.kernel, layer.out_channels
    bsz, c, h, wd = x.shape
    if k == 1:
        w2 = layer.weights[:, :, 0, 0]
        dw = np.einsum("bohw,bchw->oc", dz, x, optimize=True)[:, :, None, None]
        dx = np.einsum("oc,bohw->bchw", w2, dz, optimize=True) if need_input else None
    else:
        cols = kernels.im2col(np.ascontiguousarray(x), k)
        ho, wo = cols.shape[1], cols.shape[2]
        dz2 = dz.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (dz2.T @ cols.reshape(-1, cols.shape[-1])).reshape(layer.weights.shape)
        dx = None
        if need_input:
            dcols = (dz2 @ layer.weights.reshape(co, -1)).reshape(bsz, ho, wo, -1)
            dx = kernels.col2im(dcols, c, h, wd, k)
    return dw, dz.sum(axis=(0, 2, 3)), dx


def _spatial_backward(w: ModelWeights, branch: str, dout, cache, grads, need_input: bool):
    specs = w.spec.branch(branch)
    d = dout
    for i in range(len(specs) - 1, -1, -1):
        ls = specs[i]
        layer = w.layers[ls.name]
        dz = activation_grad(cache[f"{ls.name}.pre"], d, layer.activation, layer.alpha)
        dw, db, d = _conv_backward(layer, cache[f"{ls.name}.in"], dz, need_input or i > 0)
        grads[ls.name] = (dw, db)
    return d


def _dense_backward(layer, x, dz):
    """Gradients of a 1x1 layer over (B, C, L) features; returns (dW, db, dx)."""
    w2 = layer.weights[:, :, 0, 0]
    dw = np.einsum("bol,bcl->oc", dz, x, optimize=True)[:, :, None, None]
    return dw, dz.sum(axis=(0, 2)), np.matmul(w2.T, dz)


def backward(w: ModelWeights, batch, cfg: TrainConfig) -> tuple[LossTerms, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Batch-mean total loss and its gradient for every layer's (weights, bias).

    ``batch`` is a list of same-size :class:`BlockSample` or an (x0, s0, z)
    array triple.
    """
    x0, s0, z = stack_blocks(batch) if isinstance(batch, list) else batch
    spec = w.spec
    cache: dict = {}
    try:
        loss = evaluate_loss(w, x0, s0, z, cfg, cache)
    except FloatingPointError:  # raised mid-forward; the cache holds what ran
        loss = None
    if loss is None or not np.isfinite(loss.total):
        raise FloatingPointError(f"non-finite loss; first non-finite values at {_first_non_finite(w, cache)!r}")
    bsz, _, n, _ = x0.shape
    grads: dict = {}

    raw, pred = cache["raw"], cache["pred"]
    dpred = cfg.lambda_reg * 2.0 * (pred - z) / pred.size
    draw = dpred * ((raw >= 0.0) & (raw <= 1.0))
    d_head_in = _spatial_backward(w, "head", draw, cache, grads, need_input=True)
    do = pad_backward(d_head_in, spec.radius("head"), n, n).reshape(bsz, -1, n * n)

    xbar, attended, a = cache["xbar"], cache["attended"], cache["attention"]
    d_xbar = do * attended
    d_att = do * xbar  # B, D', N^2
    s_content, s_logit = cache["s_content"], cache["s_logit"]
    da = np.matmul(d_att.transpose(0, 2, 1), s_content)  # B, N^2, b
    d_content = np.matmul(d_att, a)  # B, D', b
    dm = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / spec.temperature
    f, g = cache["f"], cache["g"]
    dg = np.matmul(f, dm.transpose(0, 2, 1))  # B, h, N^2
    df = np.matmul(g, dm)  # B, h, b

    xj = cache["xj"]
    dw, db, d_logit = _dense_backward(w.layers["att_f"], s_logit, df)
    grads["att_f"] = (dw, db)
    dw, db, dxj_g = _dense_backward(w.layers["att_g"], xj, dg)
    grads["att_g"] = (dw, db)
    dw, db, dxj_x = _dense_backward(w.layers["att_x"], xj, d_xbar)
    grads["att_x"] = (dw, db)
    dxj = (dxj_g + dxj_x).reshape(bsz, -1, n, n)
    _spatial_backward(w, "luma", dxj, cache, grads, need_input=False)

    cc_specs = spec.branch("cc")
    cc_out = cache["cc_out"]
    d_out = [np.zeros_like(s) for s in cc_out]
    d_out[spec.logit_layer] += d_logit
    d_out[-1] += d_content
    if spec.has_decoder:
        s1, s2, rec = cc_out[-2], cc_out[-1], cache["reconstruction"]
        _, dim, b = s1.shape
        d_rec = cfg.lambda_ae * cfg.lambda_r * 2.0 * (rec - s1) / (dim * b * bsz)
        d_out[-2] -= d_rec
        d_out[-1] += cfg.lambda_ae * _effective_lambda_s(w, cfg) * np.sign(s2) / (s2.shape[1] * b * bsz)
        dec = spec.branch("decoder")[0]
        dw, db, ds2 = _dense_backward(w.layers[dec.name], s2, d_rec)
        grads[dec.name] = (dw, db)
        d_out[-1] += ds2
    carry = 0.0
    for i in range(len(cc_specs) - 1, -1, -1):
        layer = w.layers[cc_specs[i].name]
        dz = activation_grad(cache[f"{cc_specs[i].name}.pre"], d_out[i] + carry, layer.activation, layer.alpha)
        dw, db, carry = _dense_backward(layer, cache[f"{cc_specs[i].name}.in"], dz)
        grads[cc_specs[i].name] = (dw, db)
    return loss, grads


# --------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(w: ModelWeights, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple[ModelWeights, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for name, (dw, db) in grads.items():
        layer = w.layers[name]
        for key, param, g in (("w", layer.weights, dw), ("b", layer.bias, db)):
            slot = (name, key)
            m = state.m.get(slot)
            if m is None:
                m = state.m[slot] = np.zeros_like(param)
                state.v[slot] = np.zeros_like(param)
            v = state.v[slot]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            param -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return w, state


# --------------------------------------------------------------------------
# training loop

def split_validation(samples: list[BlockSample], fraction: float) -> tuple[dict, dict]:
    """Per-size train/validation split; the last ``fraction`` of each size is held out."""
    train, val = {}, {}
    for n, group in group_by_size(samples).items():
        k = int(round(len(group) * fraction))
        if fraction > 0 and len(group) > 1:
            k = max(k, 1)
        train[n] = group[:len(group) - k]
        val[n] = group[len(group) - k:]
    return train, val


def validation_metrics(w: ModelWeights, val: dict[int, list[BlockSample]]) -> dict:
    from .evaluation import psnr

    out = {}
    for n, group in val.items():
        if not group:
            continue
        x0, s0, z = stack_blocks(group)
        pred, _ = forward_batch(w, x0, s0)
        per_block = [psnr(p, t) for p, t in zip(pred, z)]
        out[n] = {"mse": float(np.mean((pred - z) ** 2)), "psnr": float(np.mean(per_block))}
    return out


def _log_row(writer, epoch, step, size, losses, val):
    row = [epoch, step, size]
    row += [repr(float(v)) for v in losses] if losses else ["", "", ""]
    row += [repr(float(val[n]["psnr"])) if n in val else "" for n in (4, 8, 16)]
    writer.writerow(row)


def train_multimodel(
    samples: list[BlockSample],
    cfg: TrainConfig,
    scheme: SchemeId,
    log_path: str | Path | None = None,
    checkpoint: str | Path | None = None,
    widths: Widths | None = None,
    init: ModelWeights | None = None,
) -> ModelWeights:
    """Train one shared weight set on blocks of every size in ``cfg.sizes``.

    Returns the trained model; ``metadata["history"]`` holds per-epoch
    validation MSE/PSNR per size (epoch 0 is the initialisation).
    """
    samples = [s for s in samples if s.n in cfg.sizes]
    if not samples:
        raise ValueError("empty dataset")
    train, val = split_validation(samples, cfg.validation_fraction)
    if not any(train.values()):
        raise ValueError("no training blocks left after the validation split")

    from .rng import Xoshiro256

    w = init.copy() if init is not None else init_weights(build_spec(scheme.with_phase("train"), widths), cfg.seed)
    shuffle_rng = Xoshiro256(cfg.seed ^ 0x5DEECE66D)
    state = AdamState()
    history = []

    log_fh = open(log_path, "a", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    try:
        if writer and log_fh.tell() == 0:
            writer.writerow(LOG_COLUMNS)
        val_m = validation_metrics(w, val)
        history.append({"epoch": 0, "step": 0, "val": {str(n): v for n, v in val_m.items()}})
        if writer:
            for n in cfg.sizes:
                _log_row(writer, 0, 0, n, None, val_m)

        for epoch in range(1, cfg.epochs + 1):
            order = {n: [group[i] for i in shuffle_rng.permutation(len(group))] for n, group in train.items()}
            n_batches = max(-(-len(g) // cfg.batch_size) for g in order.values())
            sums = {n: np.zeros(3) for n in order}
            counts = {n: 0 for n in order}
            for m in range(n_batches):
                for n in cfg.sizes:
                    batch = order.get(n, [])[m * cfg.batch_size:(m + 1) * cfg.batch_size]
                    if not batch:
                        continue
                    last_good = w.copy()
                    try:
                        loss, grads = backward(w, batch, cfg)
                    except FloatingPointError as exc:
                        if checkpoint:
                            save_model(last_good, checkpoint)
                        raise TrainingDiverged(f"epoch {epoch}, step {state.t + 1}: {exc}", last_good) from exc
                    adam_step(w, grads, state, cfg)
                    sums[n] += (loss.reg, loss.ae, loss.total)
                    counts[n] += 1
            val_m = validation_metrics(w, val)
            history.append({"epoch": epoch, "step": state.t, "val": {str(n): v for n, v in val_m.items()}})
            log.info("epoch %d step %d val %s", epoch, state.t,
                     {n: round(v["psnr"], 3) for n, v in val_m.items()})
            if writer:
                for n in cfg.sizes:
                    means = tuple(sums[n] / counts[n]) if counts.get(n) else None
                    _log_row(writer, epoch, state.t, n, means, val_m)
                log_fh.flush()
            w.metadata.update(steps=state.t, history=history)
            if checkpoint:
                save_model(w, checkpoint)
    finally:
        if log_fh:
            log_fh.close()

    w.metadata.update(seed=cfg.seed, steps=state.t, config=asdict(cfg), history=history)
    w.metadata["config"]["sizes"] = list(cfg.sizes)
    return w
