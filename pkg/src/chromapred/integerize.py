"""Fixed-point inference path.

Weights are floor-quantised with power-of-two scales chosen so that every
accumulator sits at one internal scale 2^O_x: a layer whose input has scale
2^s gets weights at 2^(O_x - s), accumulates at 2^O_x, and shifts right by
s with round-half-up, so its output carries scale 2^(O_x - s). Biases are
quantised directly at the accumulator scale.

The attention softmax uses two lookup tables: exponentials of the
max-subtracted, clamped logits (LUT_EXP) and reciprocals of their quantised
row sums (LUT_SUM). LUT_EXP is indexed on a grid of 2^-F natural-log units;
F = 0 gives one entry per integer exponent.

All arithmetic is integer: 64-bit accumulators, stored activations checked
to fit signed 32-bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model import (
    LayerSpec,
    ModelWeights,
    NetworkSpec,
    SchemeId,
    boundary_length,
)
from .tensor import replicate_index
from ._io import atomic_write_text

FORMAT_VERSION = 1
INT32_MAX = 2 ** 31 - 1
INT32_MIN = -(2 ** 31)
TEMP_SHIFT = 8
LEAKY_SHIFT = 7


class OverflowAuditError(ValueError):
    pass


@dataclass
class QuantConfig:
    internal_offset: int = 24  # O_x
    exp_offset: int = 16  # O_e, LUT_EXP scale 2^O_e
    sum_offset: int = 30  # O_s, LUT_SUM scale 2^O_s
    v_e: int = -15  # exponent clamp
    q: int = 1024  # LUT_SUM step
    exp_frac_bits: int = 4  # F
    input_offset: int | None = None  # scale of input samples; default O_x // 2
    b_max: int = 65  # boundary length of the largest block

    def __post_init__(self) -> None:
        if self.input_offset is None:
            self.input_offset = self.internal_offset // 2
        if not 0 < self.input_offset < self.internal_offset:
            raise ValueError("input_offset must lie strictly between 0 and internal_offset")
        if self.v_e >= 0:
            raise ValueError("v_e must be negative")
        if self.q < 1 or self.exp_frac_bits < 0:
            raise ValueError("q must be >= 1 and exp_frac_bits >= 0")


def build_lut_exp(v_e: int, o_e: int, frac_bits: int = 0) -> np.ndarray:
    """LUT_EXP[k] = floor(2^o_e * exp(s_k)), s_k = v_e + k / 2^frac_bits."""
    step = 1 << frac_bits
    n_e = abs(v_e) * step + 1
    scale = 1 << o_e
    return np.array([math.floor(scale * math.exp((v_e * step + k) / step)) for k in range(n_e)], dtype=np.int64)


def build_lut_sum(v_s: int, q: int, o_s: int) -> np.ndarray:
    """LUT_SUM[l] = floor(2^o_s / (l q)) for ceil((v_s + 1) / q) entries; entry 0 repeats entry 1."""
    n_s = -(-(v_s + 1) // q)
    k_s = 1 << o_s
    lut = np.array([k_s // (max(l, 1) * q) for l in range(n_s)], dtype=np.int64)
    return lut


@dataclass
class IntLayer:
    name: str
    branch: str
    k: int
    in_ch: int
    out_ch: int
    activation: str
    alpha: float
    weights: np.ndarray  # int64 (out, in, k, k)
    bias: np.ndarray  # int64 (out,)
    offset: int  # O_l: weight scale exponent
    out_shift: int  # O_y
    in_scale: int

    @property
    def out_scale(self) -> int:
        return self.in_scale + self.offset - self.out_shift

    @property
    def leaky_mult(self) -> int:
        return int(round(self.alpha * (1 << LEAKY_SHIFT)))


@dataclass
class IntegerModel:
    scheme: str
    variant: str
    temperature: float
    logit_layer: int
    layers: dict[str, IntLayer]
    config: QuantConfig
    lut_exp: np.ndarray
    lut_sum: np.ndarray
    temp_mult: int
    scales: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def branch(self, name: str) -> list[IntLayer]:
        return [layer for layer in self.layers.values() if layer.branch == name]

    def float_spec(self) -> NetworkSpec:
        specs = tuple(
            LayerSpec(l.name, l.branch, l.k, l.in_ch, l.out_ch, l.activation, l.alpha) for l in self.layers.values()
        )
        sid = SchemeId.from_variant(self.scheme, "inference", self.variant)
        return NetworkSpec(sid, specs, self.temperature, self.logit_layer)

    def radius(self, branch: str) -> int:
        return sum((layer.k - 1) // 2 for layer in self.branch(branch))

    @property
    def lut_bytes(self) -> int:
        return 4 * (len(self.lut_exp) + len(self.lut_sum))


# --------------------------------------------------------------------------
# primitive integer ops

def _check_int32(x: np.ndarray, what: str) -> np.ndarray:
    if x.size and (x.max() > INT32_MAX or x.min() < INT32_MIN):
        raise OverflowError(f"{what}: value outside signed 32-bit range")
    return x


def int_activation(x, kind: str, leaky_mult: int = 26):
    """Integer ReLU / Leaky ReLU; negatives of the leaky variant become (mult * x) >> 7."""
    x = np.asarray(x, dtype=np.int64)
    if kind == "none":
        return x
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, (leaky_mult * x) >> LEAKY_SHIFT)
    raise ValueError(f"unknown activation {kind!r}")


def int_layer_forward(x: np.ndarray, layer: IntLayer) -> np.ndarray:
    """Valid integer convolution of a (C, H, W) input, shift-compensated and activated."""
    x = np.ascontiguousarray(x, dtype=np.int64)
    if x.shape[0] != layer.in_ch:
        raise ValueError(f"layer {layer.name}: input has {x.shape[0]} channels, expects {layer.in_ch}")
    acc = kernels.int_conv(x, layer.weights, layer.bias, layer.out_shift)
    out = int_activation(acc, layer.activation, layer.leaky_mult)
    return _check_int32(out, f"layer {layer.name}")


def int_softmax_row(logits: np.ndarray, model: IntegerModel) -> np.ndarray:
    """Integer softmax of one row (or each row of a 2-D array); output scale 2^O_s.

    ``logits`` are at scale 2^model.scales['logits'].
    """
    m = np.atleast_2d(np.asarray(logits, dtype=np.int64))
    cfg = model.config
    out = kernels.int_softmax_rows(
        np.ascontiguousarray(m), model.temp_mult, TEMP_SHIFT,
        model.scales["logits"] - cfg.exp_frac_bits, cfg.v_e << cfg.exp_frac_bits,
        model.lut_exp, model.lut_sum, cfg.q,
    )
    return out[0] if np.ndim(logits) == 1 else out


def _int_pad(x: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return x
    iy = replicate_index(x.shape[-2], radius)
    ix = replicate_index(x.shape[-1], radius)
    return x[..., iy, :][..., ix]


def _rshift_round(x: np.ndarray, shift: int) -> np.ndarray:
    if shift <= 0:
        return x << (-shift)
    return (x + (1 << (shift - 1))) >> shift


def input_scale_factor(bitdepth: int, scale: int) -> int:
    """Integer multiplier c with v * c / 2^16 ~= v * 2^scale / (2^bitdepth - 1)."""
    peak = (1 << bitdepth) - 1
    return ((1 << (scale + 16)) + peak // 2) // peak


def to_fixed(v: np.ndarray, bitdepth: int, scale: int) -> np.ndarray:
    c = input_scale_factor(bitdepth, scale)
    return (np.asarray(v, dtype=np.int64) * c + (1 << 15)) >> 16


# --------------------------------------------------------------------------
# forward

def int_forward(
    model: IntegerModel,
    x0: np.ndarray,
    s0: np.ndarray,
    bitdepth: int = 8,
    available: np.ndarray | None = None,
) -> np.ndarray:
    """Integer prediction of one block.

    x0: (N, N) and s0: (3, 4N+1) unsigned samples at ``bitdepth``. Boundary
    positions with ``available`` False are replaced by mid-grey. Returns
    (2, N, N) int64 samples at ``bitdepth``.
    """
    sc = model.scales
    x0 = np.asarray(x0)
    n = x0.shape[-1]
    b = boundary_length(n)
    s0 = np.asarray(s0)
    if x0.shape[-2:] != (n, n) or s0.shape != (3, b):
        raise ValueError(f"block shapes {x0.shape} / {s0.shape} inconsistent with N={n}")
    s = to_fixed(s0, bitdepth, sc["input"])
    if available is not None:
        s[:, ~np.asarray(available, dtype=bool)] = 1 << (sc["input"] - 1)
    x = to_fixed(x0.reshape(1, n, n), bitdepth, sc["input"])

    cc_out = []
    feat = s[:, None, :]
    for layer in model.branch("cc"):
        feat = int_layer_forward(feat, layer)
        cc_out.append(feat)
    s_logit, s_content = cc_out[model.logit_layer], cc_out[-1]

    xj = _int_pad(x, model.radius("luma"))
    for layer in model.branch("luma"):
        xj = int_layer_forward(xj, layer)
    xj = xj.reshape(xj.shape[0], 1, n * n)

    f = int_layer_forward(s_logit, model.layers["att_f"])[:, 0, :]
    g = int_layer_forward(xj, model.layers["att_g"])[:, 0, :]
    xbar = int_layer_forward(xj, model.layers["att_x"])[:, 0, :]
    # N^2 x b; the 64-bit dot product is rounded back to scale 2^(s_f + s_g - input)
    logits = _check_int32(_rshift_round(g.T @ f, sc["input"]), "attention logits")
    a = int_softmax_row(logits, model)
    # weights drop to scale 2^O_e so the weighted sum stays inside 32 bits
    o_e = model.config.exp_offset
    a = _rshift_round(a, model.config.sum_offset - o_e)
    attended = _rshift_round(a @ s_content[:, 0, :].T, o_e).T  # D' x N^2
    _check_int32(attended, "attended features")
    o = _check_int32(_rshift_round(xbar * attended, sc["product_shift"]), "attention output")

    y = _int_pad(o.reshape(-1, n, n), model.radius("head"))
    for layer in model.branch("head"):
        y = int_layer_forward(y, layer)
    peak = (1 << bitdepth) - 1
    out = _rshift_round(y * peak, sc["output"])
    return np.clip(out, 0, peak)


def int_forward_block(model: IntegerModel, block) -> np.ndarray:
    return int_forward(model, block.x0, block.s0, block.bitdepth, block.available)


# --------------------------------------------------------------------------
# quantisation

def _quantize_layer(w: ModelWeights, name: str, in_scale: int, cfg: QuantConfig) -> IntLayer:
    layer = w.layers[name]
    ls = w.spec.layer(name)
    offset = cfg.internal_offset - in_scale
    if offset <= 0:
        raise ValueError(f"layer {name}: input scale {in_scale} leaves no weight precision under O_x={cfg.internal_offset}")
    wq = np.floor(layer.weights * (1 << offset)).astype(np.int64)
    bq = np.floor(layer.bias * (1 << cfg.internal_offset)).astype(np.int64)
    for arr, what in ((wq, "weights"), (bq, "bias")):
        if arr.size and (arr.max() > INT32_MAX or arr.min() < INT32_MIN):
            raise OverflowAuditError(f"layer {name}: quantised {what} do not fit 32-bit")
    return IntLayer(name, ls.branch, ls.k, ls.in_ch, ls.out_ch, ls.activation, ls.alpha, wq, bq,
                    offset, cfg.internal_offset - offset, in_scale)


def quantize_model(w: ModelWeights, cfg: QuantConfig | None = None, audit: bool = True) -> IntegerModel:
    """Integer model from an inference-phase float model.

    Raises :class:`OverflowAuditError` when the worst-case accumulator of any
    layer can reach 2^31.
    """
    cfg = cfg or QuantConfig()
    spec = w.spec
    if spec.phase != "inference":
        raise ValueError("quantize_model needs an inference-phase model; fuse the training model first")
    s_in = cfg.input_offset
    layers: dict[str, IntLayer] = {}

    def chain(branch, scale):
        outs = []
        for ls in spec.branch(branch):
            layers[ls.name] = _quantize_layer(w, ls.name, scale, cfg)
            scale = layers[ls.name].out_scale
            outs.append(scale)
        return outs

    cc_scales = chain("cc", s_in)
    luma_scale = chain("luma", s_in)[-1]
    layers["att_f"] = _quantize_layer(w, "att_f", cc_scales[spec.logit_layer], cfg)
    layers["att_g"] = _quantize_layer(w, "att_g", luma_scale, cfg)
    layers["att_x"] = _quantize_layer(w, "att_x", luma_scale, cfg)
    content_scale = cc_scales[-1]
    product_shift = layers["att_x"].out_scale + content_scale - s_in
    out_scale = chain("head", s_in)[-1]
    order = [ls.name for ls in spec.layers]
    layers = {name: layers[name] for name in order}

    k_e = 1 << cfg.exp_offset
    model = IntegerModel(
        scheme=spec.scheme,
        variant=spec.scheme_id.variant,
        temperature=spec.temperature,
        logit_layer=spec.logit_layer,
        layers=layers,
        config=cfg,
        lut_exp=build_lut_exp(cfg.v_e, cfg.exp_offset, cfg.exp_frac_bits),
        lut_sum=build_lut_sum(cfg.b_max * k_e, cfg.q, cfg.sum_offset),
        temp_mult=int(round((1 << TEMP_SHIFT) / spec.temperature)),
        scales={
            "input": s_in,
            "logits": layers["att_f"].out_scale + layers["att_g"].out_scale - s_in,
            "content": content_scale,
            "product_shift": product_shift,
            "output": out_scale,
        },
        metadata={"source": dict(w.metadata.get("config", {})), "quant": asdict(cfg)},
    )
    model.metadata["audit"] = {name: int(v) for name, v in overflow_audit(model, raise_on_failure=audit).items()}
    return model


def overflow_audit(model: IntegerModel, raise_on_failure: bool = True) -> dict[str, int]:
    """Worst-case accumulator magnitude sum|W~| * max|x| + |b~| for each layer.

    Input magnitudes come from interval propagation through the network,
    starting from samples in [0, 2^input].
    """
    bounds: dict[str, int] = {}

    def layer_bound(layer: IntLayer, lo: np.ndarray, hi: np.ndarray):
        w = layer.weights
        mag = np.maximum(np.abs(lo), np.abs(hi))  # per input channel
        acc = (np.abs(w).sum(axis=(2, 3)) * mag[None, :]).sum(axis=1) + np.abs(layer.bias)
        bounds[layer.name] = int(acc.max())
        wsum_pos = np.clip(w, 0, None).sum(axis=(2, 3))
        wsum_neg = np.clip(w, None, 0).sum(axis=(2, 3))
        acc_hi = wsum_pos @ hi + wsum_neg @ lo + layer.bias
        acc_lo = wsum_pos @ lo + wsum_neg @ hi + layer.bias
        rnd = (1 << (layer.out_shift - 1)) if layer.out_shift > 0 else 0
        out_lo, out_hi = (acc_lo + rnd) >> layer.out_shift, (acc_hi + rnd) >> layer.out_shift
        if layer.activation == "relu":
            out_lo, out_hi = np.maximum(out_lo, 0), np.maximum(out_hi, 0)
        elif layer.activation == "leaky_relu":
            out_lo = np.where(out_lo < 0, (layer.leaky_mult * out_lo) >> LEAKY_SHIFT, out_lo)
        return out_lo, out_hi

    def run(branch, lo, hi):
        outs = []
        for layer in model.branch(branch):
            lo, hi = layer_bound(layer, lo, hi)
            outs.append((lo, hi))
        return outs

    top = np.int64(1) << model.scales["input"]
    cc = run("cc", np.zeros(3, dtype=np.int64), np.full(3, top))
    luma_lo, luma_hi = run("luma", np.zeros(1, dtype=np.int64), np.full(1, top))[-1]
    f_lo, f_hi = layer_bound(model.layers["att_f"], *cc[model.logit_layer])
    g_lo, g_hi = layer_bound(model.layers["att_g"], luma_lo, luma_hi)
    f_mag = np.maximum(np.abs(f_lo), np.abs(f_hi))
    g_mag = np.maximum(np.abs(g_lo), np.abs(g_hi))
    # the row maximum always contributes K_e, so the LUT_SUM index is at least K_e // Q
    k_e = 1 << model.config.exp_offset
    bounds["softmax"] = int(k_e * model.lut_sum[min(k_e // model.config.q, len(model.lut_sum) - 1)])
    bounds["logits"] = int(model.temp_mult * (int((f_mag * g_mag).sum()) >> model.scales["input"]) >> TEMP_SHIFT)
    x_lo, x_hi = layer_bound(model.layers["att_x"], luma_lo, luma_hi)
    # a row of attention weights at scale 2^O_e sums to at most 2^O_e (1 + Q / 2^O_e) + b
    row_sum = k_e + model.config.q + model.config.b_max
    c_lo, c_hi = cc[-1]
    c_mag = np.maximum(np.abs(c_lo), np.abs(c_hi))
    bounds["attention"] = int(row_sum * c_mag.max())
    a_lo = -((-np.minimum(c_lo, 0) * row_sum) // k_e) - 1
    a_hi = (np.maximum(c_hi, 0) * row_sum) // k_e + 1
    prods = np.stack([x_lo * a_lo, x_lo * a_hi, x_hi * a_lo, x_hi * a_hi])
    bounds["product"] = int(np.abs(prods).max())
    shift = model.scales["product_shift"]
    o_lo, o_hi = _rshift_round(prods.min(axis=0), shift), _rshift_round(prods.max(axis=0), shift)
    run("head", o_lo, o_hi)

    if raise_on_failure:
        for name, bound in bounds.items():
            if bound > INT32_MAX:
                raise OverflowAuditError(f"layer {name}: worst-case accumulator {bound} exceeds 2^31 - 1")
    return bounds


# --------------------------------------------------------------------------
# integer model file

def integer_model_to_dict(m: IntegerModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "integer",
        "scheme": m.scheme,
        "phase": "inference",
        "variant": m.variant,
        "temperature": m.temperature,
        "logit_layer": m.logit_layer,
        "constants": asdict(m.config),
        "temp_mult": m.temp_mult,
        "temp_shift": TEMP_SHIFT,
        "scales": m.scales,
        "lut_exp": m.lut_exp.tolist(),
        "lut_sum": m.lut_sum.tolist(),
        "layers": [
            {
                "name": l.name, "branch": l.branch, "k": l.k, "in_ch": l.in_ch, "out_ch": l.out_ch,
                "activation": l.activation, "alpha": l.alpha, "offset": l.offset, "out_shift": l.out_shift,
                "in_scale": l.in_scale, "weights": l.weights.ravel().tolist(), "bias": l.bias.tolist(),
            }
            for l in m.layers.values()
        ],
        "metadata": m.metadata,
    }


def integer_model_from_dict(doc: dict) -> IntegerModel:
    from .model import ModelFormatError

    if doc.get("kind") != "integer":
        raise ModelFormatError(f"not an integer model (kind={doc.get('kind')!r})")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"format version mismatch: file has {doc.get('format_version')!r}, reader supports {FORMAT_VERSION}"
        )
    layers = {}
    for e in doc["layers"]:
        shape = (e["out_ch"], e["in_ch"], e["k"], e["k"])
        layers[e["name"]] = IntLayer(
            e["name"], e["branch"], e["k"], e["in_ch"], e["out_ch"], e["activation"], e["alpha"],
            np.asarray(e["weights"], dtype=np.int64).reshape(shape), np.asarray(e["bias"], dtype=np.int64),
            e["offset"], e["out_shift"], e["in_scale"],
        )
    return IntegerModel(
        scheme=doc["scheme"], variant=doc.get("variant", "default"), temperature=doc["temperature"],
        logit_layer=doc["logit_layer"], layers=layers, config=QuantConfig(**doc["constants"]),
        lut_exp=np.asarray(doc["lut_exp"], dtype=np.int64), lut_sum=np.asarray(doc["lut_sum"], dtype=np.int64),
        temp_mult=doc["temp_mult"], scales=dict(doc["scales"]), metadata=doc.get("metadata", {}),
    )


def dumps_integer_model(m: IntegerModel) -> str:
    return json.dumps(integer_model_to_dict(m), indent=1) + "\n"


def save_integer_model(m: IntegerModel, path: str | Path) -> None:
    atomic_write_text(path, dumps_integer_model(m))


def load_integer_model(path: str | Path) -> IntegerModel:
    return integer_model_from_dict(json.loads(Path(path).read_text()))
