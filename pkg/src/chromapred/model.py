"""Attention-based chroma predictor: architecture specs, boundary references,
the float forward pass, complexity accounting and the float model file.

One set of weights serves every block size N in {4, 8, 16}. The network has
three branches:

* boundary branch: 1x1 convolutions over the 3 x (4N+1) reference volume;
* luma branch: 3x3 (or fused 5x5) convolutions over the N x N co-located luma;
* prediction head: convolutions over the attention output, producing Cb and Cr.

Spatial branches pad their input once (replicate) by the branch's total
receptive radius and then run valid convolutions only, which keeps layer
fusion exact at block borders.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import Xoshiro256
from .tensor import (
    ConvLayer,
    DEFAULT_LEAKY_ALPHA,
    apply_activation,
    conv2d_linear,
    fuse_linear_pair,
    pad,
    softmax_rows,
)

SUPPORTED_SIZES = (4, 8, 16)
TEMPERATURE = 0.5
MISSING_REFERENCE = 0.5
FORMAT_VERSION = 1
VARIANTS = ("default", "baseline-nonlinear", "single-layer", "no-sparsity")
FLOP_CONVENTION = (
    "conv: 2*K^2*Cin*Cout per output position (pad-once valid grid); "
    "attention: 2*h*N^2*b for logits, 2*N^2*b*D' for the weighted sum, 5*N^2*b for softmax; "
    "bias adds and the element-wise product are not counted"
)


def boundary_length(n: int) -> int:
    return 4 * n + 1


@dataclass(frozen=True)
class SchemeId:
    scheme: str = "scheme1"
    phase: str = "train"
    baseline_nonlinear_luma: bool = False
    single_layer_luma: bool = False
    sparsity_enabled: bool = True

    def __post_init__(self) -> None:
        if self.scheme not in ("scheme1", "scheme2"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.phase not in ("train", "inference"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.baseline_nonlinear_luma and self.single_layer_luma:
            raise ValueError("unknown combination: baseline-nonlinear and single-layer are exclusive")
        if self.scheme == "scheme2" and (self.baseline_nonlinear_luma or self.single_layer_luma):
            raise ValueError("unknown combination: luma ablations are defined for scheme1 only")
        if self.scheme == "scheme1" and not self.sparsity_enabled:
            raise ValueError("unknown combination: scheme1 has no sparsity term")

    @classmethod
    def from_variant(cls, scheme: str, phase: str = "train", variant: str = "default") -> "SchemeId":
        if scheme in ("1", "2"):
            scheme = "scheme" + scheme
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        return cls(
            scheme=scheme,
            phase=phase,
            baseline_nonlinear_luma=variant == "baseline-nonlinear",
            single_layer_luma=variant == "single-layer",
            sparsity_enabled=variant != "no-sparsity",
        )

    @property
    def variant(self) -> str:
        if self.baseline_nonlinear_luma:
            return "baseline-nonlinear"
        if self.single_layer_luma:
            return "single-layer"
        if not self.sparsity_enabled:
            return "no-sparsity"
        return "default"

    def with_phase(self, phase: str) -> "SchemeId":
        return replace(self, phase=phase)


@dataclass(frozen=True)
class Widths:
    """Channel widths; defaults reproduce the published configuration."""

    boundary: int = 32  # D
    luma: int = 64  # C
    attention: int = 16  # h
    head: int = 32  # E
    bottleneck: int = 3  # scheme2 encoder output


@dataclass(frozen=True)
class LayerSpec:
    name: str
    branch: str
    k: int
    in_ch: int
    out_ch: int
    activation: str = "none"
    alpha: float = DEFAULT_LEAKY_ALPHA

    @property
    def n_params(self) -> int:
        return self.k * self.k * self.in_ch * self.out_ch + self.out_ch


@dataclass(frozen=True)
class NetworkSpec:
    scheme_id: SchemeId
    layers: tuple[LayerSpec, ...]
    temperature: float = TEMPERATURE
    logit_layer: int = -1  # index into the boundary branch feeding W_F

    def branch(self, name: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.branch == name]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def radius(self, branch: str) -> int:
        return sum((layer.k - 1) // 2 for layer in self.branch(branch))

    @property
    def scheme(self) -> str:
        return self.scheme_id.scheme

    @property
    def phase(self) -> str:
        return self.scheme_id.phase

    @property
    def has_decoder(self) -> bool:
        return bool(self.branch("decoder"))


def build_spec(sid: SchemeId, widths: Widths | None = None) -> NetworkSpec:
    """Layer list for a scheme/phase/variant."""
    w = widths or Widths()
    s2 = sid.scheme == "scheme2"
    cc_act = "leaky_relu" if s2 else "relu"
    content = w.bottleneck if s2 else w.boundary
    train = sid.phase == "train"

    layers = [LayerSpec("cc1", "cc", 1, 3, w.boundary, cc_act)]
    layers.append(LayerSpec("cc2", "cc", 1, w.boundary, content, cc_act))
    if s2 and train:
        layers.append(LayerSpec("dec1", "decoder", 1, content, w.boundary))

    fusable = not (sid.baseline_nonlinear_luma or sid.single_layer_luma)
    if sid.single_layer_luma or (fusable and not train):
        layers.append(LayerSpec("luma", "luma", 5, 1, w.luma))
    else:
        act = "relu" if sid.baseline_nonlinear_luma else "none"
        layers.append(LayerSpec("luma1", "luma", 3, 1, w.luma, act))
        layers.append(LayerSpec("luma2", "luma", 3, w.luma, w.luma, act))

    layers.append(LayerSpec("att_f", "attention", 1, w.boundary, w.attention))
    layers.append(LayerSpec("att_g", "attention", 1, w.luma, w.attention))
    layers.append(LayerSpec("att_x", "attention", 1, w.luma, content))

    head = content if s2 else w.head
    if sid.single_layer_luma or (fusable and not train):
        layers.append(LayerSpec("head", "head", 3, content, 2))
    else:
        act = "relu" if sid.baseline_nonlinear_luma else "none"
        layers.append(LayerSpec("head1", "head", 3, content, head, act))
        layers.append(LayerSpec("head2", "head", 1, head, 2))

    return NetworkSpec(sid, tuple(layers), TEMPERATURE, 0 if s2 else -1)


def count_params(spec: NetworkSpec) -> int:
    return sum(layer.n_params for layer in spec.layers)


def count_flops(spec: NetworkSpec, n: int) -> int:
    """Operation count for one N x N block under :data:`FLOP_CONVENTION`."""
    b = boundary_length(n)
    total = 0
    for branch in ("luma", "head"):
        side = n + 2 * spec.radius(branch)
        for layer in spec.branch(branch):
            side -= layer.k - 1
            total += 2 * layer.k ** 2 * layer.in_ch * layer.out_ch * side * side
    for layer in spec.branch("cc") + spec.branch("decoder"):
        total += 2 * layer.in_ch * layer.out_ch * b
    f, g, x = spec.layer("att_f"), spec.layer("att_g"), spec.layer("att_x")
    total += 2 * f.in_ch * f.out_ch * b
    total += 2 * (g.in_ch * g.out_ch + x.in_ch * x.out_ch) * n * n
    total += 2 * g.out_ch * n * n * b
    total += 2 * n * n * b * x.out_ch
    total += 5 * n * n * b
    return total


@dataclass
class ModelWeights:
    spec: NetworkSpec
    layers: dict[str, ConvLayer]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for ls in self.spec.layers:
            if ls.name not in self.layers:
                raise ValueError(f"missing weights for layer {ls.name!r}")
            layer = self.layers[ls.name]
            want = (ls.out_ch, ls.in_ch, ls.k, ls.k)
            if layer.weights.shape != want:
                raise ValueError(f"layer {ls.name!r}: weights {layer.weights.shape}, spec wants {want}")
            if layer.activation != ls.activation:
                raise ValueError(f"layer {ls.name!r}: activation {layer.activation} != spec {ls.activation}")
        extra = set(self.layers) - {ls.name for ls in self.spec.layers}
        if extra:
            raise ValueError(f"weights for unknown layers {sorted(extra)}")

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.spec, {k: v.copy() for k, v in self.layers.items()}, json.loads(json.dumps(self.metadata)))

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in declaration order, as (label, array) pairs."""
        out = []
        for ls in self.spec.layers:
            out.append((f"{ls.name}.weights", self.layers[ls.name].weights))
            out.append((f"{ls.name}.bias", self.layers[ls.name].bias))
        return out


def init_weights(spec: NetworkSpec, seed: int = 0) -> ModelWeights:
    """Glorot-uniform weights and zero biases, drawn in layer declaration order."""
    rng = Xoshiro256(seed)
    layers = {}
    for ls in spec.layers:
        fan_in, fan_out = ls.in_ch * ls.k ** 2, ls.out_ch * ls.k ** 2
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(ls.out_ch * ls.in_ch * ls.k ** 2, -bound, bound)
        layers[ls.name] = ConvLayer(
            w.reshape(ls.out_ch, ls.in_ch, ls.k, ls.k), np.zeros(ls.out_ch), ls.activation, ls.alpha, ls.name
        )
    return ModelWeights(spec, layers, {"seed": seed, "steps": 0})


def _fuse_branch(layers: list[ConvLayer]) -> ConvLayer:
    fused = layers[0]
    for nxt in layers[1:]:
        fused = fuse_linear_pair(fused, nxt)
    return fused


def fuse_model(w: ModelWeights) -> ModelWeights:
    """Inference-phase model: merge linear luma/head branches, drop the AE decoder."""
    if w.spec.phase == "inference":
        return w.copy()
    target = build_spec(w.spec.scheme_id.with_phase("inference"), _widths_of(w.spec))
    layers = {}
    for ls in target.layers:
        if ls.name in w.layers:
            layers[ls.name] = w.layers[ls.name].copy()
        else:
            fused = _fuse_branch([w.layers[s.name] for s in w.spec.branch(ls.branch)])
            fused.name = ls.name
            layers[ls.name] = fused
    meta = json.loads(json.dumps(w.metadata))
    meta["fused_from"] = "train"
    return ModelWeights(replace(target, temperature=w.spec.temperature), layers, meta)


def _widths_of(spec: NetworkSpec) -> Widths:
    cc1, cc2 = spec.layer("cc1"), spec.layer("cc2")
    luma = spec.branch("luma")[0]
    att_f = spec.layer("att_f")
    heads = spec.branch("head")
    head = heads[0].out_ch if len(heads) > 1 else Widths().head
    return Widths(cc1.out_ch, luma.out_ch, att_f.out_ch, head, cc2.out_ch if spec.scheme == "scheme2" else 3)


# --------------------------------------------------------------------------
# boundary references

@dataclass
class BlockInput:
    x0: np.ndarray  # (1, N, N)
    s0: np.ndarray  # (3, 4N+1)

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.x0.ndim == 2:
            self.x0 = self.x0[None]
        self.s0 = np.asarray(self.s0, dtype=np.float64)
        n = self.x0.shape[-1]
        if self.x0.shape != (1, n, n) or n not in SUPPORTED_SIZES:
            raise ValueError(f"x0 must be (1, N, N) with N in {SUPPORTED_SIZES}, got {self.x0.shape}")
        if self.s0.shape != (3, boundary_length(n)):
            raise ValueError(f"s0 must be (3, {boundary_length(n)}), got {self.s0.shape}")
        for name, arr in (("x0", self.x0), ("s0", self.s0)):
            if not (np.all(arr >= 0.0) and np.all(arr <= 1.0)):
                raise ValueError(f"{name} values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.x0.shape[-1]


def reference_positions(origin: tuple[int, int], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Plane coordinates (ys, xs) of the 4N+1 boundary samples.

    Left column bottom-most first (2N samples incl. below-left), then the
    corner, then the top row left-most first (2N samples incl. above-right).
    """
    oy, ox = origin
    i = np.arange(2 * n)
    ys = np.concatenate([oy + 2 * n - 1 - i, [oy - 1], np.full(2 * n, oy - 1)])
    xs = np.concatenate([np.full(2 * n, ox - 1), [ox - 1], ox + i])
    return ys, xs


def extract_reference_array(
    luma_plane: np.ndarray,
    cb_plane: np.ndarray,
    cr_plane: np.ndarray,
    block_origin: tuple[int, int],
    n: int,
    availability: np.ndarray | None = None,
    return_mask: bool = False,
):
    """Stack the Y/Cb/Cr boundary arrays of one block into a (3, 4N+1) volume.

    Positions outside the plane, or masked out by ``availability`` (a
    boolean array over the 4N+1 positions), are filled with mid-grey 0.5.
    """
    h, w = luma_plane.shape
    if cb_plane.shape != (h, w) or cr_plane.shape != (h, w):
        raise ValueError("luma and chroma planes must share one resolution")
    oy, ox = block_origin
    if oy < 0 or ox < 0 or oy + n > h or ox + n > w:
        raise ValueError(f"block at {block_origin} of size {n} lies outside the {h}x{w} plane")
    ys, xs = reference_positions(block_origin, n)
    mask = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    if availability is not None:
        mask &= np.asarray(availability, dtype=bool)
    out = np.full((3, boundary_length(n)), MISSING_REFERENCE)
    for row, plane in enumerate((luma_plane, cb_plane, cr_plane)):
        out[row, mask] = plane[ys[mask], xs[mask]]
    return (out, mask) if return_mask else out


# --------------------------------------------------------------------------
# forward pass

def _dense(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """1x1 convolution over (B, C, L) feature arrays, no activation."""
    return np.matmul(layer.weights[:, :, 0, 0], x) + layer.bias[None, :, None]


def _spatial_branch(w: ModelWeights, branch: str, x: np.ndarray, cache: dict) -> np.ndarray:
    radius = w.spec.radius(branch)
    cache[f"{branch}.padded_shape"] = x.shape
    x = pad(x, radius)
    for ls in w.spec.branch(branch):
        layer = w.layers[ls.name]
        cache[f"{ls.name}.in"] = x
        z = conv2d_linear(x, layer)
        cache[f"{ls.name}.pre"] = z
        x = apply_activation(z, layer.activation, layer.alpha)
    return x


def forward_batch(w: ModelWeights, x0: np.ndarray, s0: np.ndarray, cache: dict | None = None):
    """Predict a homogeneous batch.

    x0: (B, 1, N, N), s0: (B, 3, 4N+1). Returns (prediction (B, 2, N, N)
    clipped to [0, 1], attention (B, N*N, 4N+1)). When ``cache`` is a dict it
    receives every intermediate needed for back-propagation.
    """
    spec = w.spec
    if cache is None:
        cache = {}
    bsz, _, n, _ = x0.shape
    if s0.shape != (bsz, 3, boundary_length(n)):
        raise ValueError(f"s0 shape {s0.shape} does not match {bsz} blocks of size {n}")

    s = s0
    cc_out = []
    for ls in spec.branch("cc"):
        layer = w.layers[ls.name]
        cache[f"{ls.name}.in"] = s
        z = _dense(layer, s)
        cache[f"{ls.name}.pre"] = z
        s = apply_activation(z, layer.activation, layer.alpha)
        cc_out.append(s)
    cache["cc_out"] = cc_out
    s_logit, s_content = cc_out[spec.logit_layer], cc_out[-1]
    for ls in spec.branch("decoder"):
        cache["reconstruction"] = _dense(w.layers[ls.name], s_content)

    xj = _spatial_branch(w, "luma", x0, cache)
    xj = xj.reshape(bsz, xj.shape[1], n * n)
    cache["xj"] = xj

    f = _dense(w.layers["att_f"], s_logit)
    g = _dense(w.layers["att_g"], xj)
    xbar = _dense(w.layers["att_x"], xj)
    m = np.matmul(g.transpose(0, 2, 1), f)  # B, N^2, b
    a = softmax_rows(m, spec.temperature)
    attended = np.matmul(a, s_content.transpose(0, 2, 1)).transpose(0, 2, 1)  # B, D', N^2
    o = (xbar * attended).reshape(bsz, -1, n, n)
    cache.update(f=f, g=g, xbar=xbar, attention=a, attended=attended, s_logit=s_logit, s_content=s_content)

    raw = _spatial_branch(w, "head", o, cache)
    cache["raw"] = raw
    return np.clip(raw, 0.0, 1.0), a


def forward(w: ModelWeights, block: BlockInput) -> tuple[np.ndarray, np.ndarray]:
    """Predict one block: returns (Cb/Cr prediction (2, N, N), attention (N^2, 4N+1))."""
    pred, a = forward_batch(w, block.x0[None], block.s0[None])
    return pred[0], a[0]


# --------------------------------------------------------------------------
# float model file

def model_to_dict(w: ModelWeights) -> dict:
    spec = w.spec
    return {
        "format_version": FORMAT_VERSION,
        "kind": "float",
        "scheme": spec.scheme,
        "phase": spec.phase,
        "variant": spec.scheme_id.variant,
        "temperature": spec.temperature,
        "logit_layer": spec.logit_layer,
        "layers": [
            {
                "name": ls.name,
                "branch": ls.branch,
                "k": ls.k,
                "in_ch": ls.in_ch,
                "out_ch": ls.out_ch,
                "activation": ls.activation,
                "alpha": ls.alpha,
                "weights": w.layers[ls.name].weights.ravel().tolist(),
                "bias": w.layers[ls.name].bias.tolist(),
            }
            for ls in spec.layers
        ],
        "metadata": w.metadata,
    }


class ModelFormatError(ValueError):
    pass


def model_from_dict(doc: dict) -> ModelWeights:
    if doc.get("kind") != "float":
        raise ModelFormatError(f"not a float model (kind={doc.get('kind')!r})")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"format version mismatch: file has {doc.get('format_version')!r}, reader supports {FORMAT_VERSION}"
        )
    sid = SchemeId.from_variant(doc["scheme"], doc["phase"], doc.get("variant", "default"))
    specs, layers = [], {}
    for entry in doc["layers"]:
        ls = LayerSpec(
            entry["name"], entry["branch"], int(entry["k"]), int(entry["in_ch"]), int(entry["out_ch"]),
            entry["activation"], float(entry.get("alpha", DEFAULT_LEAKY_ALPHA)),
        )
        specs.append(ls)
        wts = np.asarray(entry["weights"], dtype=np.float64)
        if wts.size != ls.out_ch * ls.in_ch * ls.k ** 2:
            raise ModelFormatError(f"layer {ls.name!r}: {wts.size} weights, expected {ls.out_ch * ls.in_ch * ls.k ** 2}")
        layers[ls.name] = ConvLayer(
            wts.reshape(ls.out_ch, ls.in_ch, ls.k, ls.k), entry["bias"], ls.activation, ls.alpha, ls.name
        )
    spec = NetworkSpec(sid, tuple(specs), float(doc["temperature"]), int(doc.get("logit_layer", -1)))
    return ModelWeights(spec, layers, doc.get("metadata", {}))


def dumps_model(w: ModelWeights) -> str:
    return json.dumps(model_to_dict(w), indent=1) + "\n"


def save_model(w: ModelWeights, path: str | Path) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, dumps_model(w))


def load_model(path: str | Path) -> ModelWeights:
    return model_from_dict(json.loads(Path(path).read_text()))
