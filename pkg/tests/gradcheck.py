"""Central finite-difference oracle for the analytic gradients (shared by tests)."""
from __future__ import annotations

import numpy as np

from chromapred.model import SchemeId, build_spec, init_weights
from chromapred.training import TrainConfig, backward, evaluate_loss
from conftest import TINY

STEP = 1e-6
ZERO_FLOOR = 1e-8  # blocks whose true gradient is identically zero


def make_problem(sid: SchemeId, n: int = 4, seed: int = 0, batch: int = 3):
    w = init_weights(build_spec(sid, TINY), seed)
    rng = np.random.default_rng(seed)
    for layer in w.layers.values():
        layer.bias[:] = rng.uniform(-0.1, 0.1, layer.bias.shape)
    # keep the prediction away from the clip boundaries so the loss is smooth
    w.layers[w.spec.branch("head")[-1].name].bias[:] = 0.5
    b = 4 * n + 1
    return w, (rng.random((batch, 1, n, n)), rng.random((batch, 3, b)), rng.random((batch, 2, n, n)))


def numeric_gradient(w, batch, cfg, arr):
    x0, s0, z = batch
    num = np.zeros_like(arr)
    flat, out = arr.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + STEP
        lp = evaluate_loss(w, x0, s0, z, cfg).total
        flat[i] = orig - STEP
        lm = evaluate_loss(w, x0, s0, z, cfg).total
        flat[i] = orig
        out[i] = (lp - lm) / (2 * STEP)
    return num


def gradient_errors(sid: SchemeId, cfg: TrainConfig | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per trainable block; structurally zero blocks report their absolute size."""
    cfg = cfg or TrainConfig(lambda_s=0.3)
    w, batch = make_problem(sid, seed=seed)
    _, grads = backward(w, batch, cfg)
    errors = {}
    for name, layer in w.layers.items():
        for label, arr, ga in (("weights", layer.weights, grads[name][0]), ("bias", layer.bias, grads[name][1])):
            gn = numeric_gradient(w, batch, cfg, arr)
            scale = max(np.linalg.norm(ga), np.linalg.norm(gn))
            if scale <= ZERO_FLOOR:
                errors[f"{name}.{label}"] = 0.0
            else:
                errors[f"{name}.{label}"] = float(np.linalg.norm(ga - gn) / scale)
    return errors
