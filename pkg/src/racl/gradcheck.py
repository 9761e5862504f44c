"""Finite-difference gradient checks for the aggregation + head + RACL pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from racl import features, losses, model
from racl.audio import Provenance
from racl.losses import RaclWeights

COMPONENTS = ("cls", "std", "enh", "reg", "total")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both gradients vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f, params: dict[str, np.ndarray], h: float = 1e-4) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(params)
            flat[i] = orig - h
            minus = f(params)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        grads[name] = g
    return grads


def component_value_and_grads(params, stacks, provenance, weights: RaclWeights, component: str):
    """Scalar value of one loss component and its gradient w.r.t. every trainable parameter."""
    head = {k: v for k, v in params.items() if k != "kernel"}
    agg, _, state = features.aggregate(stacks, params["kernel"])
    logits, emb, tape = model.forward(agg, head)
    prov = [Provenance(p) for p in provenance]
    labels = np.array([p.binary() for p in prov])
    g_logits = np.zeros_like(logits)
    g_emb = np.zeros_like(emb)
    if component == "cls":
        value, g_logits = losses.weighted_ce(logits, labels, weights.class_weights)
    elif component == "std":
        value, g_emb = losses.pair_loss(emb, losses.make_pairs_std(labels), weights.margin)
    elif component == "enh":
        value, g_emb = losses.pair_loss(emb, losses.make_pairs_enh(prov), weights.margin)
    elif component == "reg":
        bona = labels == 0
        vb, gb = losses.variance_reg(emb[bona], weights.delta)
        vs, gs = losses.variance_reg(emb[~bona], weights.delta)
        value = vb + vs
        g_emb[bona], g_emb[~bona] = gb, gs
    elif component == "total":
        br = losses.racl_total(emb, logits, prov, weights)
        value, g_logits, g_emb = br.total, br.grad_logits, br.grad_embedding
    else:
        raise ValueError(f"unknown loss component {component!r}")
    grads, g_agg = model.backward(tape, head, g_logits, g_emb)
    grads["kernel"], _ = features.aggregate_backward(stacks, state, g_agg)
    return float(value), grads


@dataclass(frozen=True)
class ToyShape:
    batch: int = 8
    layers: int = 4
    frames: int = 6
    dim: int = 5
    hidden: int = 6
    embed: int = 4
    kernel: int = 3


def random_problem(rng: np.random.Generator, shape: ToyShape = ToyShape()):
    """Random parameters, feature stacks and a batch containing every provenance class."""
    params = {"kernel": rng.uniform(-1, 1, shape.kernel)}
    params.update(model.init_head(shape.dim, shape.hidden, shape.embed, rng))
    for k in ("att_b", "b1", "b2", "b3"):
        params[k] = rng.normal(0, 0.1, params[k].shape)
    stacks = rng.normal(0, 1, (shape.batch, shape.layers, shape.frames, shape.dim))
    base = list(Provenance)
    prov = base + [base[int(i)] for i in rng.integers(0, 4, shape.batch - 4)]
    prov = [prov[int(i)] for i in rng.permutation(shape.batch)]
    return params, stacks, prov


def check_batch(rng: np.random.Generator, weights: RaclWeights = RaclWeights(),
                components=COMPONENTS, h: float = 1e-4) -> dict[str, float]:
    """Worst per-tensor relative error for each component on one random batch."""
    params, stacks, prov = random_problem(rng)
    worst = {}
    for comp in components:
        _, analytic = component_value_and_grads(params, stacks, prov, weights, comp)
        numeric = numeric_grad(
            lambda p: component_value_and_grads(p, stacks, prov, weights, comp)[0], params, h
        )
        worst[comp] = max(relative_error(analytic[k], numeric[k]) for k in params)
    return worst


def check_stack_gradient(rng: np.random.Generator, h: float = 1e-4) -> float:
    """Gradient of a random linear functional of the aggregate w.r.t. the layer stack."""
    stack = rng.normal(0, 1, (5, 4, 3))
    kernel = rng.uniform(-1, 1, 3)
    probe = rng.normal(0, 1, (4, 3))

    def f(s):
        agg, _, _ = features.aggregate(s, kernel)
        return float(np.sum(agg * probe))

    _, _, state = features.aggregate(stack, kernel)
    _, analytic = features.aggregate_backward(stack, state, probe, need_stack_grad=True)
    numeric = numeric_grad(lambda p: f(p["s"]), {"s": stack.copy()}, h)["s"]
    return relative_error(analytic, numeric)


def check_head_input_gradient(rng: np.random.Generator, h: float = 1e-4) -> float:
    params = model.init_head(5, 6, 4, rng)
    x = rng.normal(0, 1, (3, 6, 5))
    gl = rng.normal(0, 1, (3, 2))
    ge = rng.normal(0, 1, (3, 4))

    def f(inp):
        logits, emb, _ = model.forward(inp, params)
        return float(np.sum(logits * gl) + np.sum(emb * ge))

    _, _, tape = model.forward(x, params)
    _, analytic = model.backward(tape, params, gl, ge)
    numeric = numeric_grad(lambda p: f(p["x"]), {"x": x.copy()}, h)["x"]
    return relative_error(analytic, numeric)
