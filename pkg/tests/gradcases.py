"""Random differentiable graphs for finite-difference checks."""
from __future__ import annotations

import numpy as np

from moe_absa import autodiff as ad
from moe_absa.losses import aux_importance, cce, mse_uniform
from moe_absa.moe import GateConfig, MoELayer, combine, combine_terms, expert_forward, gate_logits, route

from oracles import canonical_plan


class Boundary(Exception):
    """Routing changed under perturbation; the point is on a Top-K boundary."""


def plain_case(rng: np.random.Generator):
    """A small random network drawn from a menu of ops; returns (build, params)."""
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    h = int(rng.integers(2, 6))
    x = ad.constant(rng.normal(size=(n, d)))
    params = {"w1": ad.parameter(rng.normal(size=(d, h))), "b1": ad.parameter(rng.normal(size=(1, h)))}
    params["w2"] = ad.parameter(rng.normal(size=(h, 3)))
    act = ("relu", "sigmoid", "exp")[int(rng.integers(3))]
    head = ("cce", "mse", "bce", "gather")[int(rng.integers(4))]
    y = np.eye(3)[rng.integers(0, 3, n)]
    idx = rng.integers(0, n, n + 1).tolist()

    def build():
        z = ad.add_row(ad.matmul(x, params["w1"]), params["b1"])
        if act == "exp":
            z = ad.exp(ad.scale(z, 0.3))
        else:
            z = getattr(ad, act)(z)
        out = ad.matmul(z, params["w2"])
        if head == "cce":
            return cce(ad.softmax_rows(out), y)
        if head == "mse":
            d = ad.sub(out, ad.constant(y))
            return ad.mean_all(ad.mul(d, d))
        if head == "bce":
            p = ad.sigmoid(out)
            return ad.scale(ad.sum_all(ad.mul(ad.log(p, 1e-12), ad.constant(y))), -1.0)
        g = ad.gather_rows(ad.softmax_rows(out), idx)
        c = ad.concat_cols(g, ad.scale(g, 2.0))
        return ad.mean_all(ad.mul(c, c))

    return build, params


def moe_case(rng: np.random.Generator, with_balance: bool = True):
    """MoE layer at a random point with IR and FR active.

    The reference holds the routing plan and the combine denominators fixed
    at their base values, which is the straight-through convention.
    Raises Boundary if a parameter perturbation would alter the plan.
    """
    n_exp = int(rng.integers(3, 6))
    k = int(rng.integers(1, n_exp))
    config = GateConfig(n_experts=n_exp, top_k=k, capacity_factor=float(rng.choice([0.6, 1.0, 1.8])), noise_scale=0.0)
    n, d = 6, 4
    layer = MoELayer(d, d, config, hidden=3, n_out=3, rng=rng)
    for p in layer.parameters().values():
        p.values[...] = rng.normal(0.0, 0.7, p.values.shape)
    x = ad.constant(rng.normal(size=(n, d)))
    gin = ad.constant(rng.normal(size=(n, d)))
    y = np.eye(3)[rng.integers(0, 3, n)]
    params = layer.parameters()

    base_logits = gate_logits(gin, layer.gate)
    base_scores = (base_logits.values, _softmax(base_logits.values))
    plan = route(base_scores, config)
    _, shifts, denom = combine_terms(plan, base_logits.values)
    base_form = canonical_plan(plan)
    sorted_a = np.sort(base_logits.values, axis=1)
    if np.diff(sorted_a, axis=1).min() < 1e-4:
        raise Boundary("near tie in gate logits")

    def build():
        logits = gate_logits(gin, layer.gate)
        if canonical_plan(route((logits.values, _softmax(logits.values)), config)) != base_form:
            raise Boundary("plan moved")
        outs = expert_forward(layer.experts, x, plan)
        o = combine(plan, logits, outs, frozen=(shifts, denom))
        loss = cce(ad.softmax_rows(o), y)
        if with_balance:
            u = ad.mean_rows(ad.softmax_rows(logits))
            loss = ad.add_scalars(loss, aux_importance(u, 0.3), mse_uniform(u, 0.7))
        return loss

    # analytic gradients come from the live (unfrozen) graph
    def live():
        logits = gate_logits(gin, layer.gate)
        outs = expert_forward(layer.experts, x, plan)
        o = combine(plan, logits, outs)
        loss = cce(ad.softmax_rows(o), y)
        if with_balance:
            u = ad.mean_rows(ad.softmax_rows(logits))
            loss = ad.add_scalars(loss, aux_importance(u, 0.3), mse_uniform(u, 0.7))
        return loss

    for p in params.values():
        p.zero_grad()
    ad.backward(live())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values)) for name, p in params.items()}
    return build, params, analytic, plan


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
