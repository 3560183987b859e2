"""Sparse mixture-of-experts layer: gate, noisy top-K dispatch under a
per-expert capacity, intra-group and fill-in rectification, experts, and the
exp-score weighted combine with a straight-through backward pass."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .text import ASPECTS

INIT_STD = 0.02


@dataclass(frozen=True)
class GateConfig:
    n_experts: int = 6
    top_k: int = 3
    capacity_factor: float = 1.8
    noise_scale: float = 0.098323
    n_groups: int = 1
    intra_group_rectify: bool = True
    fill_in_rectify: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got K={self.top_k}, E={self.n_experts}")
        if self.capacity_factor <= 0:
            raise ValueError("capacity_factor must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")


@dataclass
class GateScores:
    logits: Tensor
    probs: Tensor

    @property
    def a(self) -> np.ndarray:
        return self.logits.values

    @property
    def g(self) -> np.ndarray:
        return self.probs.values


# --- gate -----------------------------------------------------------------------

@dataclass
class GateParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, n_experts: int, rng: np.random.Generator) -> GateParams:
        hidden = max(1, d_in // 2)
        return cls(
            ad.parameter(rng.normal(0.0, INIT_STD, (d_in, hidden))),
            ad.parameter(np.zeros((1, hidden))),
            ad.parameter(rng.normal(0.0, INIT_STD, (hidden, n_experts))),
            ad.parameter(np.zeros((1, n_experts))),
        )

    def named(self, prefix: str = "gate.") -> dict[str, Tensor]:
        return {prefix + k: getattr(self, k) for k in ("w1", "b1", "w2", "b2")}


def gate_logits(x: Tensor, params: GateParams) -> Tensor:
    if x.cols != params.w1.rows:
        raise DimensionError(f"gate expects width {params.w1.rows}, got input {x.shape}")
    h = ad.add_row(ad.matmul(x, params.w1), params.b1)
    return ad.add_row(ad.matmul(h, params.w2), params.b2)


def gate_forward(aspect_emb: Tensor, params: GateParams) -> GateScores:
    logits = gate_logits(aspect_emb, params)
    return GateScores(logits, ad.softmax_rows(logits))


def gumbel(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def add_gumbel_noise(logits: Tensor, scale: float, rng: np.random.Generator) -> Tensor:
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0.0:
        return logits
    return ad.add(logits, ad.constant(scale * gumbel(logits.shape, rng)))


# --- dispatch ---------------------------------------------------------------------

def capacity(config: GateConfig, batch: int) -> int:
    """Slots per expert for a group of ``batch`` tokens: ceil(cf * B * K / E)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    raw = config.capacity_factor * batch * config.top_k / config.n_experts
    return max(1, math.ceil(raw - 1e-9))


def group_bounds(n_tokens: int, n_groups: int) -> list[tuple[int, int]]:
    """Contiguous, near-equal token ranges; equal when n_groups divides n_tokens."""
    if n_groups > n_tokens:
        raise ValueError(f"{n_groups} groups for {n_tokens} tokens")
    edges = np.linspace(0, n_tokens, n_groups + 1).round().astype(int)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(n_groups)]


@dataclass
class RoutingPlan:
    n_tokens: int
    n_experts: int
    top_k: int
    groups: list[tuple[int, int]]
    capacities: list[int]
    ranking: np.ndarray
    routed: list[list[tuple[int, int]]]
    slots: list[list[list[int]]]
    dropped: list[tuple[int, int]] = field(default_factory=list)
    ir_reroutes: list[tuple[int, int, int]] = field(default_factory=list)
    ir_flagged: list[int] = field(default_factory=list)
    fr_fills: list[tuple[int, int, int]] = field(default_factory=list)

    def group_of(self, token: int) -> int:
        for k, (lo, hi) in enumerate(self.groups):
            if lo <= token < hi:
                return k
        raise IndexError(token)

    def pad_count(self, group: int, expert: int) -> int:
        return self.capacities[group] - len(self.slots[group][expert])

    def total_pad(self) -> int:
        return sum(self.pad_count(k, e) for k in range(len(self.groups)) for e in range(self.n_experts))

    def occupancy(self) -> np.ndarray:
        """Filled slots per expert, summed over groups."""
        return np.array([sum(len(self.slots[k][e]) for k in range(len(self.groups))) for e in range(self.n_experts)])

    def contributions(self) -> list[list[tuple[int, int]]]:
        """Per token: (expert, multiplicity) pairs that enter the combine."""
        out: list[list[tuple[int, int]]] = [[(e, 1) for e, _ in r] for r in self.routed]
        for t, h, mult in self.ir_reroutes:
            out[t].append((h, mult))
        for t, e, _ in self.fr_fills:
            out[t].append((e, 1))
        return out

    def tokens_of(self, expert: int) -> list[int]:
        return sorted(t for k in range(len(self.groups)) for t in self.slots[k][expert])

    def copy(self) -> RoutingPlan:
        return RoutingPlan(
            self.n_tokens,
            self.n_experts,
            self.top_k,
            list(self.groups),
            list(self.capacities),
            self.ranking.copy(),
            [list(r) for r in self.routed],
            [[list(s) for s in grp] for grp in self.slots],
            list(self.dropped),
            list(self.ir_reroutes),
            list(self.ir_flagged),
            list(self.fr_fills),
        )


def _as_arrays(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, GateScores):
        return scores.a, scores.g
    a, g = scores
    return np.asarray(a, dtype=float), np.asarray(g, dtype=float)


def topk_dispatch(scores, config: GateConfig) -> RoutingPlan:
    """Top-K selection per token, then per-expert admission by descending
    gate probability (ties to the lower token index) up to capacity."""
    _, g = _as_arrays(scores)
    n, n_exp = g.shape
    if n_exp != config.n_experts:
        raise DimensionError(f"scores have {n_exp} experts, config says {config.n_experts}")
    k = config.top_k
    ranking = np.argsort(-g, axis=1, kind="stable")
    groups = group_bounds(n, config.n_groups)
    caps = [capacity(config, hi - lo) for lo, hi in groups]
    routed: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    slots: list[list[list[int]]] = []
    for (lo, hi), cap in zip(groups, caps):
        per_expert = []
        for e in range(n_exp):
            rank_of = {t: int(np.flatnonzero(ranking[t, :k] == e)[0]) for t in range(lo, hi) if e in ranking[t, :k]}
            admitted = sorted(rank_of, key=lambda t: (-g[t, e], t))[:cap]
            for t in admitted:
                routed[t].append((e, rank_of[t]))
            per_expert.append(admitted)
        slots.append(per_expert)
    for r in routed:
        r.sort(key=lambda er: er[1])
    dropped = [(t, k - len(routed[t])) for t in range(n) if len(routed[t]) < k]
    return RoutingPlan(n, n_exp, k, groups, caps, ranking, routed, slots, dropped)


def intra_group_rectify(plan: RoutingPlan, scores, config: GateConfig | None = None) -> RoutingPlan:
    """Send each dropped token, once, to its highest-logit expert in the same
    group that still has a free slot and is not already in its routed set.
    The reroute carries the token's missing multiplicity into the combine."""
    a, _ = _as_arrays(scores)
    out = plan.copy()
    still_dropped = []
    for t, missing in plan.dropped:
        grp = out.group_of(t)
        have = {e for e, _ in out.routed[t]}
        free = [e for e in range(out.n_experts) if e not in have and out.pad_count(grp, e) > 0]
        if not free:
            out.ir_flagged.append(t)
            still_dropped.append((t, missing))
            continue
        h = max(free, key=lambda e: (a[t, e], -e))
        out.slots[grp][h].append(t)
        out.ir_reroutes.append((t, h, missing))
    out.dropped = still_dropped
    return out


def fill_in_rectify(plan: RoutingPlan, scores, config: GateConfig | None = None) -> RoutingPlan:
    """Fill PAD slots of each expert with tokens that rank it (K+1)-th,
    highest logit first."""
    a, _ = _as_arrays(scores)
    out = plan.copy()
    k = out.top_k
    if k >= out.n_experts:
        return out
    for grp, (lo, hi) in enumerate(out.groups):
        for e in range(out.n_experts):
            free = out.pad_count(grp, e)
            if free <= 0:
                continue
            taken = set(out.slots[grp][e])
            cands = [t for t in range(lo, hi) if out.ranking[t, k] == e and t not in taken]
            cands.sort(key=lambda t: (-a[t, e], t))
            for t in cands[:free]:
                out.slots[grp][e].append(t)
                out.fr_fills.append((t, e, k + 1))
    return out


def route(scores, config: GateConfig) -> RoutingPlan:
    plan = topk_dispatch(scores, config)
    if config.intra_group_rectify:
        plan = intra_group_rectify(plan, scores, config)
    if config.fill_in_rectify:
        plan = fill_in_rectify(plan, scores, config)
    return plan


def hard_gate_route(aspect: str) -> int:
    """Fixed aspect -> expert bijection in declaration order."""
    try:
        return ASPECTS.index(aspect)
    except ValueError:
        raise ValueError(f"unknown aspect {aspect!r}") from None


def hard_gate_plan(aspects: Sequence[str], n_experts: int = 6) -> RoutingPlan:
    if n_experts < len(ASPECTS):
        raise ValueError("hard gate needs one expert per aspect")
    n = len(aspects)
    ranking = np.zeros((n, n_experts), dtype=int)
    slots: list[list[int]] = [[] for _ in range(n_experts)]
    routed = []
    for t, asp in enumerate(aspects):
        e = hard_gate_route(asp)
        ranking[t] = [e] + [x for x in range(n_experts) if x != e]
        slots[e].append(t)
        routed.append([(e, 0)])
    return RoutingPlan(n, n_experts, 1, [(0, n)], [n], ranking, routed, [slots])


# --- experts ----------------------------------------------------------------------

@dataclass
class Expert:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        if x.cols != self.w1.rows:
            raise DimensionError(f"expert expects width {self.w1.rows}, got input {x.shape}")
        h = ad.relu(ad.add_row(ad.matmul(x, self.w1), self.b1))
        return ad.add_row(ad.matmul(h, self.w2), self.b2)


@dataclass
class ExpertStack:
    experts: list[Expert]

    @classmethod
    def init(cls, n_experts: int, d_in: int, hidden: int, rng: np.random.Generator, n_out: int = 3) -> ExpertStack:
        return cls(
            [
                Expert(
                    ad.parameter(rng.normal(0.0, INIT_STD, (d_in, hidden))),
                    ad.parameter(np.zeros((1, hidden))),
                    ad.parameter(rng.normal(0.0, INIT_STD, (hidden, n_out))),
                    ad.parameter(np.zeros((1, n_out))),
                )
                for _ in range(n_experts)
            ]
        )

    def __len__(self) -> int:
        return len(self.experts)

    def named(self, prefix: str = "experts.") -> dict[str, Tensor]:
        out = {}
        for j, ex in enumerate(self.experts):
            for k in ("w1", "b1", "w2", "b2"):
                out[f"{prefix}{j}.{k}"] = getattr(ex, k)
        return out


def expert_forward(stack: ExpertStack, x: Tensor, plan: RoutingPlan | None = None) -> list[Tensor]:
    """Per-expert B x C outputs. With a plan, each expert runs only on the
    tokens that occupy its slots and the other rows are zero."""
    outs = []
    for e, ex in enumerate(stack.experts):
        if plan is None:
            outs.append(ex(x))
            continue
        idx = plan.tokens_of(e)
        if not idx:
            outs.append(ad.constant(np.zeros((x.rows, ex.b2.cols))))
            continue
        outs.append(ad.scatter_rows(ex(ad.gather_rows(x, idx)), idx, x.rows))
    return outs


# --- combine ----------------------------------------------------------------------

def combine_terms(plan: RoutingPlan, a: np.ndarray) -> tuple[list[list[tuple[int, float]]], np.ndarray, np.ndarray]:
    """Raw weights mult * exp(a - rowmax) per token, the row shifts, and denominators."""
    contrib = plan.contributions()
    shifts = np.zeros(plan.n_tokens)
    denom = np.zeros(plan.n_tokens)
    weights: list[list[tuple[int, float]]] = []
    for t, parts in enumerate(contrib):
        if not parts:
            weights.append([])
            continue
        shifts[t] = max(a[t, e] for e, _ in parts)
        w = [(e, m * math.exp(a[t, e] - shifts[t])) for e, m in parts]
        denom[t] = sum(x for _, x in w)
        weights.append(w)
    return weights, shifts, denom


def combine(
    plan: RoutingPlan,
    logits: Tensor,
    expert_outputs: Sequence[Tensor],
    frozen: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """o_i = sum_j m_ij e^{a_ij} E_j(x_i) / sum_j m_ij e^{a_ij}.

    Top-K experts have m = 1, the IR expert m = K - |R_i|, an FR fill m = 1.
    The backward pass treats the denominator as a constant. ``frozen``
    pins (row shift, denominator) to given values, which is how the
    finite-difference reference reproduces the same convention.
    Tokens with no participating expert get a zero output.
    """
    a = logits.values
    n = plan.n_tokens
    contrib = plan.contributions()
    if frozen is None:
        _, shifts, denom = combine_terms(plan, a)
    else:
        shifts, denom = frozen
    w = np.zeros((n, plan.n_experts))
    for t, parts in enumerate(contrib):
        for e, m in parts:
            w[t, e] += m * math.exp(a[t, e] - shifts[t]) / denom[t]
    outs = np.stack([o.values for o in expert_outputs])  # E x B x C
    value = np.einsum("be,ebc->bc", w, outs)

    def fn(g):
        logits._accumulate(w * np.einsum("ebc,bc->be", outs, g))
        for e, o in enumerate(expert_outputs):
            o._accumulate(w[:, e : e + 1] * g)

    return ad._node(value, (logits, *expert_outputs), "combine", fn)


def combine_weights(plan: RoutingPlan, a: np.ndarray) -> np.ndarray:
    """Normalized B x E combine weights (rows sum to 1 for routed tokens)."""
    weights, _, denom = combine_terms(plan, a)
    w = np.zeros((plan.n_tokens, plan.n_experts))
    for t, parts in enumerate(weights):
        for e, x in parts:
            w[t, e] += x / denom[t]
    return w


# --- utilization ------------------------------------------------------------------

@dataclass
class UtilizationVector:
    u: np.ndarray
    mode: str


def soft_utilization(probs: Iterable[np.ndarray]) -> UtilizationVector:
    """Mean gate probability per expert over every token of every batch."""
    stacked = np.vstack([np.atleast_2d(p) for p in probs])
    return UtilizationVector(stacked.mean(axis=0), "soft")


def hard_utilization(plans: Iterable[RoutingPlan]) -> UtilizationVector:
    counts = None
    for p in plans:
        occ = p.occupancy().astype(float)
        counts = occ if counts is None else counts + occ
    if counts is None or counts.sum() == 0:
        raise ValueError("no routed tokens in window")
    return UtilizationVector(counts / counts.sum(), "hard")


def utilization(items, mode: str = "soft") -> UtilizationVector:
    items = list(items)
    if not items:
        raise ValueError("window must contain at least one batch")
    if mode == "soft":
        return soft_utilization(i.g if isinstance(i, GateScores) else i for i in items)
    if mode == "hard":
        return hard_utilization(items)
    raise ValueError(f"unknown utilization mode {mode!r}")


# --- the assembled layer ----------------------------------------------------------

@dataclass
class MoEOutput:
    logits: Tensor
    scores: GateScores
    plan: RoutingPlan


class MoELayer:
    """Gate over a routing input, experts over the token input."""

    def __init__(self, d_token: int, d_gate: int, config: GateConfig, hidden: int = 256, n_out: int = 3, seed: int = 0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.config = config
        self.gate = GateParams.init(d_gate, config.n_experts, rng)
        self.experts = ExpertStack.init(config.n_experts, d_token, hidden, rng, n_out)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.gate.named(), **self.experts.named()}

    def __call__(self, x: Tensor, gate_in: Tensor, train: bool = False, rng: np.random.Generator | None = None, plan: RoutingPlan | None = None) -> MoEOutput:
        logits = gate_logits(gate_in, self.gate)
        if train and self.config.noise_scale > 0:
            if rng is None:
                raise ValueError("training mode with noise needs an rng")
            logits = add_gumbel_noise(logits, self.config.noise_scale, rng)
        scores = GateScores(logits, ad.softmax_rows(logits))
        if plan is None:
            plan = route(scores, self.config)
        outs = expert_forward(self.experts, x, plan)
        return MoEOutput(combine(plan, logits, outs), scores, plan)
