"""Training objective: cross-entropy plus the two load-balancing regularizers,
and the squared coefficient of variation used to report routing balance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

LAMBDA_AUX = 0.011822
PROB_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_aux: float = LAMBDA_AUX
    lambda_mse: float = LAMBDA_AUX
    enable_aux: bool = True
    enable_mse: bool = True

    def __post_init__(self) -> None:
        if self.lambda_aux < 0 or self.lambda_mse < 0:
            raise ValueError("loss weights must be >= 0")


def cce(pred_probs: Tensor, labels: Tensor | np.ndarray) -> Tensor:
    """Mean categorical cross-entropy with probabilities floored at 1e-12."""
    y = labels if isinstance(labels, Tensor) else ad.constant(labels)
    if pred_probs.shape != y.shape:
        raise DimensionError(f"cce: predictions {pred_probs.shape} vs labels {y.shape}")
    n = pred_probs.rows
    return ad.scale(ad.sum_all(ad.mul(ad.log(pred_probs, floor=PROB_FLOOR), y)), -1.0 / n)


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over labels, mean over rows."""
    y = ad.constant(targets)
    one_minus_p = ad.add_row(ad.scale(probs, -1.0), ad.constant(np.ones((1, probs.cols))))
    ll = ad.add(
        ad.mul(ad.log(probs, floor=PROB_FLOOR), y),
        ad.mul(ad.log(one_minus_p, floor=PROB_FLOOR), ad.constant(1.0 - targets)),
    )
    return ad.scale(ad.sum_all(ll), -1.0 / probs.rows)


def _as_tensor(u) -> Tensor:
    if isinstance(u, Tensor):
        return u
    return ad.constant(np.asarray(getattr(u, "u", u), dtype=float).reshape(1, -1))


def cov2_tensor(u) -> Tensor:
    """Population variance over squared mean, differentiable in u."""
    t = _as_tensor(u)
    v = t.values.reshape(-1)
    n = v.size
    mean = v.mean()
    if mean == 0.0:
        raise DegenerateInputError("utilization vector has zero mean")
    var = ((v - mean) ** 2).mean()

    def fn(g):
        d_var = 2.0 * (v - mean) / n
        grad = d_var / mean**2 - 2.0 * var / mean**3 / n
        t._accumulate(g[0, 0] * grad.reshape(t.shape))

    return ad._node(np.array([[var / mean**2]]), (t,), "cov2", fn)


def cov2(u) -> float:
    v = np.asarray(getattr(u, "u", u), dtype=float).reshape(-1)
    if np.any(v < 0):
        raise ValueError("utilization must be nonnegative")
    return cov2_tensor(v).item()


def aux_importance(u, lambda_aux: float = LAMBDA_AUX) -> Tensor:
    """lambda_aux * Var(u) / Mean(u)^2."""
    v = _as_tensor(u).values
    if np.any(v < 0):
        raise ValueError("utilization must be nonnegative")
    if not np.any(v):
        raise DegenerateInputError("all-zero utilization")
    return ad.scale(cov2_tensor(u), lambda_aux)


def mse_uniform(u, lambda_mse: float = LAMBDA_AUX) -> Tensor:
    """lambda_mse * mean_e (u_e - 1/E)^2."""
    t = _as_tensor(u)
    v = t.values
    n = v.size
    diff = v - 1.0 / n

    def fn(g):
        t._accumulate(g[0, 0] * lambda_mse * 2.0 * diff / n)

    return ad._node(np.array([[lambda_mse * float((diff**2).mean())]]), (t,), "mse_uniform", fn)


def total_loss(ce: Tensor, aux: Tensor | None, mse: Tensor | None, weights: LossWeights) -> Tensor:
    """ce + aux + mse. The lambdas already live inside aux and mse."""
    terms = [ce]
    if weights.enable_aux and aux is not None:
        terms.append(aux)
    if weights.enable_mse and mse is not None:
        terms.append(mse)
    return ad.add_scalars(*terms) if len(terms) > 1 else ce
