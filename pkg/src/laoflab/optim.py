"""Adam optimizer and the finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from laoflab.autodiff import DTYPE, Tensor, backward, precision
from laoflab.errors import NumericError, ShapeError


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors.

    Parameters are updated in place. Parameters whose ``grad`` is None did not
    take part in the loss and are skipped, moments included. A step whose
    gradients contain NaN/Inf is rejected before any state is touched.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad
            if g is None:
                grads.append(None)
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {p.name!r}; step rejected")
            grads.append(g)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2**t) / (1 - b1**t)
        eps_t = self.eps * np.sqrt(1 - b2**t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # algebraically equal to lr * m_hat / (sqrt(v_hat) + eps)
            p.data -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(DTYPE)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.grad is not None)))

    def state_dict(self) -> dict:
        return {"m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v], "step_count": self.step_count}


def finite_difference_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    eps: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare autodiff gradients of scalar ``fn`` with central differences.

    ``fn`` receives a list of leaf tensors built from ``point`` and must return
    a scalar Tensor. The central difference is evaluated in float64 on the
    same function, so float32 rounding does not pollute the oracle. Returns
    max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over the
    checked coordinates. ``max_coords`` subsamples coordinates for large inputs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(point, np.ndarray)
    arrays = [np.asarray(point, dtype=DTYPE)] if single else [np.asarray(p, dtype=DTYPE) for p in point]
    wide = [a.astype(np.float64) for a in arrays]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(leaves)
    if out.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    if out.requires_grad:
        backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def value(arrs) -> float:
        with precision(np.float64):
            v = fn([Tensor(a) for a in arrs])
        if not np.isfinite(v.data).all():
            raise NumericError("function value is not finite near the check point")
        return float(v.data)

    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        plus = [a.copy() for a in wide]
        minus = [a.copy() for a in wide]
        plus[i].reshape(-1)[j] += eps
        minus[i].reshape(-1)[j] -= eps
        numeric = (value(plus) - value(minus)) / (2 * eps)
        a_ij = float(analytic[i].reshape(-1)[j])
        denom = max(abs(a_ij), abs(numeric), 1e-6)
        worst = max(worst, abs(a_ij - numeric) / denom)
    return worst
