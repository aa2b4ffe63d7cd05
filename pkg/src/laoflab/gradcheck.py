"""Finite-difference gradient suite over every autodiff op and every model head.

Each case draws a random point, composes the op (or head) with an mse against a
random target so the upstream gradient is non-uniform, and compares analytic
and central-difference gradients with ``finite_difference_check``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np

from laoflab import autodiff as ad
from laoflab.autodiff import Tensor
from laoflab.models import LamModel, quantize
from laoflab.nn import Module
from laoflab.optim import finite_difference_check
from laoflab.training import pretrain_losses

Case = tuple[Callable[[list[Tensor]], Tensor], list[np.ndarray]]
KINK_MARGIN = 0.05


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(n) for n in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < KINK_MARGIN, x + np.where(x < 0, -KINK_MARGIN, KINK_MARGIN), x)


def _op_case(op: str, rng: np.random.Generator) -> Case:
    target_seed = int(rng.integers(1 << 32))

    def readout(out):
        # same random target on every evaluation of this case
        return ad.mse(out, Tensor(np.random.default_rng(target_seed).normal(size=out.shape)))

    if op == "matmul":
        n, k, m = _shape(rng, 3)
        return (lambda t: readout(ad.matmul(t[0], t[1]))), [rng.normal(size=(n, k)), rng.normal(size=(k, m))]
    if op == "add":
        s = _shape(rng)
        other = s if rng.uniform() < 0.5 else (s[1],)  # plain and broadcast
        return (lambda t: readout(ad.add(t[0], t[1]))), [rng.normal(size=s), rng.normal(size=other)]
    if op == "sub":
        s = _shape(rng)
        other = s if rng.uniform() < 0.5 else (1, s[1])
        return (lambda t: readout(ad.sub(t[0], t[1]))), [rng.normal(size=s), rng.normal(size=other)]
    if op == "scale":
        c = float(rng.normal() * 2)
        return (lambda t: readout(ad.scale(t[0], c))), [rng.normal(size=_shape(rng))]
    if op == "relu":
        return (lambda t: readout(ad.relu(t[0]))), [_away_from_zero(rng.normal(size=_shape(rng)))]
    if op == "tanh":
        return (lambda t: readout(ad.tanh(t[0]))), [rng.normal(size=_shape(rng))]
    if op == "concat":
        n = int(rng.integers(1, 4))
        axis = int(rng.integers(0, 2))
        shapes = []
        for _ in range(int(rng.integers(2, 4))):
            w = int(rng.integers(1, 4))
            shapes.append((n, w) if axis == 1 else (w, n))
        return (lambda t: readout(ad.concat(t, axis=axis))), [rng.normal(size=s) for s in shapes]
    if op == "slice":
        s = _shape(rng, lo=2)
        if rng.uniform() < 0.5:
            idx = (slice(0, int(rng.integers(1, s[0] + 1))), slice(None, None, 2))
        else:
            idx = rng.integers(0, s[0], size=int(rng.integers(1, 5)))
        return (lambda t: readout(ad.slice_(t[0], idx))), [rng.normal(size=s)]
    if op == "mean":
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return (lambda t: readout(ad.mean(t[0], axis=axis))), [rng.normal(size=_shape(rng))]
    if op == "sum":
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return (lambda t: readout(ad.sum_(t[0], axis=axis))), [rng.normal(size=_shape(rng))]
    if op == "mse":
        s = _shape(rng)
        return (lambda t: ad.mse(t[0], t[1])), [rng.normal(size=s), rng.normal(size=s)]
    if op == "softmax_cross_entropy":
        n, c = _shape(rng, 2, 1, 5)
        labels = rng.integers(0, c, size=n)
        return (lambda t: ad.softmax_cross_entropy(t[0], labels)), [rng.normal(size=(n, c)) * 2]
    if op == "l2_norm":
        return (lambda t: ad.scale(ad.l2_norm(t[0]), 1.7)), [rng.normal(size=_shape(rng)) + 0.1]
    raise KeyError(op)


OPS = ("matmul", "add", "sub", "scale", "relu", "tanh", "concat", "slice", "mean", "sum", "mse",
       "softmax_cross_entropy", "l2_norm")


@contextlib.contextmanager
def swapped(module: Module, names: list[str], tensors: list[Tensor]) -> Iterator[None]:
    """Temporarily replace named parameters of ``module`` with the given tensors."""
    saved = []
    for name, t in zip(names, tensors):
        *path, attr = name.split(".")
        owner = module
        for part in path:
            owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
        saved.append((owner, attr, getattr(owner, attr)))
        setattr(owner, attr, t)
    try:
        yield
    finally:
        for owner, attr, old in reversed(saved):
            setattr(owner, attr, old)


HEADS = ("idm", "idm_diff", "fdm", "fdm_dual", "flow_decoder_z", "flow_decoder_zs", "flow_autoencoder",
         "action_decoder", "finetune_decoder", "policy", "quantizer", "pretrain_loss", "mixed_loss")

_HEAD_VARIANT = {
    "idm": "LAPO", "idm_diff": "CoMo", "fdm": "LAPO", "fdm_dual": "LAOF-FlowFDM", "flow_decoder_z": "LAOF",
    "flow_decoder_zs": "LAOF-OnlyZS", "flow_autoencoder": "LAOF-AE", "action_decoder": "LAOF-Action",
    "finetune_decoder": "LAOF", "policy": "LAOF", "quantizer": "LAOF", "pretrain_loss": None,
    "mixed_loss": "LAOF-Action",
}
_LOSS_VARIANTS = ("LAPO", "CoMo", "CoMo-OF", "LAOF", "LAOF-FlowFDM", "LAOF-OnlyZ", "LAOF-OnlyZS", "LAOF-AE")


def _head_case(head: str, rng: np.random.Generator, max_params: int = 6) -> tuple[Case, LamModel]:
    d, k, h, b = 6, 3, 5, 4
    variant = _HEAD_VARIANT[head] or _LOSS_VARIANTS[int(rng.integers(len(_LOSS_VARIANTS)))]
    model = LamModel(variant, "continuous", d, 5, True, latent_dim=k, n_tasks=3, hidden=h,
                     task_dim=4, seed=int(rng.integers(1 << 31)))
    s, s2, f, z = (rng.normal(size=(b, d)) * 0.5, rng.normal(size=(b, d)) * 0.5,
                   rng.normal(size=(b, d)) * 0.5, rng.normal(size=(b, k)))
    tgt = rng.normal(size=(b, d))
    tgt_k = rng.normal(size=(b, k))
    labels = rng.integers(0, 5, size=b)
    tasks = rng.integers(0, 3, size=b)

    groups = {
        "idm": ["idm"], "idm_diff": ["idm"], "fdm": ["fdm"], "fdm_dual": ["fdm"],
        "flow_decoder_z": ["flow_decoder"], "flow_decoder_zs": ["flow_decoder"], "flow_autoencoder": ["idm"],
        "action_decoder": ["action_decoder"], "finetune_decoder": ["finetune_decoder"],
        "policy": ["policy", "task_embedding"], "pretrain_loss": None, "mixed_loss": None,
    }[head]
    named = dict(model.named_parameters())
    if groups is None:
        pool = [n for n in named if n.split(".")[0] in ("idm", "fdm", "flow_decoder", "action_decoder")]
    else:
        pool = [n for n in named if n.split(".")[0] in groups]
    pick = sorted(rng.choice(len(pool), size=min(max_params, len(pool)), replace=False))
    pnames = [pool[i] for i in pick]
    pvals = [named[n].data.astype(np.float64) for n in pnames]

    def run(inputs, params):
        with swapped(model, pnames, params):
            if head in ("idm", "idm_diff"):
                return ad.mse(model.idm_forward(inputs[0], inputs[1]).z, Tensor(tgt_k))
            if head == "fdm":
                return ad.mse(model.fdm_forward(inputs[0], inputs[1]), Tensor(tgt))
            if head == "fdm_dual":
                s_hat, f_hat = model.fdm_forward(inputs[0], inputs[1])
                return ad.add(ad.mse(s_hat, Tensor(tgt)), ad.mse(f_hat, Tensor(tgt[::-1].copy())))
            if head == "flow_decoder_z":
                return ad.mse(model.flow_decode(inputs[1]), Tensor(tgt))
            if head == "flow_decoder_zs":
                return ad.mse(model.flow_decode(inputs[1], inputs[0]), Tensor(tgt))
            if head == "flow_autoencoder":
                return ad.mse(model.encode_flow(inputs[0]).z, Tensor(tgt_k))
            if head == "action_decoder":
                return ad.softmax_cross_entropy(model.action_decode(inputs[1], stage="pretrain"), labels)
            if head == "finetune_decoder":
                return ad.softmax_cross_entropy(model.action_decode(inputs[1]), labels)
            if head == "policy":
                return ad.mse(model.policy_forward(inputs[0], tasks), Tensor(tgt_k))
            # the loss wraps raw batch arrays itself, so only parameters are leaves here
            batch = {"s_t": s, "s_next": s2, "f_t": f, "actions": labels}
            if head == "mixed_loss":
                return pretrain_losses(model, batch, flow_weight=1 - lam, action_weight=lam)["total"]
            return pretrain_losses(model, batch)["total"]

    lam = float(rng.uniform())
    if head in ("fdm", "flow_decoder_z", "flow_decoder_zs", "action_decoder", "finetune_decoder"):
        inputs = [s, z]
    elif head in ("pretrain_loss", "mixed_loss"):
        inputs = []
    elif head == "flow_autoencoder":
        inputs = [f]
    elif head == "fdm_dual":
        inputs = [s, z]
    elif head == "policy":
        inputs = [s]
    else:
        inputs = [s, s2]
    n_in = len(inputs)

    def fn(ts):
        return run(ts[:n_in], ts[n_in:])

    return (fn, inputs + pvals), model


def _quantizer_cases(rng: np.random.Generator) -> list[Case]:
    """Codebook loss w.r.t. the codebook and commitment loss w.r.t. z, at a point
    whose nearest-code assignment is stable under the finite-difference step.

    Each loss stops the gradient to the other argument, so that argument is held
    constant rather than perturbed.
    """
    while True:
        cb = rng.normal(size=(int(rng.integers(2, 8)), 3))
        z = rng.normal(size=(4, 3))
        d = ((z[:, None, :] - cb[None]) ** 2).sum(-1)
        srt = np.sort(d, axis=1)
        if (srt[:, 1] - srt[:, 0]).min() > 0.1:
            break
    beta = float(rng.uniform(0.1, 1.0))
    codebook = (lambda t: quantize(Tensor(z), t[0], beta).codebook_loss), [cb]
    commitment = (lambda t: quantize(t[0], Tensor(cb), beta).commitment_loss), [z]
    return [codebook, commitment]


def check_op(op: str, n_cases: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, OPS.index(op)])
    worst = 0.0
    for _ in range(n_cases):
        fn, point = _op_case(op, rng)
        worst = max(worst, finite_difference_check(fn, point))
    return worst


def check_head(head: str, n_cases: int = 100, seed: int = 0, max_coords: int = 24) -> float:
    rng = np.random.default_rng([seed, 100 + HEADS.index(head)])
    worst = 0.0
    for _ in range(n_cases):
        cases = _quantizer_cases(rng) if head == "quantizer" else [_head_case(head, rng)[0]]
        for fn, point in cases:
            worst = max(worst, finite_difference_check(fn, point, max_coords=max_coords, rng=rng))
    return worst


def straight_through_contract(n_cases: int = 100, seed: int = 0) -> float:
    """Max deviation between d loss/d z (through the quantizer) and d loss/d z_q."""
    rng = np.random.default_rng([seed, 999])
    worst = 0.0
    for _ in range(n_cases):
        z = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        cb = Tensor(rng.normal(size=(8, 3)))
        tgt = rng.normal(size=(5, 3))
        q = quantize(z, cb)
        ad.backward(ad.mse(q.z_q, Tensor(tgt)))
        expected = 2.0 * (q.z_q.data - tgt) / q.z_q.size
        worst = max(worst, float(np.abs(z.grad - expected).max()))
    return worst


def run_suite(n_cases: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op and per head (plus the straight-through contract residual)."""
    out = {f"op:{op}": check_op(op, n_cases, seed) for op in OPS}
    out.update({f"head:{h}": check_head(h, n_cases, seed) for h in HEADS})
    out["contract:straight_through"] = straight_through_contract(n_cases, seed)
    return out
