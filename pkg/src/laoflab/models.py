"""Latent action model zoo: frozen patch encoder, IDM, FDM, flow/action decoders,
latent policy and the optional vector quantizer.

Which networks a model owns depends on its variant; see ``WIRING``.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np

from laoflab import autodiff as ad
from laoflab.autodiff import Tensor
from laoflab.errors import ShapeError, UsageError
from laoflab.nn import MLP, Linear, Module


@dataclasses.dataclass(frozen=True)
class Wiring:
    idm_input: str  # "pair": (s_t, s_t+1), "diff": (s_t, s_t+1 - s_t), "flow": f_t (autoencoder)
    fdm: str | None  # None, "plain" or "dual" (extra flow head)
    flow_decoder: str | None  # None, "z", "zs" or "fdm" (served by the dual FDM head)
    action_decoder: bool


WIRING: dict[str, Wiring] = {
    "LAPO": Wiring("pair", "plain", None, False),
    "CoMo": Wiring("diff", "plain", None, False),
    "CoMo-OF": Wiring("diff", "plain", "z", False),
    "LAOF": Wiring("pair", "plain", "z", False),
    "LAOF-Action": Wiring("pair", "plain", "z", True),
    "LAOM-Action": Wiring("pair", "plain", None, True),
    "LAOF-FlowFDM": Wiring("pair", "dual", "fdm", False),
    "LAOF-OnlyZ": Wiring("pair", None, "z", False),
    "LAOF-OnlyZS": Wiring("pair", None, "zs", False),
    "LAOF-AE": Wiring("flow", None, "z", False),
}
VARIANTS = tuple(WIRING)
ACTION_SUPERVISED = ("LAOF-Action", "LAOM-Action")
COMPONENTS = ("IDM", "FDM", "flow decoder", "action decoder")


def wiring_table() -> dict[str, dict[str, bool]]:
    """Presence of each pre-training component per variant."""
    return {
        name: {
            "IDM": w.idm_input in ("pair", "diff"),
            "FDM": w.fdm is not None,
            "flow decoder": w.flow_decoder is not None,
            "action decoder": w.action_decoder,
        }
        for name, w in WIRING.items()
    }


class PatchEncoder:
    """Frozen visual encoder: flatten 8x8 RGB patches and project each with the same
    fixed matrix with orthonormal rows. Pixel values are scaled to [0, 1] first."""

    def __init__(self, height: int, width: int, patch: int = 8, dim: int = 16, seed: int = 0):
        if height % patch or width % patch:
            raise UsageError(f"image size {height}x{width} is not divisible by patch size {patch}")
        in_dim = patch * patch * 3
        if dim > in_dim:
            raise UsageError("projection dim exceeds patch dimension")
        rng = np.random.default_rng([seed, 8080])
        q, r = np.linalg.qr(rng.standard_normal((in_dim, dim)))
        q = q * np.sign(np.diag(r))
        self.projection = np.ascontiguousarray(q.T, dtype=np.float32)  # (dim, in_dim)
        self.height, self.width, self.patch, self.dim = height, width, patch, dim
        self.n_patches = (height // patch) * (width // patch)

    @property
    def state_dim(self) -> int:
        return self.n_patches * self.dim

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return encode_visual(images, self)


def encode_visual(images: np.ndarray, encoder: PatchEncoder) -> np.ndarray:
    """``(..., H, W, 3)`` uint8 images to ``(..., d)`` float32 states."""
    images = np.asarray(images)
    if images.shape[-3:] != (encoder.height, encoder.width, 3):
        raise UsageError(f"expected images of shape (..., {encoder.height}, {encoder.width}, 3), got {images.shape}")
    lead = images.shape[:-3]
    p = encoder.patch
    x = images.reshape(-1, encoder.height // p, p, encoder.width // p, p, 3).astype(np.float32) / 255.0
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, encoder.n_patches, p * p * 3)
    s = x @ encoder.projection.T
    return s.reshape(*lead, encoder.state_dim).astype(np.float32)


class QuantOut(NamedTuple):
    z_q: Tensor
    index: np.ndarray
    codebook_loss: Tensor
    commitment_loss: Tensor


class Quantizer(Module):
    def __init__(self, size: int, dim: int, rng: np.random.Generator, beta: float = 0.25):
        self.codebook = Tensor(rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)), requires_grad=True)
        self.beta = beta

    def __call__(self, z: Tensor) -> QuantOut:
        return quantize(z, self.codebook, self.beta)


def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row by squared distance; ties go to the lowest index."""
    d = (z * z).sum(1, keepdims=True) - 2.0 * z @ codebook.T + (codebook * codebook).sum(1)[None, :]
    return np.argmin(d, axis=1)


def quantize(z: Tensor, codebook: Tensor, beta: float = 0.25) -> QuantOut:
    """Vector quantization with a straight-through gradient to ``z``.

    Returns the quantized latents (exact codebook rows), indices, the codebook
    loss mse(sg(z), e) and the commitment loss beta * mse(z, sg(e)).
    """
    if codebook.shape[0] == 0:
        raise ShapeError("codebook is empty")
    z64 = z.data.astype(np.float64)
    cb64 = codebook.data.astype(np.float64)
    idx = nearest_code(z64, cb64)
    onehot = np.zeros((z.shape[0], codebook.shape[0]), dtype=np.float32)
    onehot[np.arange(z.shape[0]), idx] = 1.0
    e = ad.matmul(Tensor(onehot), codebook)
    z_q = ad.straight_through(z, codebook.data[idx])
    codebook_loss = ad.mse(z.detach(), e)
    commitment = ad.scale(ad.mse(z, e.detach()), beta)
    return QuantOut(z_q, idx, codebook_loss, commitment)


class FDM(Module):
    """Residual next-state predictor over concat(s_t, z); optional second flow head."""

    def __init__(self, state_dim: int, latent_dim: int, hidden: int, rng: np.random.Generator, dual: bool):
        self.trunk = MLP([state_dim + latent_dim, hidden, hidden], rng)
        self.state_head = Linear(hidden, state_dim, rng)
        self.flow_head = Linear(hidden, state_dim, rng) if dual else None

    def __call__(self, s: Tensor, z: Tensor):
        h = ad.tanh(self.trunk(ad.concat([s, z], axis=1)))
        s_hat = ad.add(s, self.state_head(h))
        if self.flow_head is None:
            return s_hat, None
        return s_hat, self.flow_head(h)


class LatentOut(NamedTuple):
    z: Tensor  # quantized in discrete mode
    z_pre: Tensor
    index: np.ndarray | None
    vq_loss: Tensor | None


class LamModel(Module):
    """Parameter bundle for one latent action model.

    Components absent for the variant are set to None. ``policy``,
    ``task_embedding`` and ``finetune_decoder`` exist for every variant; they are
    trained in the distillation and fine-tuning stages.
    """

    def __init__(
        self,
        variant: str,
        latent_mode: str,
        state_dim: int,
        action_dim: int,
        discrete_actions: bool,
        latent_dim: int = 16,
        n_tasks: int = 1,
        hidden: int = 256,
        codebook_size: int = 64,
        beta: float = 0.25,
        task_dim: int = 16,
        seed: int = 0,
    ):
        if variant not in WIRING:
            raise UsageError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        if latent_mode not in ("continuous", "discrete"):
            raise UsageError(f"latent_mode must be 'continuous' or 'discrete', got {latent_mode!r}")
        self.variant = variant
        self.latent_mode = latent_mode
        self.wiring = WIRING[variant]
        self.state_dim, self.latent_dim = state_dim, latent_dim
        self.action_dim, self.discrete_actions = action_dim, discrete_actions
        self.n_tasks = n_tasks
        d, k, h = state_dim, latent_dim, hidden
        w = self.wiring
        rng = np.random.default_rng([seed, 5150])

        idm_in = d if w.idm_input == "flow" else 2 * d
        self.idm = MLP([idm_in, h, h, k], rng)
        self.quantizer = Quantizer(codebook_size, k, rng, beta) if latent_mode == "discrete" else None
        self.fdm = FDM(d, k, h, rng, dual=w.fdm == "dual") if w.fdm else None
        if w.flow_decoder in ("z", "zs"):
            self.flow_decoder = MLP([k + (d if w.flow_decoder == "zs" else 0), h, h, d], rng)
        else:
            self.flow_decoder = None
        self.action_decoder = MLP([k, h, h, action_dim], rng) if w.action_decoder else None
        self.policy = MLP([d + task_dim, h, h, k], rng)
        self.task_embedding = Tensor(rng.normal(0.0, 0.1, size=(n_tasks, task_dim)), requires_grad=True)
        self.finetune_decoder = MLP([k, h, h, action_dim], rng)

    # parameter groups used by the freeze contracts and the optimizers
    def group(self, name: str) -> list[Tensor]:
        if name == "policy":
            return self.policy.parameters() + [self.task_embedding]
        mod = getattr(self, name)
        return [] if mod is None else mod.parameters()

    def pretrain_parameters(self) -> list[Tensor]:
        names = ("idm", "quantizer", "fdm", "flow_decoder", "action_decoder")
        return [p for n in names for p in self.group(n)]

    def has(self, component: str) -> bool:
        return wiring_table()[self.variant][component]

    # forward passes
    def idm_forward(self, s_t, s_next) -> LatentOut:
        s_t, s_next = ad.as_tensor(s_t), ad.as_tensor(s_next)
        self._check_state(s_t)
        self._check_state(s_next)
        if self.wiring.idm_input == "flow":
            raise UsageError("LAOF-AE has no IDM; use encode_flow")
        second = ad.sub(s_next, s_t) if self.wiring.idm_input == "diff" else s_next
        return self._bottleneck(self.idm(ad.concat([s_t, second], axis=1)))

    def encode_flow(self, f_t) -> LatentOut:
        if self.wiring.idm_input != "flow":
            raise UsageError(f"variant {self.variant} has no flow encoder")
        f_t = ad.as_tensor(f_t)
        self._check_state(f_t)
        return self._bottleneck(self.idm(f_t))

    def infer_latent(self, s_t, s_next, f_t=None) -> LatentOut:
        """Latent action for a transition, whichever encoder the variant uses."""
        if self.wiring.idm_input == "flow":
            if f_t is None:
                raise UsageError("LAOF-AE needs the encoded flow f_t to infer latents")
            return self.encode_flow(f_t)
        return self.idm_forward(s_t, s_next)

    def _bottleneck(self, z: Tensor) -> LatentOut:
        if self.quantizer is None:
            return LatentOut(z, z, None, None)
        q = self.quantizer(z)
        return LatentOut(q.z_q, z, q.index, ad.add(q.codebook_loss, q.commitment_loss))

    def fdm_forward(self, s_t, z):
        """Predicted next state; for LAOF-FlowFDM returns ``(s_hat, f_hat)``."""
        if self.fdm is None:
            raise UsageError(f"variant {self.variant} has no forward dynamics model")
        s_t, z = ad.as_tensor(s_t), ad.as_tensor(z)
        self._check_state(s_t)
        s_hat, f_hat = self.fdm(s_t, z)
        return (s_hat, f_hat) if self.fdm.flow_head is not None else s_hat

    def flow_decode(self, z, s_t=None) -> Tensor:
        mode = self.wiring.flow_decoder
        if mode is None:
            raise UsageError(f"flow decoder absent for variant {self.variant}")
        z = ad.as_tensor(z)
        if mode == "z":
            return self.flow_decoder(z)
        if s_t is None:
            raise UsageError(f"variant {self.variant} decodes flow from (z, s_t); s_t is required")
        if mode == "zs":
            return self.flow_decoder(ad.concat([z, ad.as_tensor(s_t)], axis=1))
        return self.fdm_forward(s_t, z)[1]

    def action_decode(self, z, stage: str = "finetune") -> Tensor:
        """Logits over discrete actions or a continuous (dx, dy) prediction."""
        dec = self.finetune_decoder if stage == "finetune" else self.action_decoder
        if dec is None:
            raise UsageError(f"variant {self.variant} has no pre-training action decoder")
        return dec(ad.as_tensor(z))

    def policy_forward(self, s_t, task_id) -> Tensor:
        s_t = ad.as_tensor(s_t)
        self._check_state(s_t)
        tasks = np.broadcast_to(np.asarray(task_id, dtype=np.int64), (s_t.shape[0],))
        if tasks.size and (tasks.min() < 0 or tasks.max() >= self.n_tasks):
            raise UsageError(f"task id out of range for {self.n_tasks} task(s)")
        onehot = np.zeros((s_t.shape[0], self.n_tasks), dtype=np.float32)
        onehot[np.arange(s_t.shape[0]), tasks] = 1.0
        emb = ad.matmul(Tensor(onehot), self.task_embedding)
        return self.policy(ad.concat([s_t, emb], axis=1))

    def _check_state(self, s: Tensor) -> None:
        if s.data.ndim != 2 or s.shape[1] != self.state_dim:
            raise ShapeError(f"expected states of shape (B, {self.state_dim}), got {s.shape}")

    def describe(self) -> dict:
        return {
            "variant": self.variant,
            "latent_mode": self.latent_mode,
            "state_dim": self.state_dim,
            "latent_dim": self.latent_dim,
            "action_dim": self.action_dim,
            "discrete_actions": self.discrete_actions,
            "n_tasks": self.n_tasks,
        }
