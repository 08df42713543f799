"""Training objectives: generation NLL and the context-state contrastive losses.

All kernels live in :mod:`todcl._kernels` and return analytic gradients;
this module wraps them as autograd functions so they can sit inside a
torch graph, and also accepts plain arrays (returning Python floats).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import torch

from . import _kernels

MODES = ("baseline", "mars_p", "mars_g", "mars_variant")


@dataclass
class LossWeights:
    lambda_dst: float = 1.0
    lambda_act: float = 0.1
    mode: str = "baseline"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lambda_dst < 0 or self.lambda_act < 0:
            raise ValueError("loss weights must be non-negative")


class _KernelLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, kernel, *inputs):
        arrays = [x.detach().cpu().double().numpy() for x in inputs]
        loss, *grads = kernel(*arrays)
        ctx.save_for_backward(*(torch.from_numpy(g).to(x) for g, x in zip(grads, inputs)))
        return inputs[0].new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        return (None, *(grad_out * g for g in ctx.saved_tensors))


def _run(kernel, *inputs):
    if any(isinstance(x, torch.Tensor) for x in inputs):
        inputs = [x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64) for x in inputs]
        return _KernelLoss.apply(kernel, *inputs)
    return kernel(*(np.asarray(x, dtype=np.float64) for x in inputs))[0]


def positive_indices(n: int, rule: str = "next", rng: np.random.Generator | None = None) -> np.ndarray:
    """Group-wise positive j != i for every row: (i+1) mod n, or uniform random."""
    if n < 2:
        raise ValueError("group-wise loss needs a batch of at least 2 (no valid positive)")
    if rule == "next":
        return (np.arange(n) + 1) % n
    if rule == "random":
        rng = rng if rng is not None else np.random.default_rng()
        off = rng.integers(1, n, size=n)
        return (np.arange(n) + off) % n
    raise ValueError(f"unknown positive rule {rule!r}")


def generation_loss(logits, targets, pad_id: int):
    """Mean token NLL over non-pad targets. ``logits`` is (..., V), ``targets`` (...)."""
    if isinstance(logits, torch.Tensor):
        flat = logits.reshape(-1, logits.shape[-1])
        tgt = torch.as_tensor(targets).reshape(-1).cpu().numpy()
        return _KernelLoss.apply(lambda x: _kernels.token_nll(x, tgt, pad_id), flat)
    logits = np.asarray(logits, dtype=np.float64)
    return _kernels.token_nll(logits.reshape(-1, logits.shape[-1]), np.asarray(targets).reshape(-1), pad_id)[0]


def pointwise_loss(H_c, H_s, temperature: float):
    """Each context against its own state; other contexts and states are negatives."""
    n = len(H_c)
    return _run(partial(_contrastive, temperature=temperature, positives=-np.ones(n, dtype=np.int64)), H_c, H_s)


def groupwise_loss(H_c, H_s, temperature: float, positives=None, rule: str = "next", rng=None):
    """Another in-batch context is the positive; every state representation is a negative."""
    n = len(H_c)
    if positives is None:
        positives = positive_indices(n, rule, rng)
    elif n < 2:
        raise ValueError("group-wise loss needs a batch of at least 2 (no valid positive)")
    return _run(partial(_contrastive, temperature=temperature, positives=np.asarray(positives)), H_c, H_s)


def variant_loss(H_c, H_s):
    return _run(_kernels.variant, H_c, H_s)


def _contrastive(Hc, Hs, temperature, positives):
    return _kernels.contrastive(Hc, Hs, temperature, positives)


def contrastive_loss(mode: str, H_c, H_s, temperature: float, rule: str = "next", rng=None):
    if mode == "mars_p":
        return pointwise_loss(H_c, H_s, temperature)
    if mode == "mars_g":
        return groupwise_loss(H_c, H_s, temperature, rule=rule, rng=rng)
    if mode == "mars_variant":
        return variant_loss(H_c, H_s)
    raise ValueError(f"mode {mode!r} has no contrastive term")


def total_loss(L_D, L_R, L_dscl, L_ascl, weights: LossWeights):
    if weights.mode == "baseline":
        return L_D + L_R
    return (L_D + weights.lambda_dst * L_dscl) + (L_R + weights.lambda_act * L_ascl)
