"""
Finite-difference verification of backward passes.
"""

from collections.abc import Callable, Sequence

import torch
from torch import Tensor, nn

from .errors import DomainError

DEFAULT_EPSILON = 1e-6
"""Base central-difference step, scaled by `max(1, |θ|)`."""

DEFAULT_COORDINATES = 64
"""Sampled coordinates per tensor."""


def grad_check(
    op: Callable[..., Tensor] | nn.Module,
    params: Sequence[Tensor] | None,
    *inputs: Tensor,
    epsilon: float = DEFAULT_EPSILON,
    coordinates: int = DEFAULT_COORDINATES,
    seed: int = 0,
) -> float:
    """
    Compares backward-pass gradients with central finite differences.

    The scalar loss is `Σ op(*inputs) · c` with a fixed random cotangent `c`. For every checked
    tensor, `coordinates` random entries (or all of them, if fewer) are perturbed by
    `±ε·max(1, |θ|)`. The relative error of an entry is `|fd - g| / max(|fd|, |g|, floor)` with
    `floor = 1e-2 · max |g|` over the tensor.

    Arguments:
        op: The operation under test.
        params: Tensors to check, the module's parameters if `None` and `op` is a module,
            otherwise the inputs.
        inputs: Arguments of `op`. Inputs are checked only if they are listed in `params`.
        epsilon: Base step.
        coordinates: Sampled entries per tensor.
        seed: Seed of the cotangent and of the coordinate sampling.

    Returns:
        The maximum relative error over all sampled entries.

    Raises:
        DomainError: If a checked tensor is not double precision.
    """
    if params is None:
        params = list(op.parameters()) if isinstance(op, nn.Module) else list(inputs)

    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise DomainError("Gradient checks need double precision tensors.")

    generator = torch.Generator().manual_seed(seed)
    input_ids = {id(x) for x in inputs}
    leaves = [p.detach().clone().requires_grad_(True) if id(p) in input_ids else p for p in params]
    substitutes = {id(p): leaf for p, leaf in zip(params, leaves, strict=True)}
    call_inputs = [substitutes.get(id(x), x) for x in inputs]

    output = op(*call_inputs)
    cotangent = torch.randn(output.shape, generator=generator, dtype=torch.float64).to(output.device)
    grads = torch.autograd.grad((output * cotangent).sum(), leaves, allow_unused=True)

    def loss() -> float:
        with torch.no_grad():
            return float((op(*call_inputs) * cotangent).sum())

    worst = 0.0
    for leaf, grad in zip(leaves, grads, strict=True):
        analytic = torch.zeros_like(leaf) if grad is None else grad.detach()
        flat = leaf.data.view(-1)
        flat_grad = analytic.reshape(-1)
        floor = 1e-2 * float(flat_grad.abs().max()) if flat_grad.numel() > 0 else 0.0
        if flat.numel() <= coordinates:
            picks = torch.arange(flat.numel())
        else:
            picks = torch.randperm(flat.numel(), generator=generator)[:coordinates]

        for i in picks.tolist():
            original = float(flat[i])
            h = epsilon * max(1.0, abs(original))
            flat[i] = original + h
            plus = loss()
            flat[i] = original - h
            minus = loss()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            g = float(flat_grad[i])
            denominator = max(abs(numeric), abs(g), floor, 1e-300)
            worst = max(worst, abs(numeric - g) / denominator)

    return worst
