"""Dense tensor ops with reverse-mode gradients.

Tensors are plain ``torch.Tensor`` objects and torch's autograd tape is the
compute graph. This module pins down the small op surface the rest of the
package relies on, with the shape contract made explicit: only equal-shape
and scalar-with-tensor broadcasting is accepted.
"""

from __future__ import annotations

import torch

DTYPE = torch.float32


class DimensionError(ValueError):
    pass


class DegeneracyError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def _check_broadcast(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape == y.shape or x.dim() == 0 or y.dim() == 0:
        return
    raise DimensionError(f"incompatible shapes {tuple(x.shape)} and {tuple(y.shape)}")


def elementwise(op: str, *inputs, factor: float | None = None) -> torch.Tensor:
    """Apply one of ``add``, ``mul``, ``relu``, ``logistic``, ``scale``."""
    if op in ("add", "mul"):
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs")
        x, y = inputs
        _check_broadcast(x, y)
        return x + y if op == "add" else x * y
    if len(inputs) != 1:
        raise ContractError(f"{op} takes one input")
    (x,) = inputs
    if op == "relu":
        return torch.relu(x)
    if op == "logistic":
        return torch.sigmoid(x)
    if op == "scale":
        if factor is None:
            raise ContractError("scale needs a factor")
        return x * factor
    raise ContractError(f"unknown elementwise op {op!r}")


def softmax_cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-softmax probability of ``targets``."""
    if logits.dim() != 2:
        raise DimensionError(f"logits must be batch x V, got {tuple(logits.shape)}")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != (logits.shape[0],):
        raise DimensionError("one target per row required")
    vocab = logits.shape[1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= vocab):
        raise IndexError(f"target out of range [0, {vocab})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, targets[:, None])[:, 0]
    return (log_z - picked).mean()


def qr_orthonormalize(w: torch.Tensor, tol: float = 1e-6) -> torch.Tensor:
    """Orthonormalize the rows of ``w`` by modified Gram-Schmidt.

    Runs without gradient tracking; callers re-orthonormalize parameters in
    place after an optimizer step.
    """
    if w.dim() != 2:
        raise DimensionError(f"expected k x n matrix, got {tuple(w.shape)}")
    k, n = w.shape
    if k > n:
        raise DimensionError(f"cannot orthonormalize {k} rows in {n} dimensions")
    with torch.no_grad():
        q = w.detach().to(torch.float64).clone()
        scale = max(float(q.abs().max()), 1.0)
        for i in range(k):
            for j in range(i):
                q[i] -= (q[i] @ q[j]) * q[j]
            # second pass keeps float error at the 1e-15 level
            for j in range(i):
                q[i] -= (q[i] @ q[j]) * q[j]
            norm = torch.linalg.vector_norm(q[i])
            if norm <= tol * scale:
                raise DegeneracyError(f"row {i} is linearly dependent on earlier rows")
            q[i] /= norm
    return q.to(w.dtype)


def complete_basis(w: torch.Tensor) -> torch.Tensor:
    """Extend orthonormal rows ``w`` (k x n) to an n x n orthonormal basis.

    The first k rows are ``w`` unchanged; the remaining rows span its null
    space, chosen deterministically by sweeping the standard basis.
    """
    k, n = w.shape
    rows = [r for r in w.detach().to(torch.float64)]
    eye = torch.eye(n, dtype=torch.float64)
    for i in range(n):
        if len(rows) == n:
            break
        v = eye[i].clone()
        for _ in range(2):
            for r in rows:
                v -= (v @ r) * r
        norm = torch.linalg.vector_norm(v)
        if norm > 1e-6:
            rows.append(v / norm)
    return torch.stack(rows).to(w.dtype)


def orthogonality_error(w: torch.Tensor) -> float:
    """max |W W^T - I| for a matrix with orthonormal rows."""
    w64 = w.detach().to(torch.float64)
    gram = w64 @ w64.T
    return float((gram - torch.eye(w.shape[0], dtype=torch.float64)).abs().max())


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


def seeded_uniform(shape, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / fan_in**0.5
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound
