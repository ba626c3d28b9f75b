"""MAE data term plus a tensor-normal prior on the regression heads.

The head weights ``W`` of shape ``(D_o, D_i, D_c)`` are flattened in C order,
so ``vec(W)`` pairs with ``Σ_o ⊗ Σ_i ⊗ Σ_c``. The Kronecker product is never
formed; its inverse is applied as three mode products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from .tensor import ops
from .tensor.engine import as_tensor, make_result

RIDGE = 1e-6
LAMBDA = 1e-3


class CovarianceError(ValueError):
    pass


@dataclass
class CovarianceSet:
    """Per-mode covariance factors of the head prior plus its weight ``lam``."""

    sigma_o: np.ndarray
    sigma_i: np.ndarray
    sigma_c: np.ndarray
    lam: float = LAMBDA

    @classmethod
    def identity(cls, shape=(3, 5, 100), lam: float = LAMBDA) -> "CovarianceSet":
        return cls(*(np.eye(d) for d in shape), lam=lam)

    @property
    def factors(self) -> tuple:
        return self.sigma_o, self.sigma_i, self.sigma_c

    @property
    def shape(self) -> tuple:
        return tuple(s.shape[0] for s in self.factors)

    def arrays(self) -> dict:
        return {"cov.sigma_o": self.sigma_o, "cov.sigma_i": self.sigma_i, "cov.sigma_c": self.sigma_c}

    @classmethod
    def from_arrays(cls, arrays: dict, lam: float = LAMBDA) -> "CovarianceSet":
        return cls(np.asarray(arrays["cov.sigma_o"], float), np.asarray(arrays["cov.sigma_i"], float),
                   np.asarray(arrays["cov.sigma_c"], float), lam=lam)


_NAMES = ("sigma_o", "sigma_i", "sigma_c")


def _cholesky(S: np.ndarray, name: str) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise CovarianceError(f"{name} must be square, got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-10, rtol=0):
        raise CovarianceError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise CovarianceError(f"{name} is not positive definite") from None


def mode_product(W: np.ndarray, A: np.ndarray, mode: int) -> np.ndarray:
    """``W ×_mode A``: contract axis ``mode`` of W with the columns of A."""
    return np.moveaxis(np.tensordot(A, W, axes=(1, mode)), 0, mode)


def _precision_apply(W: np.ndarray, invs) -> np.ndarray:
    V = W
    for k, P in enumerate(invs):
        V = mode_product(V, P, k)
    return V


def _inverses(cov: CovarianceSet):
    invs, logdets = [], []
    for S, name in zip(cov.factors, _NAMES):
        L = _cholesky(S, name)
        Linv = np.linalg.inv(L)
        invs.append(Linv.T @ Linv)
        logdets.append(2.0 * np.log(np.diag(L)).sum())
    return invs, logdets


def mae_loss(pred, target) -> Tensor:
    """Mean over items of the l1 distance between prediction rows and targets.

    Leading dimensions of ``pred`` are flattened into items; the last axis
    holds the indices.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if np.isnan(target).any():
        raise ValueError("targets contain NaN")
    n_items = int(np.prod(pred.shape[:-1])) if pred.ndim > 1 else 1
    return ops.sum(ops.abs(ops.sub(pred, target))) * (1.0 / n_items)


def tn_regularizer(W, cov: CovarianceSet) -> Tensor:
    """Quadratic form of ``vec(W)`` under the Kronecker precision minus the
    weighted log-determinants of the factors (constant with respect to W)."""
    W = as_tensor(W)
    if W.ndim != 3 or W.shape != cov.shape:
        raise ValueError(f"head tensor {W.shape} does not match covariance shape {cov.shape}")
    invs, logdets = _inverses(cov)
    Wd = W.data.astype(np.float64)
    V = _precision_apply(Wd, invs)
    n = Wd.size
    value = float((Wd * V).sum()) - sum(n / d * ld for d, ld in zip(cov.shape, logdets))
    return make_result("tn_regularizer", np.asarray(value, dtype=W.dtype), (W,),
                       lambda g: ((2.0 * g) * V.astype(W.dtype),))


def head_tensor(model) -> Tensor:
    return model.params["head.weight"]


def total_loss(pred, target, W, cov: CovarianceSet, lam: float | None = None) -> Tensor:
    """``mae + lam * tn_regularizer``; ``lam`` defaults to ``cov.lam``."""
    lam = cov.lam if lam is None else lam
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss = mae_loss(pred, target)
    if lam == 0:
        return loss
    return ops.add(loss, ops.mul(tn_regularizer(W, cov), lam))


def _floor(S: np.ndarray, ridge: float) -> np.ndarray:
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    S = (U * np.maximum(w, ridge)) @ U.T
    return 0.5 * (S + S.T)


def update_covariances(W, n_sweeps: int = 5, ridge: float = RIDGE, lam: float = LAMBDA,
                       init: CovarianceSet | None = None) -> CovarianceSet:
    """Flip-flop maximum-likelihood factors for a single tensor-normal draw ``W``.

    Each sweep updates every factor in turn from the unfolding of ``W``
    whitened by the other two. Afterwards eigenvalues are floored at
    ``ridge`` and the traces of the first two factors are set to their
    dimensions, the third absorbing the compensating scale.
    """
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    dims = W.shape
    if not np.any(W):
        return CovarianceSet(*(np.eye(d) for d in dims), lam=lam)
    S = [f.copy() for f in init.factors] if init is not None else [np.eye(d) for d in dims]
    for _ in range(n_sweeps):
        for k in range(3):
            others = [j for j in range(3) if j != k]
            invs = [np.eye(dims[j]) if j == k else np.linalg.inv(_floor(S[j], ridge)) for j in range(3)]
            V = _precision_apply(W, invs)
            Wk = np.moveaxis(W, k, 0).reshape(dims[k], -1)
            Vk = np.moveaxis(V, k, 0).reshape(dims[k], -1)
            S[k] = _floor(Wk @ Vk.T / np.prod([dims[j] for j in others]), ridge)
    a = dims[0] / np.trace(S[0])
    b = dims[1] / np.trace(S[1])
    # the first two factors were floored before scaling; a, b >= 1 unless W is huge
    S = [_floor(S[0] * a, ridge * a), _floor(S[1] * b, ridge * b), _floor(S[2] / (a * b), ridge)]
    return CovarianceSet(*S, lam=lam)
