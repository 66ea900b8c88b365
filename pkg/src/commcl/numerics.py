"""Tensor ops with shape/finiteness checks, Adam, grad checking, Gaussian statistics.

Reverse-mode differentiation is delegated to torch autograd; every op here is a
thin checked wrapper so callers get a ``ConfigError`` on shape mismatch and a
``NumericFault`` naming the op on a non-finite forward value.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericFault, UsageError

DTYPE = torch.float32

# Flip to False to skip the per-op isfinite scan in hot loops; losses are
# always checked by their callers.
CHECK_FINITE = True


def _finite(name: str, out: torch.Tensor) -> torch.Tensor:
    if CHECK_FINITE and not bool(torch.isfinite(out).all()):
        raise NumericFault(f"non-finite value in {name}", {"op": name})
    return out


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """A labelled, seeded numpy generator.

    Two streams with the same ``(seed, label)`` produce the same draws; streams
    with different labels are statistically independent.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = str(label)
        words = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF, zlib.crc32(self.label.encode())]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(shape) * scale

    def tensor(self, shape, scale: float = 1.0, dtype=DTYPE) -> torch.Tensor:
        return torch.from_numpy(self.normal(shape, scale)).to(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"


# --------------------------------------------------------------------------
# differentiable ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ConfigError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return _finite("matmul", a @ b)


def _check_broadcast(name, a, b):
    if a.shape == b.shape:
        return
    # only a leading batch axis may be broadcast
    if b.shape == a.shape[1:] or a.shape == b.shape[1:]:
        return
    raise ConfigError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_broadcast("add", a, b)
    return _finite("add", a + b)


def scale(a: torch.Tensor, s) -> torch.Tensor:
    return _finite("scale", a * s)


def concat(tensors: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ConfigError(f"concat: shapes {[tuple(x.shape) for x in tensors]} differ off axis {axis}")
    return torch.cat(list(tensors), dim=axis)


def slice_axis(a: torch.Tensor, axis: int, start: int, stop: int) -> torch.Tensor:
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ConfigError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    return a.narrow(axis, start, stop - start)


def mean(a: torch.Tensor, axis: int) -> torch.Tensor:
    return a.mean(dim=axis)


def sum_axis(a: torch.Tensor, axis: int) -> torch.Tensor:
    return a.sum(dim=axis)


def softmax(a: torch.Tensor) -> torch.Tensor:
    return _finite("softmax", torch.softmax(a, dim=-1))


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ConfigError("layer_norm: gain/bias width differs from input")
    return _finite("layer_norm", F.layer_norm(x, x.shape[-1:], gain, bias, eps))


def gelu(x: torch.Tensor) -> torch.Tensor:
    """tanh approximation of GELU."""
    return _finite("gelu", F.gelu(x, approximate="tanh"))


def l2_norm(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return _finite("l2_norm", torch.linalg.vector_norm(x, dim=axis))


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis. Zero-norm inputs are a fault."""
    _check_broadcast("cosine_sim", a, b)
    na, nb = l2_norm(a), l2_norm(b)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericFault("zero-norm vector in cosine similarity", {"op": "cosine_sim"})
    return _finite("cosine_sim", (a * b).sum(-1) / (na * nb))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity, ``[N, d] x [C, d] -> [N, C]``."""
    if a.shape[-1] != b.shape[-1]:
        raise ConfigError(f"cosine_matrix: widths {a.shape[-1]} and {b.shape[-1]} differ")
    na, nb = l2_norm(a), l2_norm(b)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericFault("zero-norm vector in cosine similarity", {"op": "cosine_matrix"})
    return _finite("cosine_matrix", (a / na.unsqueeze(-1)) @ (b / nb.unsqueeze(-1)).transpose(-1, -2))


def attention(q, k, v, num_heads: int, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product multi-head attention.

    ``q`` is ``[N, Sq, d]``; ``k`` and ``v`` are ``[N, Sk, d]`` (or ``[Sk, d]``,
    shared over the batch). ``key_mask`` is a boolean ``[N, Sk]`` or ``[Sk]``
    tensor, True where a key may be attended to.
    """
    n, sq, d = q.shape
    if d % num_heads:
        raise ConfigError(f"width {d} not divisible by {num_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ConfigError("attention: key/value shapes do not match query")
    dh = d // num_heads
    sk = k.shape[-2]
    if k.dim() == 2:
        k = k.unsqueeze(0).expand(n, sk, d)
        v = v.unsqueeze(0).expand(n, sk, d)
    qh = q.reshape(n, sq, num_heads, dh).transpose(1, 2)
    kh = k.reshape(n, sk, num_heads, dh).transpose(1, 2)
    vh = v.reshape(n, sk, num_heads, dh).transpose(1, 2)
    mask = None
    if key_mask is not None:
        mask = key_mask.reshape(-1, 1, 1, sk) if key_mask.dim() == 2 else key_mask.reshape(1, 1, 1, sk)
    out = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
    out = out.transpose(1, 2).reshape(n, sq, d)
    return _finite("attention", out)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    if logits.dim() != 2 or targets.shape != logits.shape[:1]:
        raise ConfigError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    logp = torch.log_softmax(logits, dim=-1)
    return _finite("cross_entropy", -logp.gather(1, targets.long().unsqueeze(1)).mean())


# --------------------------------------------------------------------------
# parameters and Adam


class Parameter:
    """A tensor plus its gradient and a trainable flag."""

    def __init__(self, value: torch.Tensor, trainable: bool = True):
        self.value = value.detach().clone().requires_grad_(trainable)
        self.trainable = trainable

    @classmethod
    def wrap(cls, tensor: torch.Tensor) -> "Parameter":
        """View an existing leaf tensor as a trainable parameter, sharing storage."""
        p = cls.__new__(cls)
        p.value = tensor.requires_grad_(True)
        p.trainable = True
        return p

    @property
    def shape(self):
        return tuple(self.value.shape)

    @property
    def grad(self) -> torch.Tensor:
        if self.value.grad is None:
            return torch.zeros_like(self.value)
        return self.value.grad

    def zero_grad(self):
        self.value.grad = torch.zeros_like(self.value)

    def numel(self) -> int:
        return self.value.numel()

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


@dataclass
class AdamState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, learning_rate: float) -> "AdamState":
        if learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        zeros = torch.zeros_like(param.value, requires_grad=False)
        return cls(zeros, zeros.clone(), learning_rate)


def adam_update(param: Parameter, state: AdamState) -> Parameter:
    """One bias-corrected Adam step. The gradient is left for the caller to zero."""
    if not param.trainable:
        raise UsageError("adam_update on a non-trainable parameter")
    if state.first_moment.shape != param.value.shape:
        raise ConfigError("Adam state shape does not match parameter")
    g = param.grad
    with torch.no_grad():
        state.step_count += 1
        state.first_moment.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        state.second_moment.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        m_hat = state.first_moment / (1 - state.beta1**state.step_count)
        v_hat = state.second_moment / (1 - state.beta2**state.step_count)
        param.value.sub_(state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon))
    return param


class Adam:
    """Adam over a fixed list of parameters."""

    def __init__(self, params: Sequence[Parameter], learning_rate: float):
        self.params = list(params)
        self.states = [AdamState.for_param(p, learning_rate) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, s in zip(self.params, self.states):
            adam_update(p, s)


# --------------------------------------------------------------------------
# finite-difference gradient check


def grad_check(
    f: Callable[..., torch.Tensor],
    x: torch.Tensor | Sequence[torch.Tensor],
    h: float = 1e-3,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps one or more tensors to a scalar. Inputs are promoted to float64.
    Relative error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-4 <= h <= 1e-2:
        raise ConfigError(f"step {h} outside [1e-4, 1e-2]")
    xs = [x] if isinstance(x, torch.Tensor) else list(x)
    xs = [t.detach().to(torch.float64).clone() for t in xs]

    leaves = [t.clone().requires_grad_(True) for t in xs]
    out = f(*leaves)
    if out.numel() != 1:
        raise ConfigError("grad_check needs a scalar function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.contiguous() for t, g in zip(xs, analytic)]

    worst = 0.0
    with torch.no_grad():
        for i, base in enumerate(xs):
            flat = base.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = f(*xs).item()
                flat[j] = orig - h
                down = f(*xs).item()
                flat[j] = orig
                numeric = (up - down) / (2 * h)
                if not math.isfinite(numeric):
                    raise NumericFault("non-finite numeric gradient", {"input": i, "coord": j})
                a = analytic[i].view(-1)[j].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


# --------------------------------------------------------------------------
# Gaussian statistics


@dataclass
class GaussianModel:
    """Mean / population covariance / count of a stream of vectors (float64)."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int = 0
    _lower: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def empty(cls, dim: int) -> "GaussianModel":
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def regularized(self) -> np.ndarray:
        d = self.dim
        eps = max(1e-4 * float(np.trace(self.covariance)) / d, 1e-12)
        return self.covariance + eps * np.eye(d)

    def lower_factor(self) -> np.ndarray:
        if self._lower is None:
            try:
                self._lower = np.linalg.cholesky(self.regularized())
            except np.linalg.LinAlgError as exc:
                raise NumericFault("covariance not factorizable after regularization") from exc
        return self._lower


def gaussian_merge(old: GaussianModel, batch) -> GaussianModel:
    """Fold a batch of vectors into ``old`` with the pooled-moments identity."""
    x = np.asarray(batch.detach().cpu().numpy() if isinstance(batch, torch.Tensor) else batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ConfigError("gaussian_merge needs a nonempty batch")
    if x.shape[1] != old.dim:
        raise ConfigError(f"dimension {x.shape[1]} does not match model dimension {old.dim}")
    n_new = x.shape[0]
    m_new = x.mean(axis=0)
    centred = x - m_new
    c_new = centred.T @ centred / n_new
    if old.count == 0:
        return GaussianModel(m_new, c_new, n_new)
    n_old = old.count
    n = n_old + n_new
    mean = (n_old * old.mean + n_new * m_new) / n
    d_old = old.mean - mean
    d_new = m_new - mean
    cov = (n_old * (old.covariance + np.outer(d_old, d_old)) + n_new * (c_new + np.outer(d_new, d_new))) / n
    cov = 0.5 * (cov + cov.T)
    return GaussianModel(mean, cov, n)


def gaussian_sample(model: GaussianModel, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` vectors ``mean + L z`` with ``L`` the regularized Cholesky factor."""
    if model.count < 1:
        raise UsageError("cannot sample from an empty Gaussian model")
    lower = model.lower_factor()
    z = rng.normal((n, model.dim))
    return model.mean + z @ lower.T
