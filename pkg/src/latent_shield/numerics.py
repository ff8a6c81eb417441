"""Differentiable building blocks for the world model and agent.

Reverse-mode differentiation is delegated to torch autograd; this module owns
the layer definitions, distributions, losses, the Adam update, a
finite-difference gradient checker and the checkpoint file format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

STD_FLOOR = 0.1
CLIP_NORM = 100.0


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``x @ W.T + b`` with ``W`` shaped (out, in)."""
    if x.shape[-1] != W.shape[1] or W.shape[0] != b.shape[-1]:
        raise ValueError(f"shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}")
    return x @ W.T + b


relu = torch.relu
elu = F.elu
tanh = torch.tanh


def gru_cell(h: torch.Tensor, x: torch.Tensor, W_x: torch.Tensor, W_h: torch.Tensor,
             b_x: torch.Tensor, b_h: torch.Tensor) -> torch.Tensor:
    """Gated recurrent update.

    ``W_x`` is (3H, in) and ``W_h`` is (3H, H), stacked as reset, update,
    candidate. The new state is ``(1 - u) * h + u * c``.
    """
    H = h.shape[-1]
    if W_h.shape != (3 * H, H) or W_x.shape[0] != 3 * H:
        raise ValueError("gru weight shapes do not match the state size")
    gx = affine(x, W_x, b_x)
    gh = affine(h, W_h, b_h)
    r = torch.sigmoid(gx[..., :H] + gh[..., :H])
    u = torch.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    c = torch.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1 - u) * h + u * c


class GRUCell(nn.Module):
    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.W_x = nn.Parameter(torch.empty(3 * hidden_size, input_size).uniform_(-bound, bound))
        self.W_h = nn.Parameter(torch.empty(3 * hidden_size, hidden_size).uniform_(-bound, bound))
        self.b_x = nn.Parameter(torch.zeros(3 * hidden_size))
        self.b_h = nn.Parameter(torch.zeros(3 * hidden_size))

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return gru_cell(h, x, self.W_x, self.W_h, self.b_x, self.b_h)


def mlp(sizes: Sequence[int], act: type[nn.Module] = nn.ELU, out_act: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or out_act:
            layers.append(act())
    return nn.Sequential(*layers)


# ---------------------------------------------------------------------------
# distributions


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def from_raw(cls, mean: torch.Tensor, raw_std: torch.Tensor, floor: float = STD_FLOOR):
        return cls(mean, F.softplus(raw_std) + floor)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.std.detach())


def sample_reparam(d: DiagGaussian, generator: torch.Generator | None = None) -> torch.Tensor:
    eps = torch.randn(d.mean.shape, generator=generator, dtype=d.mean.dtype)
    return d.mean + d.std * eps


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError("dimension mismatch")
    var_ratio = (q.std / p.std) ** 2
    mahal = ((q.mean - p.mean) / p.std) ** 2
    return 0.5 * (var_ratio + mahal - 1.0 - torch.log(var_ratio)).sum(-1)


def balanced_kl(post: DiagGaussian, prior: DiagGaussian, prior_share: float = 0.8) -> torch.Tensor:
    """KL with separate gradient shares for the prior and the posterior.

    The value equals ``KL(post || prior)``; ``prior_share`` of the gradient
    pulls the prior towards the posterior and the rest regularises the
    posterior (a 4:1 ratio is ``prior_share=0.8``).
    """
    to_prior = kl_diag_gaussian(post.detach(), prior)
    to_post = kl_diag_gaussian(post, prior.detach())
    return prior_share * to_prior + (1.0 - prior_share) * to_post


def weighted_bce(logit: torch.Tensor, label: torch.Tensor, positive_weight: float = 3.0) -> torch.Tensor:
    """Binary cross-entropy with the positive class weighted.

    ``-[w y log s(x) + (1 - y) log(1 - s(x))]`` via softplus, elementwise.
    """
    label = torch.as_tensor(label, dtype=logit.dtype)
    return positive_weight * label * F.softplus(-logit) + (1 - label) * F.softplus(logit)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor | None],
              state: AdamState) -> dict:
    """Bias-corrected Adam; returns updated parameter tensors (inputs untouched)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p.clone()
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = state.m.get(name, torch.zeros_like(p))
        v = state.v.get(name, torch.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
    return out


class Adam:
    """Adam over a module's parameters with global-norm gradient clipping."""

    def __init__(self, modules: nn.Module | Iterable[nn.Module], lr: float,
                 clip: float = CLIP_NORM, eps: float = 1e-7):
        if isinstance(modules, nn.Module):
            modules = [modules]
        self.params = {}
        for k, mod in enumerate(modules):
            for name, p in mod.named_parameters():
                self.params[f"{k}.{name}"] = p
        self.state = AdamState(lr=lr, eps=eps)
        self.clip = clip

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad`` fields; returns the grad norm."""
        with_grad = [p for p in self.params.values() if p.grad is not None]
        norm = torch.nn.utils.clip_grad_norm_(with_grad, self.clip) if with_grad else torch.tensor(0.0)
        grads = {k: p.grad for k, p in self.params.items()}
        new = adam_step({k: p.detach() for k, p in self.params.items()}, grads, self.state)
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(new[k])
        return float(norm)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_param: dict


def grad_check(f: Callable[..., torch.Tensor], params: Sequence[torch.Tensor],
               tolerance: float = 1e-4, step: float = 1e-4) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f(*params)`` to central differences.

    Runs in float64. The error for each parameter is
    ``max|g_auto - g_fd| / max(max|g_auto|, max|g_fd|, 1e-8)``.
    """
    xs = [p.detach().to(torch.float64).clone().requires_grad_(True) for p in params]
    out = f(*xs)
    if out.numel() != 1:
        raise ValueError("f must be scalar-valued")
    auto = torch.autograd.grad(out, xs, allow_unused=True)
    per = {}
    worst = 0.0
    with torch.no_grad():
        for k, x in enumerate(xs):
            a = torch.zeros_like(x) if auto[k] is None else auto[k]
            num = torch.zeros_like(x)
            flat = x.view(-1)
            nflat = num.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f(*xs).item()
                flat[i] = orig - step
                down = f(*xs).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            scale = max(a.abs().max().item(), num.abs().max().item(), 1e-8)
            err = (a - num).abs().max().item() / scale
            per[k] = err
            worst = max(worst, err)
    return GradCheckReport(worst, worst < tolerance, per)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"LSCK"
_VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    """Write named float32 tensors: header, then name/shape/little-endian payload records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return out


def module_tensors(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_into(module: nn.Module, prefix: str, tensors: Mapping[str, np.ndarray]) -> None:
    own = module.state_dict()
    new = {}
    for k, v in own.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise ValueError(f"checkpoint is missing {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs model {tuple(v.shape)}")
        new[k] = torch.as_tensor(arr, dtype=v.dtype)
    module.load_state_dict(new)
