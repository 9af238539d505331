#!/usr/bin/env python3
"""
Differentiable building blocks: Leaky-ReLU MLPs, Gaussian reparameterization,
gradient computation and clipped AdamW, plus the text checkpoint format.

Everything runs in float64 on the CPU so finite-difference checks stay tight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from errors import ConfigurationError, NumericError, ShapeError
from storage import write_text_atomic

DTYPE = torch.float64
LEAKY_SLOPE = 0.01
LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
CHECKPOINT_VERSION = "mavrl-checkpoint v1"


class Mlp(nn.Module):
    """linear -> LeakyReLU -> linear -> LeakyReLU -> linear"""

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        out_dim: int,
        negative_slope: float = LEAKY_SLOPE,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden, hidden, dtype=DTYPE),
            nn.LeakyReLU(negative_slope),
            nn.Linear(hidden, out_dim, dtype=DTYPE),
        )
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from generator"""
        with torch.no_grad():
            for layer in self.linear_layers():
                bound = 1.0 / math.sqrt(layer.in_features)
                for param in (layer.weight, layer.bias):
                    sample = torch.rand(param.shape, generator=generator, dtype=DTYPE)
                    param.copy_((2.0 * sample - 1.0) * bound)

    def linear_layers(self) -> List[nn.Linear]:
        return [m for m in self.net if isinstance(m, nn.Linear)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")
        return self.net(x)


def mlp_forward(params: Mlp, x: torch.Tensor | np.ndarray) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return params(x.to(DTYPE))


def backward(loss: torch.Tensor, parameters: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """Gradients of a scalar loss with respect to every parameter (zeros for unused ones)"""
    if loss.dim() != 0:
        raise ShapeError("backward needs a scalar loss")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    params = list(parameters)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """mu + exp(logvar / 2) * eps"""
    return mu + torch.exp(0.5 * logvar) * eps


def clamp_logvar(raw: torch.Tensor) -> torch.Tensor:
    return torch.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)


@dataclass
class OptimizerSettings:
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


class ClippedAdamW:
    """AdamW with decoupled weight decay after global-norm gradient clipping"""

    def __init__(self, parameters: Iterable[torch.Tensor], settings: Optional[OptimizerSettings] = None):
        self.settings = settings or OptimizerSettings()
        if self.settings.learning_rate <= 0 or self.settings.clip_norm <= 0:
            raise ConfigurationError("learning rate and clip norm must be positive")
        self.parameters = list(parameters)
        self.optimizer = torch.optim.AdamW(
            self.parameters,
            lr=self.settings.learning_rate,
            betas=self.settings.betas,
            eps=self.settings.eps,
            weight_decay=self.settings.weight_decay,
            foreach=True,
        )
        self.last_grad_norm = 0.0
        self.last_clipped: List[torch.Tensor] = []

    @property
    def step_count(self) -> int:
        counts = [int(state.get("step", 0)) for state in self.optimizer.state.values()]
        return max(counts, default=0)

    def step(self, grads: Sequence[torch.Tensor]) -> float:
        """Clip grads to clip_norm, then take one AdamW step. Returns the pre-clip global norm."""
        if len(grads) != len(self.parameters):
            raise ShapeError(f"got {len(grads)} gradients for {len(self.parameters)} parameters")
        for param, grad in zip(self.parameters, grads):
            if grad.shape != param.shape:
                raise ShapeError(f"gradient shape {tuple(grad.shape)} != parameter shape {tuple(param.shape)}")
            param.grad = grad.detach().clone()
        try:
            norm = torch.nn.utils.clip_grad_norm_(
                self.parameters, self.settings.clip_norm, error_if_nonfinite=True
            )
        except RuntimeError as e:
            raise NumericError(f"non-finite gradients: {e}") from e
        self.last_clipped = [p.grad.detach().clone() for p in self.parameters]
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.last_grad_norm = float(norm)
        return self.last_grad_norm


def adamw_step(state: ClippedAdamW, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> ClippedAdamW:
    """Functional form of ClippedAdamW.step; params are updated in place"""
    if [id(p) for p in params] != [id(p) for p in state.parameters]:
        raise ShapeError("optimizer state was built for different parameters")
    state.step(grads)
    return state


def save_checkpoint(tensors: Mapping[str, torch.Tensor | np.ndarray], path: str, metadata: Optional[Dict[str, str]] = None) -> None:
    """Write named tensors as text: a shape header line then one row-major line of values each"""
    lines = [f"# {CHECKPOINT_VERSION}"]
    for key, value in (metadata or {}).items():
        lines.append(f"@ {key} {value}")
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        array = np.asarray(array, dtype=np.float64)
        dims = " ".join(str(d) for d in array.shape)
        lines.append(f"{name} {array.ndim} {dims}".rstrip())
        lines.append(" ".join(repr(float(v)) for v in array.ravel()))
    write_text_atomic(path, "\n".join(lines) + "\n")
    logging.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: str) -> tuple:
    """Returns (tensors, metadata) from a checkpoint file"""
    with open(path) as handle:
        lines = handle.read().split("\n")
    if not lines or lines[0] != f"# {CHECKPOINT_VERSION}":
        raise ConfigurationError(f"{path} is not a '{CHECKPOINT_VERSION}' file")

    tensors: Dict[str, torch.Tensor] = {}
    metadata: Dict[str, str] = {}
    index = 1
    while index < len(lines):
        line = lines[index]
        if not line.strip():
            index += 1
            continue
        if line.startswith("@ "):
            _, key, value = line.split(" ", 2)
            metadata[key] = value
            index += 1
            continue
        name, ndim, *dims = line.split()
        shape = tuple(int(d) for d in dims)
        if len(shape) != int(ndim):
            raise ConfigurationError(f"{path}: bad header for '{name}'")
        values = lines[index + 1].split() if index + 1 < len(lines) else []
        data = np.array([float(v) for v in values], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise ConfigurationError(f"{path}: '{name}' expects {int(np.prod(shape))} values, found {data.size}")
        tensors[name] = torch.from_numpy(data.reshape(shape))
        index += 2
    return tensors, metadata
