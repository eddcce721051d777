"""Parameter containers and layers on top of :mod:`deeptopo.tensor`."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, attention_block, batch_norm_2d, conv2d, layer_norm, linear


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations redrawn."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, Module] = {}
        self._masks: dict[str, np.ndarray] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def set_mask(self, name: str, mask: np.ndarray) -> None:
        """Pin the entries of parameter ``name`` where ``mask`` is 0 to zero."""
        self._masks[name] = mask

    # -- traversal ----------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{mname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{mname}.")

    def named_masks(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, mk in self._masks.items():
            yield prefix + name, mk
        for mname, m in self._modules.items():
            yield from m.named_masks(f"{prefix}{mname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- state --------------------------------------------------------------
    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, in registration order."""
        items = [(n, p.data) for n, p in self.named_parameters()]
        items += [(f"buffer:{n}", b) for n, b in self.named_buffers()]
        return items

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state()
        names = [n for n, _ in expected]
        missing = [n for n in names if n not in arrays]
        extra = [n for n in arrays if n not in set(names)]
        if missing or extra:
            raise ValueError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n, cur in expected:
            if arrays[n].shape != cur.shape:
                raise ValueError(f"state mismatch for {n}: shape {arrays[n].shape} != {cur.shape}")
        for n, cur in expected:
            cur[...] = arrays[n]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, std: Optional[float] = None):
        super().__init__()
        w = xavier_uniform(rng, (d_out, d_in), dtype) if std is None else trunc_normal(rng, (d_out, d_in), std, dtype)
        self.weight = self.param("weight", w)
        self.bias: Optional[Tensor] = self.param("bias", np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, padding: Optional[int] = None):
        super().__init__()
        self.padding = k // 2 if padding is None else padding
        self.weight = self.param("weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = self.param("weight", np.ones(d, dtype))
        self.bias = self.param("bias", np.zeros(d, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, c: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = self.param("weight", np.ones(c, dtype))
        self.bias = self.param("bias", np.zeros(c, dtype))
        self.running_mean = self.buffer("running_mean", np.zeros(c, dtype))
        self.running_var = self.buffer("running_var", np.ones(c, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm_2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class _Attention(Module):
    def __init__(self, d: int, rng, dtype):
        super().__init__()
        self.add("qkv", Linear(d, 3 * d, rng, dtype))
        self.add("proj", Linear(d, d, rng, dtype))


class _Mlp(Module):
    def __init__(self, d: int, hidden: int, rng, dtype):
        super().__init__()
        self.add("fc1", Linear(d, hidden, rng, dtype))
        self.add("fc2", Linear(hidden, d, rng, dtype))


class AttentionBlock(Module):
    """Pre-norm transformer block; parameter names match :func:`attention_block`."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        super().__init__()
        if d % heads:
            raise ValueError(f"token dimension {d} is not divisible by heads={heads}")
        self.heads = heads
        self.add("norm1", LayerNorm(d, dtype))
        self.add("attn", _Attention(d, rng, dtype))
        self.add("norm2", LayerNorm(d, dtype))
        self.add("mlp", _Mlp(d, mlp_ratio * d, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return attention_block(x, self.heads, self.param_dict())
