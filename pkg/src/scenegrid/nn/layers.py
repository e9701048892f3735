"""Layer objects: parameters plus a taped forward.

Layers register their Parameters (trainable) and buffers (running batch-norm
statistics) under dotted names so optimisers and checkpoints can address them.
"""

from __future__ import annotations

import numpy as np

from .tape import Node, Parameter, Tape, accumulate
from .sparse import (SparseTensor, build_kernel_map, kernel_offsets,
                     sparse_conv, sparse_conv_transposed)
from . import ops


class Module:
    """Minimal parameter/buffer registry with dotted-name flattening."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix + cname + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self._buffers.items():
            out[prefix + name] = (self, name)
        for cname, child in self._children.items():
            out.update(child.named_buffers(prefix + cname + "."))
        return {k: v for k, v in out.items()}

    def get_buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=self._buffers[name].dtype)

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def finalize_names(self) -> None:
        """Rewrite every Parameter's name to its dotted registry path."""
        for name, p in self.named_parameters().items():
            p.name = name

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class SubmanifoldConv(Module):
    """Kernel-1 or kernel-3 sparse convolution that keeps the coordinate set."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng, dtype):
        super().__init__()
        self.kernel_size = kernel_size
        k = len(kernel_offsets(kernel_size))
        self.weight = self.add_param(
            "weight", _kaiming(rng, (k, c_in, c_out), k * c_in, dtype))

    def __call__(self, tape: Tape, x: SparseTensor) -> SparseTensor:
        kmap, out_cs = build_kernel_map(x, self.kernel_size, stride=1)
        return sparse_conv(tape, x, self.weight, kmap, out_cs)


class StridedConvDown(Module):
    """Stride-2 sparse convolution: coordinates floor-halve, stride doubles."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng, dtype):
        super().__init__()
        self.kernel_size = kernel_size
        k = len(kernel_offsets(kernel_size))
        self.weight = self.add_param(
            "weight", _kaiming(rng, (k, c_in, c_out), k * c_in, dtype))

    def __call__(self, tape: Tape, x: SparseTensor) -> SparseTensor:
        kmap, out_cs = build_kernel_map(x, self.kernel_size, stride=2)
        return sparse_conv(tape, x, self.weight, kmap, out_cs)


class TransposedConvUp(Module):
    """Adjoint of a stride-2 downsampling onto cached fine coordinates."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng, dtype):
        super().__init__()
        self.kernel_size = kernel_size
        k = len(kernel_offsets(kernel_size))
        self.weight = self.add_param(
            "weight", _kaiming(rng, (k, c_in, c_out), k * c_in, dtype))

    def __call__(self, tape: Tape, x: SparseTensor, target_cs) -> SparseTensor:
        kmap, coarse_cs = build_kernel_map(target_cs, self.kernel_size, stride=2)
        if len(coarse_cs) != len(x) or not np.array_equal(coarse_cs.coords, x.coords):
            raise ValueError("input tensor does not live on the downsample of the target coords")
        return sparse_conv_transposed(tape, x, self.weight, kmap, target_cs)


class BatchNorm(Module):
    """Per-channel normalisation over all voxel rows (or batch rows)."""

    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, tape: Tape, x: Node, train: bool) -> Node:
        xv = x.value
        if len(xv) == 0:
            raise ValueError("batch_norm on an empty tensor")
        if train:
            mean = xv.mean(axis=0)
            var = xv.var(axis=0)
            self.set_buffer("running_mean",
                            (1 - self.momentum) * self.get_buffer("running_mean") + self.momentum * mean)
            self.set_buffer("running_var",
                            (1 - self.momentum) * self.get_buffer("running_var") + self.momentum * var)
        else:
            mean = self.get_buffer("running_mean")
            var = self.get_buffer("running_var")

        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (xv - mean) * inv_std
        out = Node(self.gamma.value * x_hat + self.beta.value)
        m = len(xv)
        gamma = self.gamma

        def grad_fn():
            g = out.grad
            if g is None:
                return
            accumulate(self.beta, g.sum(axis=0))
            accumulate(gamma, (g * x_hat).sum(axis=0))
            if train:
                gm = g.mean(axis=0)
                gxm = (g * x_hat).mean(axis=0)
                dx = gamma.value * inv_std * (g - gm - x_hat * gxm)
            else:
                dx = gamma.value * inv_std * g
            accumulate(x, dx)

        tape.record(grad_fn)
        return out

    def apply_sparse(self, tape: Tape, st: SparseTensor, train: bool) -> SparseTensor:
        return SparseTensor(st.coord_set, self(tape, st.feats, train))


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng, dtype, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", _kaiming(rng, (c_in, c_out), c_in, dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=dtype)) if bias else None

    def __call__(self, tape: Tape, x: Node) -> Node:
        out = ops.matmul(tape, x, self.weight)
        if self.bias is not None:
            out = ops.add_bias(tape, out, self.bias)
        return out
