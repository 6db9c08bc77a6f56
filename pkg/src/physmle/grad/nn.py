"""Parameter containers and the plain layers the backbone is assembled from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module. ``requires_grad=False`` means frozen."""

    __slots__ = ("category",)

    def __init__(self, data, requires_grad=True, category="other"):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)
        self.category = category


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix=""):
        for name, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {f"param/{k}": p.data.copy() for k, p in self.named_parameters()}
        state.update({f"buffer/{k}": b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            value = np.asarray(state[f"param/{k}"], dtype=np.float32)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {value.shape} vs {p.data.shape}")
            p.data = value.copy()
        for k, b in buffers.items():
            b[...] = state[f"buffer/{k}"]


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, bias=False, rng=None,
                 trainable=True, category="conv", init_std=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = ops._pair(kernel)
        shape = (c_out, c_in, kh, kw)
        if init_std is None:
            w = he_normal(rng, shape, c_in * kh * kw)
        else:
            w = rng.standard_normal(shape) * init_std
        self.weight = Parameter(w, requires_grad=trainable, category=category)
        self.bias = Parameter(np.zeros(c_out), requires_grad=trainable, category=category) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        out = ops.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, rng=None, init_std=None, bias_init=0.0, category="head"):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.standard_normal((d_in, d_out)) * std, category=category)
        self.bias = Parameter(np.full(d_out, bias_init), category=category) if bias else None

    def forward(self, x):
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, category="norm"):
        self.gamma = Parameter(np.ones(channels), category=category)
        self.beta = Parameter(np.zeros(channels), category=category)
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=np.float32),
            "running_var": np.ones(channels, dtype=np.float32),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5, category="router"):
        self.gamma = Parameter(np.ones(channels), category=category)
        self.beta = Parameter(np.zeros(channels), category=category)
        self.eps = eps

    def forward(self, x):
        return ops.instance_norm(x, self.gamma, self.beta, self.eps)
