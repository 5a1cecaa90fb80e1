"""Parameter creation and the linear/norm building blocks shared by the models."""

from __future__ import annotations

import numpy as np

from . import numerics as nm


class ParamFactory:
    """Creates named parameters in a deterministic order from one RNG.

    Registration order defines RNG consumption, so a fixed seed always yields
    the same initialization.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, nm.Parameter] = {}

    def _register(self, p: nm.Parameter) -> nm.Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def weight(self, name: str, fan_in: int, fan_out: int) -> nm.Parameter:
        std = 1.0 / np.sqrt(fan_in)
        return self._register(nm.Parameter(name, self.rng.normal(0.0, std, (fan_in, fan_out))))

    def normal(self, name: str, shape: tuple[int, ...], std: float) -> nm.Parameter:
        return self._register(nm.Parameter(name, self.rng.normal(0.0, std, shape)))

    def zeros(self, name: str, shape: tuple[int, ...]) -> nm.Parameter:
        return self._register(nm.Parameter(name, np.zeros(shape)))

    def ones(self, name: str, shape: tuple[int, ...]) -> nm.Parameter:
        return self._register(nm.Parameter(name, np.ones(shape)))

    def scalar(self, name: str, value: float) -> nm.Parameter:
        return self._register(nm.Parameter(name, np.array(float(value))))


class Linear:
    def __init__(self, factory: ParamFactory, name: str, d_in: int, d_out: int):
        self.w = factory.weight(f"{name}.w", d_in, d_out)
        self.b = factory.zeros(f"{name}.b", (d_out,))

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        return nm.add(nm.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, factory: ParamFactory, name: str, dim: int):
        self.gamma = factory.ones(f"{name}.g", (dim,))
        self.beta = factory.zeros(f"{name}.b", (dim,))

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        return nm.layer_norm(x, self.gamma, self.beta)

    def set_zero(self) -> None:
        self.gamma.data[:] = 0.0
        self.beta.data[:] = 0.0


def make_mha(factory: ParamFactory, name: str, d_model: int, d_attn: int) -> nm.MhaParams:
    return nm.MhaParams(
        wq=factory.weight(f"{name}.wq", d_model, d_attn),
        bq=factory.zeros(f"{name}.bq", (d_attn,)),
        wk=factory.weight(f"{name}.wk", d_model, d_attn),
        wv=factory.weight(f"{name}.wv", d_model, d_attn),
        bv=factory.zeros(f"{name}.bv", (d_attn,)),
        wo=factory.weight(f"{name}.wo", d_attn, d_model),
        bo=factory.zeros(f"{name}.bo", (d_model,)),
    )
