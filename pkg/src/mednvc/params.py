"""Named parameter collections and initializers."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Mapping, MutableMapping, Optional

import numpy as np

from .diffcore import Tensor, default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +/- 2 std."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or default_dtype())


def zeros(shape, dtype=None) -> np.ndarray:
    return np.zeros(shape, dtype=dtype or default_dtype())


def ones(shape, dtype=None) -> np.ndarray:
    return np.ones(shape, dtype=dtype or default_dtype())


class ParamScope:
    """Read-only view of a :class:`ModelParams` under a name prefix."""

    def __init__(self, params: "ModelParams", prefix: str):
        self._params = params
        self.prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self._params[self.prefix + key]

    def __contains__(self, key: str) -> bool:
        return self.prefix + key in self._params

    def get(self, key: str, default=None):
        return self._params.get(self.prefix + key, default)

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self._params, f"{self.prefix}{name}.")


class ModelParams(MutableMapping):
    """Ordered ``name -> Tensor`` mapping covering every trainable tensor.

    Names are dotted paths (``encoder.stages.0.0.dwconv.weight``); the first
    component identifies the sub-model (``encoder``, ``decoder``, ``fusion``,
    ``head``, ``numeric``) and drives stage transfer between checkpoints.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._t: "OrderedDict[str, Tensor]" = OrderedDict()
        for k, v in (tensors or {}).items():
            self[k] = v

    def __getitem__(self, key: str) -> Tensor:
        try:
            return self._t[key]
        except KeyError:
            raise KeyError(f"no parameter named {key!r}") from None

    def __setitem__(self, key: str, value) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        value.name = key
        self._t[key] = value

    def __delitem__(self, key: str) -> None:
        del self._t[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def scope(self, name: str) -> ParamScope:
        return ParamScope(self, name + ".")

    def with_prefix(self, prefix: str) -> "ModelParams":
        return ModelParams({k: v for k, v in self._t.items() if k.startswith(prefix + ".")})

    def groups(self) -> list:
        return sorted({k.split(".", 1)[0] for k in self._t})

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._t.values()))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self._t.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy()) for k, v in self._t.items()})

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def update(self, other=(), **kw) -> None:  # keep insertion order of ``other``
        items = other.items() if hasattr(other, "items") else other
        for k, v in items:
            self[k] = v
        for k, v in kw.items():
            self[k] = v

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_parameters()} values, groups={self.groups()})"


def prefixed(prefix: str, tensors: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}
