"""Named, shaped parameter tensors with per-path freeze flags.

Parameter paths follow ``component/layer/kind`` (e.g. ``q0_12/head/W_mu``);
the naming is part of the checkpoint contract.
"""

from __future__ import annotations

from typing import Dict, Iterable, Mapping, Union

import numpy as np

from .autodiff import Var
from .errors import ShapeMismatch

ParamsLike = Union["ParameterStore", Mapping[str, Var]]


class ParameterStore:
    def __init__(self):
        self._tensors: Dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        old = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ShapeMismatch(f"parameter {name!r}: cannot assign shape "
                                f"{value.shape} over {old.shape}")
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def freeze(self, prefix: str) -> None:
        """Freeze every parameter whose path starts with ``prefix``."""
        hit = False
        for name in self._tensors:
            if name == prefix or name.startswith(prefix + "/"):
                self._frozen.add(name)
                hit = True
        if not hit:
            raise KeyError(f"no parameters under prefix {prefix!r}")

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def frozen_names(self) -> list[str]:
        return sorted(self._frozen)

    def set_frozen(self, names: Iterable[str]) -> None:
        self._frozen = set(names)
        missing = self._frozen - set(self._tensors)
        if missing:
            raise KeyError(f"frozen flags for unknown parameters: {sorted(missing)}")

    def as_vars(self) -> Dict[str, Var]:
        """Fresh graph leaves for one forward/backward pass.

        Frozen parameters become constants, so no gradient is ever
        computed for them, let alone applied.
        """
        return {name: Var(value, requires_grad=name not in self._frozen)
                for name, value in self._tensors.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self._tensors.items():
            out.add(name, value.copy())
        out._frozen = set(self._frozen)
        return out

    def n_scalars(self, prefix: str = "") -> int:
        return sum(v.size for n, v in self._tensors.items() if n.startswith(prefix))

    def items(self):
        return self._tensors.items()


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Fan-in-scaled uniform init used for every affine weight."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
