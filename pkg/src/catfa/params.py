"""Named parameter storage with gradient slots, BN buffers and scoped views."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import RunningStats


@dataclass
class ParamStore:
    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    # batch-norm running statistics, keyed by the owning layer's prefix
    stats: dict = field(default_factory=dict)
    dtype: type = np.float32

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def scope(self, prefix: str = "") -> "Scope":
        return Scope(self, prefix)

    def n_params(self, prefix: str = "") -> int:
        return sum(p.size for k, p in self.params.items() if k.startswith(prefix))

    def state_arrays(self) -> dict:
        """Parameters plus BN buffers flattened to one name -> array mapping."""
        out = dict(self.params)
        for k, st in self.stats.items():
            out[f"{k}#running_mean"] = st.mean
            out[f"{k}#running_var"] = st.var
            out[f"{k}#count"] = np.array([st.count], dtype=self.dtype)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        stats: dict = {}
        for k, v in arrays.items():
            if "#" not in k:
                if k not in self.params or self.params[k].shape != v.shape:
                    raise KeyError(f"checkpoint entry {k!r} does not match the model")
                self.params[k][...] = v
                continue
            owner, kind = k.split("#")
            stats.setdefault(owner, {})[kind] = v
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        self.stats = {
            owner: RunningStats(d["running_mean"].astype(self.dtype),
                                d["running_var"].astype(self.dtype), int(d["count"][0]))
            for owner, d in stats.items()
        }


class Scope:
    """Prefix view over a ParamStore; what every block function receives."""

    __slots__ = ("store", "prefix")

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> np.ndarray:
        return self.store.params[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.store.params

    def child(self, name: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}{name}.")

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        return self.store.add(self.prefix + name, value)

    def accumulate(self, name: str, g) -> None:
        if g is not None:
            self.store.grads[self.prefix + name] += g

    def get_stats(self, name: str):
        return self.store.stats.get(self.prefix + name)

    def set_stats(self, name: str, stats: RunningStats) -> None:
        self.store.stats[self.prefix + name] = stats

    @property
    def dtype(self):
        return self.store.dtype


def trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by redrawing outliers."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_conv(scope: Scope, rng, name: str, c_out: int, c_in: int, k: int, bias=True, std=0.02):
    scope.add(f"{name}.w", trunc_normal(rng, (c_out, c_in, k, k), std))
    if bias:
        scope.add(f"{name}.b", np.zeros(c_out))


def init_dwconv(scope: Scope, rng, name: str, c: int, k: int, std=0.02):
    scope.add(f"{name}.w", trunc_normal(rng, (c, 1, k, k), std))
    scope.add(f"{name}.b", np.zeros(c))


def init_linear(scope: Scope, rng, name: str, n_in: int, n_out: int, std=0.02):
    scope.add(f"{name}.w", trunc_normal(rng, (n_in, n_out), std))
    scope.add(f"{name}.b", np.zeros(n_out))


def init_norm(scope: Scope, name: str, c: int):
    scope.add(f"{name}.g", np.ones(c))
    scope.add(f"{name}.b", np.zeros(c))
