"""Seeded, splittable random streams and runtime determinism settings."""

from __future__ import annotations

import os

import numpy as np

_DETERMINISTIC = False


def set_deterministic(flag: bool = True) -> None:
    """Force single-threaded BLAS so reductions run in a fixed order."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)
    _apply_thread_limit(1 if flag else _env_threads())


def is_deterministic() -> bool:
    return _DETERMINISTIC


def _env_threads() -> int | None:
    val = os.environ.get("UXNET_THREADS")
    return int(val) if val else None


def _apply_thread_limit(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        return
    threadpool_limits(limits=n)


class Rng:
    """PCG64 stream.  Same seed, same sequence on every platform."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._bitgen = np.random.PCG64(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def split(self, n: int = 1) -> list["Rng"]:
        """Independent child streams; advances this stream by one draw."""
        base = int(self.gen.integers(0, 2**63 - 1))
        kids = []
        for i in range(n):
            child = Rng.__new__(Rng)
            child.seed = base + i
            ss = np.random.SeedSequence([base, i])
            child._bitgen = np.random.PCG64(ss)
            child.gen = np.random.Generator(child._bitgen)
            kids.append(child)
        return kids

    def get_state(self) -> dict:
        return self._bitgen.state

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) resampled until every value lies within ``bound`` std."""
        out = self.gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self.gen.uniform(lo, hi, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, lo, hi=None, size=None):
        return self.gen.integers(lo, hi, size)

    def random(self, size=None):
        return self.gen.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)


_apply_thread_limit(_env_threads())
