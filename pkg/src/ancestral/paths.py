"""Piecewise-linear cadlag trait paths with a constant slope between jumps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class TraitPath:
    """Path on ``[t0, t1]`` starting at ``x0`` with jumps to ``jump_values``.

    Between jumps the value moves at ``slope``.  Evaluation beyond ``t1`` is
    frozen at the value reached at ``t1``; before ``t0`` it returns ``x0``.
    """

    t0: float
    t1: float
    x0: float
    jump_times: np.ndarray
    jump_values: np.ndarray
    slope: float

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float).reshape(-1)
        jv = np.asarray(self.jump_values, dtype=float).reshape(-1)
        if jt.shape != jv.shape:
            raise ValueError("jump_times and jump_values differ in length")
        if jt.size and (np.any(np.diff(jt) <= 0) or jt[0] < self.t0 or jt[-1] > self.t1):
            raise ValueError("jump times must be strictly increasing inside [t0, t1]")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_values", jv)

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    def _at(self, s, side):
        s = np.clip(np.asarray(s, dtype=float), self.t0, self.t1)
        k = np.searchsorted(self.jump_times, s, side=side) - 1
        has = k >= 0
        kk = np.where(has, k, 0)
        if self.n_jumps:
            base_v = np.where(has, self.jump_values[kk], self.x0)
            base_t = np.where(has, self.jump_times[kk], self.t0)
        else:
            base_v = np.full(s.shape, self.x0)
            base_t = np.full(s.shape, self.t0)
        out = base_v + self.slope * (s - base_t)
        return out if out.ndim else float(out)

    def evaluate(self, s):
        """Right-continuous value at ``s``."""
        return self._at(s, "right")

    __call__ = evaluate

    def left_limit(self, s):
        """Value just before ``s`` (equals ``evaluate`` away from jumps)."""
        return self._at(s, "left")

    @property
    def end_value(self) -> float:
        return self.evaluate(self.t1)


def reverse_path(path: TraitPath, T) -> TraitPath:
    """Left-limit time reversal on ``[0, T]``: ``R(p)(s) = p((T - s)-)``, ``R(p)(T) = p(0)``.

    A jump ``a -> b`` at ``t`` becomes a jump ``b -> a`` at ``T - t`` and the
    slope changes sign.
    """
    if path.t0 != 0.0:
        raise ValueError("reverse_path expects a path starting at time 0")
    if path.t1 < T:
        raise ValueError(f"path ends at {path.t1} < T={T}")
    keep = (path.jump_times > 0.0) & (path.jump_times < T)
    jt = path.jump_times[keep]
    pre = np.atleast_1d(path.left_limit(jt)) if jt.size else np.empty(0)
    return TraitPath(0.0, float(T), float(path.left_limit(T)), (T - jt)[::-1], pre[::-1],
                     -path.slope)


class PathBatch:
    """Many paths on a common ``[t0, t1]`` stored as flat ragged arrays.

    ``jump_path[k]`` is the path index of jump ``k``; jumps are sorted by path
    and then by time.
    """

    def __init__(self, t0, t1, x0, jump_path, jump_times, jump_values, slope):
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.x0 = np.asarray(x0, dtype=float).reshape(-1)
        jp = np.asarray(jump_path, dtype=np.int64).reshape(-1)
        jt = np.asarray(jump_times, dtype=float).reshape(-1)
        jv = np.asarray(jump_values, dtype=float).reshape(-1)
        order = np.lexsort((jt, jp))
        self.jump_path, self.jump_times, self.jump_values = jp[order], jt[order], jv[order]
        self.slope = float(slope)
        counts = np.bincount(self.jump_path, minlength=self.n)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])

    @property
    def n(self) -> int:
        return self.x0.size

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> TraitPath:
        a, b = self.offsets[i], self.offsets[i + 1]
        return TraitPath(self.t0, self.t1, float(self.x0[i]), self.jump_times[a:b],
                         self.jump_values[a:b], self.slope)

    def __iter__(self):
        return (self[i] for i in range(self.n))

    def n_jumps(self) -> np.ndarray:
        return np.diff(self.offsets)

    def _at(self, s, strict):
        s = min(max(float(s), self.t0), self.t1)
        before = self.jump_times < s if strict else self.jump_times <= s
        cnt = np.bincount(self.jump_path[before], minlength=self.n)
        has = cnt > 0
        last = np.where(has, self.offsets[:-1] + cnt - 1, 0)
        if self.jump_times.size:
            base_v = np.where(has, self.jump_values[last], self.x0)
            base_t = np.where(has, self.jump_times[last], self.t0)
        else:
            base_v, base_t = self.x0.copy(), np.full(self.n, self.t0)
        return base_v + self.slope * (s - base_t)

    def evaluate(self, s) -> np.ndarray:
        """Values of every path at time ``s``."""
        return self._at(s, False)

    def left_limit(self, s) -> np.ndarray:
        return self._at(s, True)

    def select(self, mask) -> "PathBatch":
        idx = np.flatnonzero(mask)
        remap = -np.ones(self.n, dtype=np.int64)
        remap[idx] = np.arange(idx.size)
        keep = remap[self.jump_path] >= 0
        return PathBatch(self.t0, self.t1, self.x0[idx], remap[self.jump_path[keep]],
                         self.jump_times[keep], self.jump_values[keep], self.slope)

    def reverse(self, T) -> "PathBatch":
        """``reverse_path`` applied to every member."""
        if self.t0 != 0.0 or self.t1 < T:
            raise ValueError("batch must cover [0, T]")
        keep = (self.jump_times > 0.0) & (self.jump_times < T)
        jp = self.jump_path[keep]
        jt = self.jump_times[keep]
        # pre-jump value: previous jump value (or x0) drifted to the jump time
        idx = np.flatnonzero(keep)
        prev_same = (idx > 0) & (self.jump_path[np.maximum(idx - 1, 0)] == jp)
        prev_v = np.where(prev_same, self.jump_values[np.maximum(idx - 1, 0)], self.x0[jp])
        prev_t = np.where(prev_same, self.jump_times[np.maximum(idx - 1, 0)], self.t0)
        # dropped jumps at t=0 still set the value from which later segments start
        pre = prev_v + self.slope * (jt - prev_t)
        return PathBatch(0.0, float(T), self.left_limit(T), jp, T - jt, pre, -self.slope)

    @classmethod
    def from_paths(cls, paths) -> "PathBatch":
        paths = list(paths)
        if not paths:
            raise ValueError("need at least one path")
        t0, t1, slope = paths[0].t0, paths[0].t1, paths[0].slope
        jp = np.concatenate([np.full(p.n_jumps, i) for i, p in enumerate(paths)]).astype(np.int64)
        jt = np.concatenate([p.jump_times for p in paths])
        jv = np.concatenate([p.jump_values for p in paths])
        return cls(t0, t1, [p.x0 for p in paths], jp, jt, jv, slope)

    def rows(self, times):
        """``(path_id, t, value)`` triples on a common time grid, for CSV output."""
        times = np.asarray(times, dtype=float)
        vals = np.stack([self.evaluate(t) for t in times], axis=1)
        for i in range(self.n):
            for t, v in zip(times, vals[i]):
                yield i, float(t), float(v)
