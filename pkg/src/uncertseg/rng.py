"""Deterministic, counter-based random number generation.

Every stream is a splitmix64 sequence: draw ``i`` of a stream with seed ``s``
is ``mix64(s + (i + 1) * GOLDEN)`` where ``mix64`` is the splitmix64
finalizer (an xorshift-multiply mix). Because each output depends only on
``(seed, index)``, the state is a plain integer counter, draws vectorize over
uint64 numpy arrays, and the integer path is bit-identical across platforms.

``uniform``/``permutation``/``geometric`` stay on the integer path plus
IEEE-exact arithmetic; ``normal`` additionally uses libm (log/cos) and is
therefore bit-reproducible per platform rather than across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN_INT = 0x9E3779B97F4A7C15
_GOLDEN = np.uint64(_GOLDEN_INT)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix64_int(x: int) -> int:
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngState:
    """A seeded stream position: (64-bit seed, draw counter).

    Two instances with equal seed and counter produce bit-identical draw
    sequences. ``derive(i)`` yields an uncorrelated sibling stream with seed
    ``mix64(seed + (i + 1) * GOLDEN)``. The mixing matters: a plain
    ``seed ^ i`` derivation would hand nearby root seeds almost the same
    *set* of sibling streams, silently correlating runs that must be
    independent (per-sample MC streams, per-volume generation, per-seed
    experiments).
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngState(seed=0x{self.seed:016x}, counter={self.counter})"

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def derive(self, index: int) -> "RngState":
        """Independent stream for ``index``, with a fresh counter.

        Distinct indices map to distinct seeds (the mix is a bijection), and
        two different roots can share at most one derived stream.
        """
        step = ((int(index) & _MASK64) + 1) * _GOLDEN_INT
        return RngState(_mix64_int(self.seed + step))

    def draw_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit draws, advancing the counter by ``n``."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 samples in [0, 1) with 53-bit resolution."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.draw_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal samples via Box-Muller on paired uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self.draw_u64(2 * m)
        # u1 in (0, 1] so log(u1) is finite
        u1 = ((raw[:m] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        g = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return g.reshape(shape) if shape else float(g[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n) (argsort of u64 keys)."""
        return np.argsort(self.draw_u64(n), kind="stable")

    def integer(self, bound: int) -> int:
        """One integer in [0, bound). Modulo bias is negligible for bound << 2^64."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.draw_u64(1)[0] % np.uint64(bound))

    def geometric_run(self, continue_prob: float, cap: int) -> int:
        """Run length >= 1 with geometric tail, truncated at ``cap``.

        Built from uniform comparisons only, so it stays on the
        platform-independent path.
        """
        length = 1
        while length < cap and self.uniform(()) < continue_prob:
            length += 1
        return length
