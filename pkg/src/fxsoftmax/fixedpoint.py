"""Plaintext simulation of signed fixed-point arithmetic.

A real ``x`` is held as the integer ``round(x * 2**f)`` confined to a ``k``-bit
signed range.  Addition and subtraction are exact.  Multiplication and
division compute the exact wide result and then drop ``f`` fraction bits with
either nearest rounding (ties away from zero) or probabilistic rounding, where
the result rounds up with probability equal to the discarded residue.

Out-of-range results saturate to the nearest end of the range and are counted
on the owning :class:`FixedPoint` context, so runaway training is observable
instead of silently wrapping.

Array methods of :class:`FixedPoint` operate on ``int64`` numpy arrays of raw
values; :class:`Fix` and the module-level functions are the scalar interface.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_FRACTION_BITS = 16
DEFAULT_TOTAL_BITS = 48

# Integers up to 2**53 are exact in float64.
_FLOAT_MANTISSA_BITS = 53
_INT64_MAX = np.iinfo(np.int64).max


class RoundingMode(enum.Enum):
    NEAREST = "nearest"
    PROBABILISTIC = "prob"

    @classmethod
    def parse(cls, value: "str | RoundingMode") -> "RoundingMode":
        if isinstance(value, cls):
            return value
        aliases = {"probabilistic": "prob", "stochastic": "prob"}
        return cls(aliases.get(value, value))


class FixedPointError(ArithmeticError):
    pass


class FixedPointZeroDivision(FixedPointError, ZeroDivisionError):
    pass


class FormatMismatch(FixedPointError, ValueError):
    """Raised when values with different fraction-bit counts meet."""


class RandomStream:
    """Seeded source of the random bits consumed by probabilistic rounding.

    Streams with the same ``seed`` and ``key`` produce the same sequence.
    Independent substreams for evaluation, initialisation or shuffling are
    obtained with :meth:`derive`, which never advances the parent.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *key: int) -> "RandomStream":
        return RandomStream(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def bits(self, shape, nbits: int) -> np.ndarray:
        """Uniform integers in ``[0, 2**nbits)``."""
        return self._gen.integers(0, 1 << nbits, size=shape, dtype=np.int64)

    def below(self, high: np.ndarray) -> np.ndarray:
        """Uniform integers in ``[0, high)`` elementwise, ``high >= 1``."""
        high = np.asarray(high, dtype=np.int64)
        return self._gen.integers(0, high, dtype=np.int64)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, key={self.key})"


def _bitlen(v: int) -> int:
    return int(v).bit_length()


def _limbs(a: np.ndarray, width: int, count: int) -> list[np.ndarray]:
    """Signed base-``2**width`` digits of ``a`` as float64 arrays."""
    sign = np.sign(a)
    mag = np.abs(a)
    mask = (1 << width) - 1
    return [(sign * ((mag >> (width * i)) & mask)).astype(np.float64) for i in range(count)]


def exact_matmul(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact integer product ``a @ b`` using float64 BLAS on limbs.

    Returns ``(product, overflow)`` where ``product`` is int64 and ``overflow``
    is a boolean mask of entries whose true value does not fit in int64; those
    entries hold ``+-INT64_MAX`` with the sign of the true value.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = a.shape[-1]
    out_shape = a.shape[:-1] + b.shape[1:]
    amax = int(np.abs(a).max(initial=0))
    bmax = int(np.abs(b).max(initial=0))
    if amax == 0 or bmax == 0 or n == 0:
        return np.zeros(out_shape, dtype=np.int64), np.zeros(out_shape, dtype=bool)

    # Every partial sum of limb products must stay below 2**53.
    width = (_FLOAT_MANTISSA_BITS - _bitlen(n)) // 2
    na = -(-_bitlen(amax) // width)
    nb = -(-_bitlen(bmax) // width)
    la = _limbs(a, width, na)
    lb = _limbs(b, width, nb)

    if amax * bmax * n < 2**62:
        acc = np.zeros(out_shape, dtype=np.int64)
        for i, ai in enumerate(la):
            for j, bj in enumerate(lb):
                term = np.rint(ai @ bj).astype(np.int64)
                shift = width * (i + j)
                acc += term << shift if shift else term
        return acc, np.zeros(out_shape, dtype=bool)

    # Wide case: exact value modulo 2**64 plus a float estimate that decides
    # whether it fits in int64.
    with np.errstate(over="ignore"):
        wrapped = np.zeros(out_shape, dtype=np.uint64)
        for i, ai in enumerate(la):
            for j, bj in enumerate(lb):
                shift = width * (i + j)
                if shift >= 64:
                    continue
                term = np.rint(ai @ bj).astype(np.int64).view(np.uint64)
                wrapped += term * np.uint64(1 << shift)
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    est = af @ bf
    err = (np.abs(af) @ np.abs(bf)) * (n + 2) * 2.0**-52 + 1.0
    limit = 2.0**63
    fits = np.abs(est) + err < limit
    certain_over = np.abs(est) - err >= limit
    product = wrapped.view(np.int64).copy()
    overflow = ~fits

    ambiguous = ~fits & ~certain_over
    if ambiguous.any():
        ao = a.astype(object)
        bo = b.astype(object)
        idx = np.argwhere(ambiguous)
        for pos in idx:
            pos = tuple(pos)
            row = ao[pos[:-1]] if a.ndim > 1 else ao
            col = bo[:, pos[-1]] if b.ndim > 1 else bo
            exact = int(np.dot(row, col))
            if -(2**63) <= exact <= _INT64_MAX:
                product[pos] = exact
                overflow[pos] = False
            else:
                est[pos] = float(exact)
    product[overflow] = np.where(est[overflow] > 0, _INT64_MAX, -_INT64_MAX)
    return product, overflow


class FixedPoint:
    """Fixed-point number context: format, rounding mode and event counters.

    ``overflows`` counts saturated results, ``underflows`` counts values
    flushed to zero by range-limited operations (the exponential), and
    ``truncations`` counts rounding steps.  Counters are sticky until
    :meth:`reset_counters`.
    """

    def __init__(
        self,
        f: int = DEFAULT_FRACTION_BITS,
        k: int = DEFAULT_TOTAL_BITS,
        mode: RoundingMode | str = RoundingMode.NEAREST,
        rng: RandomStream | None = None,
    ):
        if not 0 < f < k <= 63:
            raise ValueError(f"need 0 < f < k <= 63, got f={f}, k={k}")
        self.f = f
        self.k = k
        self.mode = RoundingMode.parse(mode)
        if self.mode is RoundingMode.PROBABILISTIC and rng is None:
            raise ValueError("probabilistic rounding needs a RandomStream")
        self.rng = rng
        self.one = 1 << f
        self.raw_max = (1 << (k - 1)) - 1
        self.raw_min = -(1 << (k - 1))
        self.reset_counters()

    def reset_counters(self) -> None:
        self.overflows = 0
        self.underflows = 0
        self.truncations = 0

    def counters(self) -> dict:
        return {
            "overflows": self.overflows,
            "underflows": self.underflows,
            "truncations": self.truncations,
        }

    @property
    def resolution(self) -> float:
        return 2.0**-self.f

    def __repr__(self) -> str:
        return f"FixedPoint(f={self.f}, k={self.k}, mode={self.mode.value})"

    # -- conversion ---------------------------------------------------------

    def encode(self, x) -> np.ndarray:
        """Round reals to raw values, ties away from zero, saturating."""
        scaled = np.asarray(x, dtype=np.float64) * float(self.one)
        mag = np.abs(scaled)
        whole = np.floor(mag)
        # floor(|y| + 0.5) misrounds just below one half; compare the
        # exact remainder instead.
        rounded = whole + (mag - whole >= 0.5)
        rounded = np.copysign(rounded, scaled)
        over = (rounded > self.raw_max) | (rounded < self.raw_min) | np.isnan(rounded)
        if over.any():
            self.overflows += int(over.sum())
            rounded = np.where(np.isnan(rounded), 0.0, rounded)
            rounded = np.clip(rounded, self.raw_min, self.raw_max)
        return rounded.astype(np.int64)

    def decode(self, raw) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / float(self.one)

    def constant(self, x: float) -> int:
        """Encode a scalar constant without touching the counters."""
        saved = self.overflows
        raw = int(self.encode(x))
        if self.overflows != saved:
            self.overflows = saved
            raise OverflowError(f"constant {x} is not representable with k={self.k}, f={self.f}")
        return raw

    def saturate(self, raw) -> np.ndarray:
        raw = np.asarray(raw)
        if raw.dtype == object:
            clipped = np.clip(raw, self.raw_min, self.raw_max)
            self.overflows += int(np.count_nonzero(clipped != raw))
            return clipped.astype(np.int64)
        over = (raw > self.raw_max) | (raw < self.raw_min)
        n = int(np.count_nonzero(over))
        if n:
            self.overflows += n
            raw = np.clip(raw, self.raw_min, self.raw_max)
        return raw.astype(np.int64, copy=False)

    # -- exact operations ---------------------------------------------------

    def add(self, a, b) -> np.ndarray:
        return self.saturate(np.add(a, b, dtype=np.int64))

    def sub(self, a, b) -> np.ndarray:
        return self.saturate(np.subtract(a, b, dtype=np.int64))

    def neg(self, a) -> np.ndarray:
        return self.saturate(np.negative(np.asarray(a, dtype=np.int64)))

    def sum(self, a, axis=None, keepdims=False) -> np.ndarray:
        return self.saturate(np.sum(np.asarray(a, dtype=np.int64), axis=axis, keepdims=keepdims))

    def lt(self, a, b) -> np.ndarray:
        return np.less(a, b)

    def relu(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=np.int64)
        return np.where(a > 0, a, 0)

    # -- truncation ---------------------------------------------------------

    def truncate(self, product, shift: int | None = None) -> np.ndarray:
        """Drop ``shift`` (default ``f``) low bits of an exact int64 product."""
        shift = self.f if shift is None else shift
        product = np.asarray(product, dtype=np.int64)
        self.truncations += product.size
        q = product >> shift
        residue = product & ((1 << shift) - 1)
        if self.mode is RoundingMode.NEAREST:
            half = 1 << (shift - 1)
            up = (residue > half) | ((residue == half) & (product >= 0))
        else:
            up = self.rng.bits(product.shape, shift) < residue
        return q + up

    def _truncate_object(self, product: np.ndarray) -> np.ndarray:
        """Big-integer twin of :meth:`truncate` for object arrays."""
        self.truncations += product.size
        scale = 1 << self.f
        q = product // scale
        residue = product - q * scale
        if self.mode is RoundingMode.NEAREST:
            half = scale // 2
            up = (residue > half) | ((residue == half) & (product >= 0))
        else:
            up = self.rng.bits(product.shape, self.f) < residue.astype(np.int64)
        return q + up.astype(object)

    # -- multiplication and division ----------------------------------------

    def mul(self, a, b) -> np.ndarray:
        """Elementwise product with one truncation per entry."""
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
        if a.size == 0:
            return np.zeros(a.shape, dtype=np.int64)
        amax = int(np.abs(a).max())
        bmax = int(np.abs(b).max())
        if amax * bmax < 2**62:
            return self.saturate(self.truncate(a * b))
        wide = np.abs(a.astype(np.float64) * b.astype(np.float64)) >= 2.0**61
        out = np.empty(a.shape, dtype=np.int64)
        small = ~wide
        if small.any():
            out[small] = self.truncate(a[small] * b[small])
        out[wide] = self.saturate(self._truncate_object(a[wide].astype(object) * b[wide].astype(object)))
        return self.saturate(out)

    def matmul(self, a, b) -> np.ndarray:
        """Matrix product, exact inner sums, one truncation per output entry."""
        product, overflow = exact_matmul(a, b)
        out = self.truncate(product)
        if overflow.any():
            self.overflows += int(overflow.sum())
            out = np.where(overflow, np.where(product > 0, self.raw_max, self.raw_min), out)
        return self.saturate(out)

    def div(self, a, b) -> np.ndarray:
        """Elementwise ``a / b``: exact rational quotient, then rounded."""
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
        if np.any(b == 0):
            raise FixedPointZeroDivision("fixed-point division by zero")
        if a.size == 0:
            return np.zeros(a.shape, dtype=np.int64)
        self.truncations += a.size
        sign = np.where((a < 0) != (b < 0), -1, 1)
        den = np.abs(b)
        if int(np.abs(a).max()) < 1 << (62 - self.f):
            num = np.abs(a) << self.f
        else:
            num = np.abs(a).astype(object) * (1 << self.f)
        q = num // den
        rem = num - q * den
        if self.mode is RoundingMode.NEAREST:
            # ties away from zero on the magnitude
            up = 2 * rem >= den
        else:
            # floor of the signed quotient, then round up with prob. frac
            neg = sign < 0
            has_rem = rem != 0
            q = np.where(neg & has_rem, q + 1, q)
            rem = np.where(neg & has_rem, den - rem, rem)
            q = np.where(neg, -q, q)
            up = self.rng.below(den) < rem.astype(np.int64)
            return self.saturate(q + up)
        return self.saturate(sign * (q + up))


@dataclass(frozen=True)
class Fix:
    """A scalar fixed-point value: ``raw / 2**f``.

    ``overflow`` is sticky: it is set on any result derived from a saturated
    operand or produced by a saturating operation.
    """

    raw: int
    f: int = DEFAULT_FRACTION_BITS
    overflow: bool = False

    @property
    def value(self) -> float:
        return self.raw / (1 << self.f)

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        flag = ", overflow" if self.overflow else ""
        return f"Fix({self.value!r}, raw={self.raw}, f={self.f}{flag})"


def _ctx(f: int, k: int, mode=RoundingMode.NEAREST, rng=None) -> FixedPoint:
    return FixedPoint(f=f, k=k, mode=mode, rng=rng)


def _check(a: Fix, b: Fix) -> None:
    if a.f != b.f:
        raise FormatMismatch(f"fraction bits differ: {a.f} vs {b.f}")


def _wrap(ctx: FixedPoint, raw, *operands: Fix) -> Fix:
    flagged = ctx.overflows > 0 or any(op.overflow for op in operands)
    return Fix(int(np.asarray(raw).reshape(())), ctx.f, flagged)


def encode(x: float, f: int = DEFAULT_FRACTION_BITS, k: int = DEFAULT_TOTAL_BITS) -> Fix:
    ctx = _ctx(f, k)
    return _wrap(ctx, ctx.encode(x))


def decode(a: Fix) -> float:
    return a.value


def add(a: Fix, b: Fix, k: int = DEFAULT_TOTAL_BITS) -> Fix:
    _check(a, b)
    ctx = _ctx(a.f, k)
    return _wrap(ctx, ctx.add(a.raw, b.raw), a, b)


def sub(a: Fix, b: Fix, k: int = DEFAULT_TOTAL_BITS) -> Fix:
    _check(a, b)
    ctx = _ctx(a.f, k)
    return _wrap(ctx, ctx.sub(a.raw, b.raw), a, b)


def mul(
    a: Fix,
    b: Fix,
    mode: RoundingMode | str = RoundingMode.NEAREST,
    rng: RandomStream | None = None,
    k: int = DEFAULT_TOTAL_BITS,
) -> Fix:
    _check(a, b)
    ctx = _ctx(a.f, k, mode, rng)
    return _wrap(ctx, ctx.mul(a.raw, b.raw), a, b)


def div(
    a: Fix,
    b: Fix,
    mode: RoundingMode | str = RoundingMode.NEAREST,
    rng: RandomStream | None = None,
    k: int = DEFAULT_TOTAL_BITS,
) -> Fix:
    _check(a, b)
    ctx = _ctx(a.f, k, mode, rng)
    return _wrap(ctx, ctx.div(a.raw, b.raw), a, b)


def lt(a: Fix, b: Fix) -> int:
    _check(a, b)
    return int(a.raw < b.raw)


def relu(a: Fix) -> Fix:
    return Fix(a.raw if a.raw > 0 else 0, a.f, a.overflow)
