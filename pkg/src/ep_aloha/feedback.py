"""Downlink feedback after the preamble phase, in full and reduced form.

Wire layout (normative for this package):

* full:    one field per channel, channel 1 first, each ``field_width(max_k)``
           bits, most significant bit first.
* reduced: ``M`` bitmap bits in channel order (``b_m = 1`` iff ``k_m == 1``),
           then ``W`` in a ``field_width(max_W)``-bit MSB-first field.

Bit strings are ``str`` of ``'0'``/``'1'``.  On the air they are packed into
bytes MSB-first and zero-padded at the end; :func:`unpack_bits` rejects
nonzero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

from .analytic import field_width


@dataclass(frozen=True)
class FullFeedback:
    counts: tuple[int, ...]

    @property
    def M(self) -> int:
        return len(self.counts)

    def to_reduced(self) -> "ReducedFeedback":
        bitmap = tuple(int(k == 1) for k in self.counts)
        return ReducedFeedback(bitmap, sum(self.counts) - sum(bitmap))


@dataclass(frozen=True)
class ReducedFeedback:
    bitmap: tuple[int, ...]
    W: int

    @property
    def M(self) -> int:
        return len(self.bitmap)


@dataclass(frozen=True)
class UserView:
    """What a user who sent its preamble on ``channel`` learns from the feedback."""

    group: str  # "I" or "II"
    free_channels: tuple[int, ...]  # 1-based, channels with b_m == 0
    L_free: int
    W: int


def _field(value: int, width: int) -> str:
    return format(value, f"0{width}b")


def encode_full(counts, max_k: int) -> str:
    width = field_width(max_k)
    out = []
    for m, k in enumerate(counts, start=1):
        k = int(k)
        if not 0 <= k <= max_k:
            raise ValueError(f"count {k} on channel {m} outside 0..{max_k}")
        out.append(_field(k, width))
    return "".join(out)


def decode_full(bits: str, M: int, max_k: int) -> FullFeedback:
    width = field_width(max_k)
    if len(bits) != M * width:
        raise ValueError(f"expected {M * width} bits, got {len(bits)}")
    _check_bits(bits)
    counts = tuple(int(bits[i : i + width], 2) for i in range(0, M * width, width))
    for m, k in enumerate(counts, start=1):
        if k > max_k:
            raise ValueError(f"decoded count {k} on channel {m} exceeds max_k={max_k}")
    return FullFeedback(counts)


def encode_reduced(bitmap, W: int, max_W: int) -> str:
    bits = []
    for b in bitmap:
        if b not in (0, 1, True, False):
            raise ValueError(f"bitmap entries must be 0/1, got {b!r}")
        bits.append("1" if b else "0")
    if not 0 <= W <= max_W:
        raise ValueError(f"W={W} outside 0..{max_W}")
    return "".join(bits) + _field(int(W), field_width(max_W))


def decode_reduced(bits: str, M: int, max_W: int) -> ReducedFeedback:
    width = field_width(max_W)
    if len(bits) != M + width:
        raise ValueError(f"expected {M + width} bits, got {len(bits)}")
    _check_bits(bits)
    W = int(bits[M:], 2)
    if W > max_W:
        raise ValueError(f"decoded W={W} exceeds max_W={max_W}")
    return ReducedFeedback(tuple(int(c) for c in bits[:M]), W)


def reduced_from_counts(counts) -> ReducedFeedback:
    return FullFeedback(tuple(int(k) for k in counts)).to_reduced()


def derive_user_view(fb: ReducedFeedback, my_channel: int) -> UserView:
    """Group membership and Group II contention inputs for a user on ``my_channel`` (1-based)."""
    if not 1 <= my_channel <= fb.M:
        raise ValueError(f"channel {my_channel} outside 1..{fb.M}")
    free = tuple(m for m, b in enumerate(fb.bitmap, start=1) if not b)
    group = "I" if fb.bitmap[my_channel - 1] else "II"
    return UserView(group, free, len(free), fb.W)


def _check_bits(bits: str) -> None:
    if bits.strip("01"):
        raise ValueError("bit string may only contain '0' and '1'")


def pack_bits(bits: str) -> bytes:
    """Pack a bit string MSB-first, zero-padding the final byte."""
    _check_bits(bits)
    if not bits:
        return b""
    pad = -len(bits) % 8
    return int(bits + "0" * pad, 2).to_bytes((len(bits) + pad) // 8, "big")


def unpack_bits(data: bytes, n_bits: int) -> str:
    """Inverse of :func:`pack_bits`; the padding must be all zeros."""
    if len(data) != (n_bits + 7) // 8:
        raise ValueError(f"{n_bits} bits need {(n_bits + 7) // 8} bytes, got {len(data)}")
    if not data:
        return ""
    bits = format(int.from_bytes(data, "big"), f"0{8 * len(data)}b")
    if "1" in bits[n_bits:]:
        raise ValueError("nonzero padding bits")
    return bits[:n_bits]
