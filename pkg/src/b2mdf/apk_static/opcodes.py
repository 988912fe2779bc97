"""Dalvik instruction widths, in 16-bit code units, keyed by opcode byte.

Opcodes absent from the table are unassigned in the DEX 035-039 formats.
"""
from __future__ import annotations

from ..errors import TruncatedInstruction, UnknownOpcode

PACKED_SWITCH_PAYLOAD = 0x0100
SPARSE_SWITCH_PAYLOAD = 0x0200
FILL_ARRAY_DATA_PAYLOAD = 0x0300


def _build() -> dict[int, int]:
    w: dict[int, int] = {}

    def span(lo: int, hi: int, units: int) -> None:
        for op in range(lo, hi + 1):
            w[op] = units

    span(0x00, 0x01, 1)   # nop, move
    w[0x02], w[0x03] = 2, 3
    w[0x04], w[0x05], w[0x06] = 1, 2, 3
    w[0x07], w[0x08], w[0x09] = 1, 2, 3
    span(0x0A, 0x12, 1)   # move-result*, move-exception, return*, const/4
    w[0x13], w[0x14], w[0x15] = 2, 3, 2
    w[0x16], w[0x17], w[0x18], w[0x19] = 2, 3, 5, 2
    w[0x1A], w[0x1B], w[0x1C] = 2, 3, 2
    span(0x1D, 0x1E, 1)   # monitor-enter/exit
    w[0x1F], w[0x20] = 2, 2
    w[0x21] = 1
    w[0x22], w[0x23] = 2, 2
    w[0x24], w[0x25], w[0x26] = 3, 3, 3
    w[0x27], w[0x28], w[0x29], w[0x2A] = 1, 1, 2, 3
    w[0x2B], w[0x2C] = 3, 3
    span(0x2D, 0x31, 2)   # cmp*
    span(0x32, 0x37, 2)   # if-test
    span(0x38, 0x3D, 2)   # if-testz
    span(0x44, 0x51, 2)   # aget/aput
    span(0x52, 0x5F, 2)   # iget/iput
    span(0x60, 0x6D, 2)   # sget/sput
    span(0x6E, 0x72, 3)   # invoke-kind
    span(0x74, 0x78, 3)   # invoke-kind/range
    span(0x7B, 0x8F, 1)   # unop
    span(0x90, 0xAF, 2)   # binop
    span(0xB0, 0xCF, 1)   # binop/2addr
    span(0xD0, 0xD7, 2)   # binop/lit16
    span(0xD8, 0xE2, 2)   # binop/lit8
    w[0xFA], w[0xFB] = 4, 4
    w[0xFC], w[0xFD] = 3, 3
    w[0xFE], w[0xFF] = 2, 2
    return w


WIDTHS: dict[int, int] = _build()


def payload_width(insns: tuple[int, ...], pos: int) -> int | None:
    """Size of a switch/array payload starting at ``pos``, or None if not a payload."""
    ident = insns[pos]
    if ident not in (PACKED_SWITCH_PAYLOAD, SPARSE_SWITCH_PAYLOAD, FILL_ARRAY_DATA_PAYLOAD):
        return None
    if pos + 1 >= len(insns):
        raise TruncatedInstruction(pos)
    size = insns[pos + 1]
    if ident == PACKED_SWITCH_PAYLOAD:
        return 4 + size * 2
    if ident == SPARSE_SWITCH_PAYLOAD:
        return 2 + size * 4
    if pos + 3 >= len(insns):
        raise TruncatedInstruction(pos)
    element_width = size
    count = insns[pos + 2] | (insns[pos + 3] << 16)
    return 4 + (element_width * count + 1) // 2


def decode_opcodes(insns: tuple[int, ...]) -> list[int]:
    """Opcode bytes of one method, stepping by format width.

    Payload pseudo-instructions are skipped whole and emit nothing. The
    consumed width must land exactly on ``len(insns)``.
    """
    out = []
    pos = 0
    n = len(insns)
    while pos < n:
        width = payload_width(insns, pos)
        if width is None:
            op = insns[pos] & 0xFF
            width = WIDTHS.get(op)
            if width is None:
                raise UnknownOpcode(op, pos)
            out.append(op)
        if pos + width > n:
            raise TruncatedInstruction(pos)
        pos += width
    return out
