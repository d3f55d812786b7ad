"""Hong Kong license-plate grammar, token encoding, and handpicked plate characteristics.

A plate is either a two-letter prefix followed by up to four digits, or the
digits alone ("HK 1", "BC 6554", "138"). Plates are encoded as a fixed
6-token sequence for the neural models, and mapped to 32 objective
characteristics (22 binary flags + 10 digit counts) used as auxiliary
prediction targets.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

SEQ_LEN = 6
VOCAB_SIZE = 37  # 0 = pad, 1-10 = digits '0'-'9', 11-36 = letters 'A'-'Z'
PAD_TOKEN = 0

_DIGIT_BASE = 1
_LETTER_BASE = 11

_PLATE_RE = re.compile(r"^([A-Z]{2})?([1-9][0-9]{0,3})$")
_SHAPE_RE = re.compile(r"^([A-Z]*)([0-9]*)$")


class PlateError(ValueError):
    """A string that violates the plate grammar. `code` names the broken rule."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Plate:
    """Validated plate: `prefix` is "" or two uppercase letters, `digits` is 1-4 digits."""

    prefix: str
    digits: str

    def __post_init__(self):
        if not _PLATE_RE.match(self.prefix + self.digits):
            raise PlateError("INVALID", f"not a valid plate: {self.prefix!r} + {self.digits!r}")

    def canonical(self) -> str:
        """Canonical display form: prefix, one space, digits ("BC 6554"; "138")."""
        return f"{self.prefix} {self.digits}" if self.prefix else self.digits

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.canonical()


def parse_plate(text: str) -> Plate:
    """Parse user input into a Plate.

    Case-insensitive; internal whitespace is ignored ("hk 1" == "HK1").
    Raises PlateError with a rule-specific code otherwise.
    """
    squashed = "".join(text.split()).upper()
    if not squashed:
        raise PlateError("EMPTY", "plate is empty")
    for ch in squashed:
        if not (ch.isascii() and ch.isalnum()):
            raise PlateError("INVALID_CHAR", f"invalid character {ch!r}")
    shape = _SHAPE_RE.match(squashed)
    if shape is None:
        raise PlateError("LETTERS_AFTER_DIGITS", "letters must come before digits")
    letters, digits = shape.group(1), shape.group(2)
    if len(letters) == 1:
        raise PlateError("PREFIX_LENGTH", "prefix must be two letters or absent")
    if len(letters) > 2:
        raise PlateError("PREFIX_LENGTH", "prefix must be at most two letters")
    if not digits:
        raise PlateError("DIGITS_MISSING", "need one to four digits")
    if len(digits) > 4:
        raise PlateError("DIGITS_TOO_LONG", "at most four digits")
    if digits[0] == "0":
        raise PlateError("LEADING_ZERO", "digits cannot start with zero")
    return Plate(letters, digits)


def encode_plate(plate: Plate) -> np.ndarray:
    """Encode a plate as 6 token ids: positions 0-1 prefix (pads if absent),
    positions 2-5 digits right-aligned with left pads."""
    tokens = np.zeros(SEQ_LEN, dtype=np.int64)
    if plate.prefix:
        tokens[0] = _LETTER_BASE + ord(plate.prefix[0]) - ord("A")
        tokens[1] = _LETTER_BASE + ord(plate.prefix[1]) - ord("A")
    start = SEQ_LEN - len(plate.digits)
    for i, ch in enumerate(plate.digits):
        tokens[start + i] = _DIGIT_BASE + ord(ch) - ord("0")
    return tokens


def decode_plate(tokens: np.ndarray) -> Plate:
    """Inverse of encode_plate. Rejects token layouts no valid plate produces."""
    tokens = np.asarray(tokens)
    if tokens.shape != (SEQ_LEN,):
        raise PlateError("BAD_TOKENS", f"expected {SEQ_LEN} tokens, got shape {tokens.shape}")
    t = [int(v) for v in tokens]
    if any(v < 0 or v >= VOCAB_SIZE for v in t):
        raise PlateError("BAD_TOKENS", "token id out of range")
    head = t[:2]
    if head[0] == PAD_TOKEN and head[1] == PAD_TOKEN:
        prefix = ""
    elif all(_LETTER_BASE <= v < VOCAB_SIZE for v in head):
        prefix = "".join(chr(ord("A") + v - _LETTER_BASE) for v in head)
    else:
        raise PlateError("BAD_TOKENS", "prefix positions must both be pads or both letters")
    tail = t[2:]
    digits = ""
    for i, v in enumerate(tail):
        if v == PAD_TOKEN:
            if digits:
                raise PlateError("BAD_TOKENS", "pad after digit starts")
        elif _DIGIT_BASE <= v < _LETTER_BASE:
            digits += chr(ord("0") + v - _DIGIT_BASE)
        else:
            raise PlateError("BAD_TOKENS", "letter token in digit positions")
    return Plate(prefix, digits)


# Fixed feature order; the first 22 are binary flags, the last 10 digit counts.
AUX_FEATURE_NAMES = (
    "repeated_letters",
    "no_letters",
    "prefix_HK",
    "prefix_XX",
    "x00",
    "x000",
    "symmetric",
    "contains_13",
    "equals_911",
    "abab",
    "aaab",
    "abbb",
    "aaba",
    "abaa",
    "aab",
    "abb",
    "abcd",
    "dcba",
    "aa",
    "aaa",
    "aaaa",
    "aabb",
    "count_0",
    "count_1",
    "count_2",
    "count_3",
    "count_4",
    "count_5",
    "count_6",
    "count_7",
    "count_8",
    "count_9",
)

N_AUX = 32
N_AUX_BINARY = 22


def aux_features(plate: Plate) -> np.ndarray:
    """The 32 characteristics of a plate, in AUX_FEATURE_NAMES order (int64)."""
    d = plate.digits
    n = len(d)
    out = np.zeros(N_AUX, dtype=np.int64)

    out[0] = bool(plate.prefix) and plate.prefix[0] == plate.prefix[1]
    out[1] = not plate.prefix
    out[2] = plate.prefix == "HK"
    out[3] = plate.prefix == "XX"
    out[4] = n == 3 and d.endswith("00")
    out[5] = n == 4 and d.endswith("000")
    out[6] = n >= 2 and d == d[::-1]
    out[7] = "13" in d
    out[8] = d == "911"

    if n == 4:
        a, b, c, e = d
        out[9] = a == c and b == e and a != b  # abab
        out[10] = a == b == c and a != e  # aaab
        out[11] = b == c == e and a != b  # abbb
        out[12] = a == b == e and a != c  # aaba
        out[13] = a == c == e and a != b  # abaa
        out[16] = all(ord(d[i + 1]) - ord(d[i]) == 1 for i in range(3))  # abcd
        out[17] = all(ord(d[i + 1]) - ord(d[i]) == -1 for i in range(3))  # dcba
        out[20] = a == b == c == e  # aaaa
        out[21] = a == b and c == e and a != c  # aabb
    elif n == 3:
        a, b, c = d
        out[14] = a == b and a != c  # aab
        out[15] = b == c and a != b  # abb
        out[19] = a == b == c  # aaa
    elif n == 2:
        out[18] = d[0] == d[1]  # aa

    for k in range(10):
        out[22 + k] = d.count(str(k))
    return out


EVAL_PATTERNS = ("168", "28", "1314", "abba", "abcd", "aabb")


def pattern_class(plate: Plate, pattern: str) -> bool:
    """Whether the plate belongs to one of the fixed evaluation populations.

    Literal patterns ("168", "28", "1314") require the digit string to match
    exactly; template patterns are structural with a != b.
    """
    d = plate.digits
    if pattern in ("168", "28", "1314"):
        return d == pattern
    if pattern == "abba":
        return len(d) == 4 and d == d[::-1] and d[0] != d[1]
    if pattern == "abcd":
        return len(d) == 4 and all(ord(d[i + 1]) - ord(d[i]) == 1 for i in range(3))
    if pattern == "aabb":
        return len(d) == 4 and d[0] == d[1] and d[2] == d[3] and d[0] != d[2]
    raise ValueError(f"unknown pattern {pattern!r}")
