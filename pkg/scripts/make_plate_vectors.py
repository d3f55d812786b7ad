"""Regenerate the shared plate-validation conformance vectors.

The file is consumed by both the Python test suite and the web UI tests so
the two validators can never drift apart. Run from the repository root:

    python3 scripts/make_plate_vectors.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from platemark.plates import PlateError, parse_plate

CASES = [
    # canonical examples
    "hk1", "HK 1", "138", "BC 6554", "bc6554", " b c 65 54 ", "2112", "2113",
    "xx 9", "XX9999", "aa1", "ZZ 1000", "1", "9", "10", "9999", "8888",
    "lz 3360", "bb 239", "cc239", "911", "168", "1314",
    # whitespace and case variants
    "  hk  1  ", "Hk1", "hK 1", "\tBC\t6554\t", "a a 1",
    # rejections: prefix length
    "H12", "h1", "ABC12", "abcd1", "A1",
    # rejections: digits
    "AB", "hk", "", "   ", "12345", "AB12345", "00001", "AB0", "ab 0123", "012", "0",
    # rejections: characters and ordering
    "AB-12", "hk_1", "HK#1", "12A", "1A2B", "A1B2", "béc 123", "中文1", "hk 1!",
    "8*8", "B2C3",
]


def main() -> int:
    rows = []
    for text in CASES:
        try:
            plate = parse_plate(text)
            rows.append({"input": text, "valid": True, "canonical": plate.canonical()})
        except PlateError as exc:
            rows.append({"input": text, "valid": False, "code": exc.code})
    out = Path(__file__).resolve().parents[1] / "shared" / "plate_vectors.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} vectors to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
