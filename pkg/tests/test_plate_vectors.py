"""The shared conformance vectors must match the library validator exactly;
the web UI runs the same file through its own validator."""

import json
from pathlib import Path

from platemark.plates import PlateError, parse_plate

VECTORS = Path(__file__).resolve().parents[1] / "shared" / "plate_vectors.json"


def test_vectors_file_exists():
    assert VECTORS.exists(), "run scripts/make_plate_vectors.py"


def test_zero_disagreements():
    rows = json.loads(VECTORS.read_text(encoding="utf-8"))
    assert len(rows) >= 40
    for row in rows:
        try:
            plate = parse_plate(row["input"])
            assert row["valid"] is True, f"{row['input']!r} should be invalid ({row.get('code')})"
            assert plate.canonical() == row["canonical"]
        except PlateError as exc:
            assert row["valid"] is False, f"{row['input']!r} should be valid"
            assert exc.code == row["code"]
