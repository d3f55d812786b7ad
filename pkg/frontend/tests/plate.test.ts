// The UI validator must agree with the service on every shared vector.

import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { describe, expect, it } from "vitest";
import { validatePlate } from "../src/plate.js";

interface Vector {
  input: string;
  valid: boolean;
  canonical?: string;
  code?: string;
}

const here = dirname(fileURLToPath(import.meta.url));
const vectors: Vector[] = JSON.parse(
  readFileSync(join(here, "..", "..", "shared", "plate_vectors.json"), "utf-8"),
);

describe("shared conformance vectors", () => {
  it("loads a meaningful corpus", () => {
    expect(vectors.length).toBeGreaterThanOrEqual(40);
  });

  it.each(vectors.map((v) => [v.input, v] as const))("agrees on %j", (_, vector) => {
    const got = validatePlate(vector.input);
    expect(got.valid).toBe(vector.valid);
    if (vector.valid) {
      expect(got.canonical).toBe(vector.canonical);
    } else {
      expect(got.code).toBe(vector.code);
    }
  });
});

describe("inline messages", () => {
  it("explains a one-letter prefix", () => {
    const v = validatePlate("H12");
    expect(v.message).toMatch(/two letters or absent/);
  });

  it("explains too many digits", () => {
    const v = validatePlate("12345");
    expect(v.message).toMatch(/at most four digits/);
  });
});
