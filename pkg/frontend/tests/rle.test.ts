import { describe, expect, it } from "vitest";
import { rleDecode, rleEncode } from "../src/rle.js";

describe("rle codec", () => {
  it("round-trips random masks", () => {
    let seed = 12345;
    const rand = () => {
      seed = (seed * 1103515245 + 12345) % 2147483648;
      return seed / 2147483648;
    };
    for (let trial = 0; trial < 40; trial++) {
      const n = 1 + Math.floor(rand() * 300);
      const mask = new Uint8Array(n);
      for (let i = 0; i < n; i++) mask[i] = rand() > 0.5 ? 1 : 0;
      expect(rleDecode(rleEncode(mask), n)).toEqual(mask);
    }
  });

  it("encodes all-zero and all-one", () => {
    expect(rleEncode(new Uint8Array(5))).toEqual([5]);
    expect(rleEncode(new Uint8Array([1, 1, 1]))).toEqual([0, 3]);
  });

  it("rejects length mismatch", () => {
    expect(() => rleDecode([3], 5)).toThrow();
  });

  it("decodes server-style runs", () => {
    expect(Array.from(rleDecode([2, 3, 1], 6))).toEqual([0, 0, 1, 1, 1, 0]);
  });
});
