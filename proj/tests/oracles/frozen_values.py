"""Independent oracles used to freeze expected values in the C++ tests.

Run: python3 tests/oracles/frozen_values.py
"""
from collections import Counter
from functools import lru_cache
import math


def trigrams(s: str) -> Counter:
    padded = "\x02\x02" + s + "\x03\x03"
    b = padded.encode("utf-8")
    return Counter(b[i:i + 3] for i in range(len(b) - 2))


def trigram_cosine(a: str, b: str) -> float:
    ca, cb = trigrams(a), trigrams(b)
    dot = sum(ca[k] * cb[k] for k in ca)
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb) if na and nb else 0.0


def lev(p: str, g: str) -> int:
    @lru_cache(maxsize=None)
    def d(m: int, n: int) -> int:
        if m == 0:
            return n
        if n == 0:
            return m
        return min(d(m - 1, n) + 1, d(m, n - 1) + 1,
                   d(m - 1, n - 1) + (p[m - 1] != g[n - 1]))
    return d(len(p), len(g))


def norm_edit(p: str, g: str) -> float:
    return 0.0 if not p and not g else lev(p, g) / max(len(p), len(g))


if __name__ == "__main__":
    print("trigram cosine sit on-sofa vs joined:",
          repr(trigram_cosine('["sit on-sofa"]', '["sit on-sofa", "touch-table"]')))
    print("trigram cosine raw strings:",
          repr(trigram_cosine("sit on-sofa", "sit on-sofa, touch-table")))
    print("kitten/sitting:", repr(norm_edit("kitten", "sitting")))
    print("edit [] vs [\"sit on-sofa\", \"touch-table\"]:",
          repr(norm_edit("[]", '["sit on-sofa", "touch-table"]')))
    print("edit [] vs [\"stand on-floor\"]:",
          repr(norm_edit("[]", '["stand on-floor"]')))
    print("cosine [] vs [\"stand on-floor\"]:",
          repr(trigram_cosine("[]", '["stand on-floor"]')))
