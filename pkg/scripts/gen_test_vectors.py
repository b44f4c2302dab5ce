"""Regenerate the checked-in FP8 and RNG test-vector files under src/qtrain/data."""

import os

import numpy as np

from qtrain.numerics import F8Kind, f8_decode, philox_bits

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "qtrain", "data")


def fp8_lines():
    for kind in (F8Kind.E4M3, F8Kind.E5M2):
        vals = f8_decode(np.arange(256, dtype=np.uint8), kind)
        for code, v in enumerate(vals):
            yield f"{kind.name} {code:08b} -> {float(v)!r}"


def rng_lines():
    keys = [(0, 0), (1, 0), (1, 1), (0xFFFFFFFFFFFFFFFF, 0xFFFFFFFFFFFFFFFF), (20251016, 7)]
    counters = [0, 1, 2, 1 << 32, 0xFFFFFFFFFFFFFFFF]
    for seed, stream in keys:
        for c in counters:
            bits = int(philox_bits(seed, stream, [c])[0])
            yield f"{seed:#018x} {stream:#018x} {c:#018x} -> {bits:#010x}"


def main():
    with open(os.path.join(DATA, "fp8_vectors.txt"), "w") as fh:
        fh.write("# kind bits -> decoded value (Python float repr); 'nan'/'inf' per IEEE\n")
        fh.writelines(line + "\n" for line in fp8_lines())
    with open(os.path.join(DATA, "rng_vectors.txt"), "w") as fh:
        fh.write("# seed stream counter -> first uint32 word of Philox4x32 (10 rounds)\n")
        fh.writelines(line + "\n" for line in rng_lines())


if __name__ == "__main__":
    main()
