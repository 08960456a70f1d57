"""Regenerate the IDX test fixture: 100 train and 20 test 28x28 images.

Pixel (i, r, c) = (31 i + 7 r + 3 c) mod 256 and label i = 3 i mod 10, offset
by 100 for the test split, so the loader can be checked against a formula.
"""
import pathlib
import struct

OUT = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "mnist-100"


def write(prefix: str, start: int, count: int) -> None:
    pixels = bytes((31 * i + 7 * r + 3 * c) % 256
                   for i in range(start, start + count) for r in range(28) for c in range(28))
    labels = bytes((3 * i) % 10 for i in range(start, start + count))
    (OUT / f"{prefix}-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, count, 28, 28) + pixels)
    (OUT / f"{prefix}-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, count) + labels)


def fnv1a64(data: bytes) -> int:
    h = 0xcbf29ce484222325
    for b in data:
        h = ((h ^ b) * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    write("train", 0, 100)
    write("t10k", 100, 20)
    for f in sorted(OUT.iterdir()):
        print(f"{f.name} {fnv1a64(f.read_bytes()):#018x}")
