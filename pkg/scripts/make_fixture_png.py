"""Write tiny deterministic placeholder PNGs for image fixtures.

The files carry no timestamps or ancillary chunks, so their bytes (and
therefore their content hashes) are stable across regenerations.
"""

import struct
import sys
import zlib


def chunk(kind: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + kind
        + payload
        + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF)
    )


def make_png(width: int, height: int, shade: int) -> bytes:
    header = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    row = bytes([0]) + bytes([shade]) * width
    raw = row * height
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def main() -> int:
    if len(sys.argv) != 3:
        print("usage: make_fixture_png.py OUT_PATH SHADE", file=sys.stderr)
        return 2
    path, shade = sys.argv[1], int(sys.argv[2])
    with open(path, "wb") as handle:
        handle.write(make_png(16, 16, shade))
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
