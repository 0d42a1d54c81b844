"""Binary PPM (P6) and PGM (P5) readers/writers.

Images are exchanged as uint8 arrays; PGM doubles as the label-map format
(value 255 = IGNORE) and as the export format for analysis maps, whose
normalization metadata travels in header comments.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def _write_netpbm(path, magic: bytes, arr: np.ndarray, comments=()):
    h, w = arr.shape[:2]
    header = bytearray()
    header += magic + b"\n"
    for c in comments:
        header += b"# " + str(c).encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """img: uint8 [H,W,3]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParseError(f"write_ppm expects [H,W,3], got {img.shape}")
    _write_netpbm(path, b"P6", img)


def write_pgm(path, arr: np.ndarray, comments=()) -> None:
    """arr: uint8 [H,W]; comments land as '# ...' lines in the header."""
    if arr.ndim != 2:
        raise ParseError(f"write_pgm expects [H,W], got {arr.shape}")
    _write_netpbm(path, b"P5", arr, comments)


class _HeaderScanner:
    """Tokenizes a netpbm header, tracking byte offsets for error messages."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path
        self.comments = []

    def fail(self, msg):
        raise ParseError(f"{self.path}: {msg} at byte {self.pos}")

    def token(self) -> bytes:
        d = self.data
        n = len(d)
        while self.pos < n:
            c = d[self.pos]
            if c in b" \t\r\n":
                self.pos += 1
            elif c == ord("#"):
                end = d.find(b"\n", self.pos)
                if end < 0:
                    self.fail("unterminated comment")
                self.comments.append(d[self.pos + 1: end].strip().decode("ascii", "replace"))
                self.pos = end + 1
            else:
                start = self.pos
                while self.pos < n and d[self.pos] not in b" \t\r\n":
                    self.pos += 1
                return d[start: self.pos]
        self.fail("truncated header")

    def int_token(self, name) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.fail(f"bad {name} {tok!r}")


def _read_netpbm(path, magic: bytes, channels: int):
    with open(path, "rb") as f:
        data = f.read()
    sc = _HeaderScanner(data, path)
    if sc.token() != magic:
        raise ParseError(f"{path}: expected {magic.decode()} magic at byte 0")
    w = sc.int_token("width")
    h = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval} at byte {sc.pos}")
    sc.pos += 1  # exactly one whitespace byte separates header from raster
    need = w * h * channels
    raster = data[sc.pos: sc.pos + need]
    if len(raster) != need:
        raise ParseError(
            f"{path}: raster truncated at byte {sc.pos + len(raster)} "
            f"(need {need} bytes, have {len(raster)})")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return arr.reshape(shape).copy(), sc.comments


def read_ppm(path) -> np.ndarray:
    arr, _ = _read_netpbm(path, b"P6", 3)
    return arr


def read_pgm(path, with_comments: bool = False):
    arr, comments = _read_netpbm(path, b"P5", 1)
    return (arr, comments) if with_comments else arr
