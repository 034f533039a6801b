"""Training/evaluation blocks from RGB images.

Pipeline per image: optional bilinear pre-scale, RGB -> YCbCr, 4:2:0 planes
(6-tap collocated luma filter, 2x2 mean for source chroma), quantisation to
the container bit depth, then M uniformly placed blocks per size.

Block container layout (all integers little-endian)::

    header : b"CIPB" | version u16 | bitdepth u8 | count u32
    record : N u8 | origin_y u32 | origin_x u32
             | X0  N*N u16 | S0 3*(4N+1) u16 | availability ceil((4N+1)/8) bytes
             | Z   2*N*N u16

The availability bitmap is LSB-first, one bit per boundary position.
Prediction containers use magic b"CIPR" and records
``N u8 | origin_y u32 | origin_x u32 | prediction 2*N*N u16``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import MISSING_REFERENCE, SUPPORTED_SIZES, boundary_length, extract_reference_array
from .rng import Xoshiro256
from ._io import atomic_write_bytes

log = logging.getLogger(__name__)

BLOCK_MAGIC = b"CIPB"
PRED_MAGIC = b"CIPR"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHBI")
_RECORD = struct.Struct("<BII")

COLOUR_MATRICES = {
    "bt601": (0.299, 0.114),
    "bt709": (0.2126, 0.0722),
}


class ContainerError(ValueError):
    pass


def rgb_to_ycbcr(r, g, b, matrix: str = "bt601"):
    """Full-range YCbCr from RGB in [0, 1]; chroma centred on 0.5, all clamped to [0, 1]."""
    kr, kb = COLOUR_MATRICES[matrix]
    r, g, b = (np.asarray(c, dtype=np.float64) for c in (r, g, b))
    y = kr * r + (1.0 - kr - kb) * g + kb * b
    cb = 0.5 + (b - y) / (2.0 * (1.0 - kb))
    cr = 0.5 + (r - y) / (2.0 * (1.0 - kr))
    return tuple(np.clip(c, 0.0, 1.0) for c in (y, cb, cr))


def downsample_luma_collocated(luma: np.ndarray) -> np.ndarray:
    """Half-resolution luma with the {1,2,1; 1,2,1}/8 filter (type-0 siting).

    The left neighbour of column 0 is replicated.
    """
    h, w = luma.shape
    if h % 2 or w % 2:
        raise ValueError(f"luma dimensions must be even, got {h}x{w}")
    rows = luma[0::2] + luma[1::2]  # vertical pair sum
    centre = rows[:, 0::2]
    right = rows[:, 1::2]
    left = np.concatenate([rows[:, :1], rows[:, 1:-1:2]], axis=1)
    return (left + 2.0 * centre + right) / 8.0


def downsample_chroma_source(ch: np.ndarray) -> np.ndarray:
    h, w = ch.shape
    if h % 2 or w % 2:
        raise ValueError(f"chroma dimensions must be even, got {h}x{w}")
    return 0.25 * (ch[0::2, 0::2] + ch[0::2, 1::2] + ch[1::2, 0::2] + ch[1::2, 1::2])


def resize_bilinear(img: np.ndarray, scale: float) -> np.ndarray:
    """Half-pixel-centred bilinear resample of an (H, W[, C]) image."""
    if scale == 1.0:
        return img.copy()
    h, w = img.shape[:2]
    oh, ow = max(1, int(h * scale)), max(1, int(w * scale))

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) / scale - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(oh, h)
    x0, x1, fx = axis(ow, w)
    fy = fy.reshape((-1, 1) + (1,) * (img.ndim - 2))
    fx = fx.reshape((1, -1) + (1,) * (img.ndim - 2))
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# --------------------------------------------------------------------------
# image files

def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5), 8 or 16 bit, as float RGB in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    px = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    img = px.reshape(h, w, channels).astype(np.float64) / maxval
    return np.repeat(img, 3, axis=2) if channels == 1 else img


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """8-bit binary PPM from float RGB in [0, 1]."""
    h, w, _ = rgb.shape
    px = np.floor(np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8)
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise ValueError(f"{path}: only PPM/PGM are readable without Pillow") from exc
    with Image.open(path) as im:
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --------------------------------------------------------------------------
# blocks

@dataclass
class BlockSample:
    """One block at container precision (unsigned ints at ``bitdepth``)."""

    n: int
    x0: np.ndarray  # (N, N) uint16
    s0: np.ndarray  # (3, 4N+1) uint16
    available: np.ndarray  # (4N+1,) bool
    z: np.ndarray  # (2, N, N) uint16
    bitdepth: int = 8
    origin: tuple[int, int] = (0, 0)
    image_id: str = field(default="", compare=False)
    scale: float = field(default=1.0, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockSample):
            return NotImplemented
        return (
            self.n == other.n and self.bitdepth == other.bitdepth and tuple(self.origin) == tuple(other.origin)
            and np.array_equal(self.x0, other.x0) and np.array_equal(self.s0, other.s0)
            and np.array_equal(self.available, other.available) and np.array_equal(self.z, other.z)
        )

    @property
    def peak(self) -> int:
        return (1 << self.bitdepth) - 1

    @property
    def X0(self) -> np.ndarray:
        return (self.x0.astype(np.float64) / self.peak)[None]

    @property
    def S0(self) -> np.ndarray:
        s = self.s0.astype(np.float64) / self.peak
        s[:, ~self.available] = MISSING_REFERENCE
        return s

    @property
    def Z(self) -> np.ndarray:
        return self.z.astype(np.float64) / self.peak


def stack_blocks(samples: list[BlockSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Float (X0, S0, Z) batches for blocks of one size."""
    sizes = {s.n for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"batch must be homogeneous in N, got sizes {sorted(sizes)}")
    return (
        np.stack([s.X0 for s in samples]),
        np.stack([s.S0 for s in samples]),
        np.stack([s.Z for s in samples]),
    )


def group_by_size(samples: list[BlockSample]) -> dict[int, list[BlockSample]]:
    out: dict[int, list[BlockSample]] = {}
    for s in samples:
        out.setdefault(s.n, []).append(s)
    return dict(sorted(out.items()))


@dataclass
class CorpusConfig:
    image_dir: str = ""
    per_image: int = 8  # M blocks per size per image
    sizes: tuple[int, ...] = (4, 8, 16)
    seed: int = 0
    matrix: str = "bt601"
    bitdepth: int = 8
    scales: tuple[float, ...] = (1.0, 1 / 2, 1 / 3, 1 / 4)

    def __post_init__(self) -> None:
        if self.per_image < 1:
            raise ValueError("per_image must be >= 1")
        if self.matrix not in COLOUR_MATRICES:
            raise ValueError(f"unknown colour matrix {self.matrix!r}")
        if not 1 <= self.bitdepth <= 16:
            raise ValueError("bitdepth must be in [1, 16]")


def quantize_plane(plane: np.ndarray, bitdepth: int) -> np.ndarray:
    peak = (1 << bitdepth) - 1
    return np.floor(np.clip(plane, 0.0, 1.0) * peak + 0.5).astype(np.uint16)


def prepare_planes(rgb: np.ndarray, matrix: str = "bt601", bitdepth: int = 8):
    """Collocated luma, Cb and Cr at 4:2:0 chroma resolution, quantised."""
    h, w = (rgb.shape[0] // 2) * 2, (rgb.shape[1] // 2) * 2
    y, cb, cr = rgb_to_ycbcr(rgb[:h, :w, 0], rgb[:h, :w, 1], rgb[:h, :w, 2], matrix)
    planes = (downsample_luma_collocated(y), downsample_chroma_source(cb), downsample_chroma_source(cr))
    return tuple(quantize_plane(p, bitdepth) for p in planes)


def draw_origins(rng: Xoshiro256, height: int, width: int, n: int, count: int) -> list[tuple[int, int]]:
    """Uniform block origins on a chroma plane, block fully inside."""
    ys = rng.integers(count, height - n + 1)
    xs = rng.integers(count, width - n + 1)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def _image_seed(seed: int, index: int) -> int:
    return (seed * 0x9E3779B97F4A7C15 + index * 0xD1B54A32D192ED03) & ((1 << 64) - 1)


def extract_blocks(rgb: np.ndarray, cfg: CorpusConfig, image_index: int = 0, image_id: str = "") -> list[BlockSample]:
    """``cfg.per_image`` blocks for each size in ``cfg.sizes`` from one RGB image."""
    rng = Xoshiro256(_image_seed(cfg.seed, image_index))
    scale = cfg.scales[int(rng.integers(1, len(cfg.scales))[0])]
    img = resize_bilinear(rgb, scale)
    max_n = max(cfg.sizes)
    if img.shape[0] < 2 * max_n or img.shape[1] < 2 * max_n:
        log.warning("skipping %s: %dx%d at scale %.3f is too small for %dx%d chroma blocks",
                    image_id or image_index, img.shape[1], img.shape[0], scale, max_n, max_n)
        return []
    luma, cb, cr = prepare_planes(img, cfg.matrix, cfg.bitdepth)
    mid = 1 << (cfg.bitdepth - 1)
    out = []
    for n in sorted(cfg.sizes):
        for oy, ox in draw_origins(rng, luma.shape[0], luma.shape[1], n, cfg.per_image):
            s0, mask = extract_reference_array(luma, cb, cr, (oy, ox), n, return_mask=True)
            s0 = np.where(mask[None], s0, mid).astype(np.uint16)
            out.append(BlockSample(
                n=n,
                x0=luma[oy:oy + n, ox:ox + n].copy(),
                s0=s0,
                available=mask,
                z=np.stack([cb[oy:oy + n, ox:ox + n], cr[oy:oy + n, ox:ox + n]]),
                bitdepth=cfg.bitdepth,
                origin=(oy, ox),
                image_id=image_id,
                scale=scale,
            ))
    return out


def extract_corpus(cfg: CorpusConfig) -> list[BlockSample]:
    """Blocks from every image in ``cfg.image_dir``, in sorted filename order."""
    images = list_images(cfg.image_dir)
    if not images:
        raise ValueError(f"no images found in {cfg.image_dir}")
    out = []
    for i, path in enumerate(images):
        out.extend(extract_blocks(read_image(path), cfg, i, path.name))
    return out


# --------------------------------------------------------------------------
# containers

def _check_bitdepth(samples, bitdepth):
    for s in samples:
        if s.bitdepth != bitdepth:
            raise ContainerError(f"mixed bit depths: {s.bitdepth} vs {bitdepth}")


def encode_blocks(samples: list[BlockSample], bitdepth: int | None = None) -> bytes:
    if bitdepth is None:
        bitdepth = samples[0].bitdepth if samples else 8
    _check_bitdepth(samples, bitdepth)
    parts = [_HEADER.pack(BLOCK_MAGIC, CONTAINER_VERSION, bitdepth, len(samples))]
    for s in samples:
        parts.append(_RECORD.pack(s.n, *s.origin))
        parts.append(s.x0.astype("<u2").tobytes())
        parts.append(s.s0.astype("<u2").tobytes())
        parts.append(np.packbits(s.available.astype(np.uint8), bitorder="little").tobytes())
        parts.append(s.z.astype("<u2").tobytes())
    return b"".join(parts)


def _read_header(data: bytes, magic: bytes) -> tuple[int, int]:
    if len(data) < _HEADER.size:
        raise ContainerError("truncated container header")
    got, version, bitdepth, count = _HEADER.unpack_from(data)
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}")
    if version != CONTAINER_VERSION:
        raise ContainerError(f"format version mismatch: file has {version}, reader supports {CONTAINER_VERSION}")
    return bitdepth, count


def decode_blocks(data: bytes) -> list[BlockSample]:
    bitdepth, count = _read_header(data, BLOCK_MAGIC)
    pos = _HEADER.size
    out = []

    def take(n_items, dtype="<u2"):
        nonlocal pos
        size = n_items * np.dtype(dtype).itemsize
        if pos + size > len(data):
            raise ContainerError("truncated block record")
        arr = np.frombuffer(data, dtype=dtype, count=n_items, offset=pos)
        pos += size
        return arr

    for _ in range(count):
        if pos + _RECORD.size > len(data):
            raise ContainerError("truncated block record")
        n, oy, ox = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        if n not in SUPPORTED_SIZES:
            raise ContainerError(f"unsupported block size {n} in record {len(out)}")
        b = boundary_length(n)
        x0 = take(n * n).reshape(n, n).astype(np.uint16)
        s0 = take(3 * b).reshape(3, b).astype(np.uint16)
        bits = take((b + 7) // 8, "u1")
        avail = np.unpackbits(bits, bitorder="little")[:b].astype(bool)
        z = take(2 * n * n).reshape(2, n, n).astype(np.uint16)
        out.append(BlockSample(n, x0, s0, avail, z, bitdepth, (oy, ox)))
    return out


def write_blocks(path: str | Path, samples: list[BlockSample], bitdepth: int | None = None) -> None:
    atomic_write_bytes(path, encode_blocks(samples, bitdepth))


def read_blocks(path: str | Path) -> list[BlockSample]:
    return decode_blocks(Path(path).read_bytes())


@dataclass
class PredictionRecord:
    n: int
    origin: tuple[int, int]
    samples: np.ndarray  # (2, N, N) uint16


def encode_predictions(records: list[PredictionRecord], bitdepth: int) -> bytes:
    parts = [_HEADER.pack(PRED_MAGIC, CONTAINER_VERSION, bitdepth, len(records))]
    for r in records:
        parts.append(_RECORD.pack(r.n, *r.origin))
        parts.append(np.asarray(r.samples).astype("<u2").tobytes())
    return b"".join(parts)


def decode_predictions(data: bytes) -> tuple[int, list[PredictionRecord]]:
    bitdepth, count = _read_header(data, PRED_MAGIC)
    pos, out = _HEADER.size, []
    for _ in range(count):
        n, oy, ox = _RECORD.unpack_from(data, pos)
        pos += _RECORD.size
        if pos + 4 * n * n > len(data):
            raise ContainerError("truncated prediction record")
        px = np.frombuffer(data, dtype="<u2", count=2 * n * n, offset=pos).reshape(2, n, n).astype(np.uint16)
        pos += 4 * n * n
        out.append(PredictionRecord(n, (oy, ox), px))
    return bitdepth, out
