"""Synthetic document pages, grayscale image I/O and the on-disk dataset format.

A dataset directory holds ``<stem>.pgm`` images next to ``<stem>.boxes`` files
with one ``x y w h`` line per object, normalized by the page size.
"""
from __future__ import annotations

import configparser
import os
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".pgm", ".png")


@dataclass
class PageSample:
    image: np.ndarray    # (1, H, W), values in [0, 1]
    targets: np.ndarray  # (N, 4) normalized x, y, w, h
    name: str = ""


@dataclass
class SynthSpec:
    page_width: tuple[int, int] = (200, 280)
    page_height: tuple[int, int] = (260, 360)
    lines: tuple[int, int] = (1, 30)
    line_height: tuple[int, int] = (5, 9)
    line_gap: int = 2           # minimal blank rows between lines
    margin: tuple[int, int] = (8, 10)  # (x, y) page margins in pixels
    indent: tuple[int, int] = (0, 40)
    words: tuple[int, int] = (1, 10)
    word_width: tuple[int, int] = (6, 36)
    word_gap: tuple[int, int] = (3, 8)
    background: tuple[float, float] = (0.8, 1.0)
    ink: tuple[float, float] = (0.0, 0.35)
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and f.name != "margin" and not v[0] <= v[1]:
                raise ValueError(f"synth spec: range {f.name}={v} is empty")
        if self.lines[0] < 0 or self.line_height[0] < 1 or self.word_width[0] < 1 or self.words[0] < 1:
            raise ValueError("synth spec: counts and sizes must be positive")
        if self.noise < 0:
            raise ValueError("synth spec: noise must be non-negative")
        usable = self.page_height[0] - 2 * self.margin[1]
        need = self.lines[1] * (self.line_height[0] + self.line_gap)
        if need > usable:
            raise ValueError(f"synth spec infeasible: {self.lines[1]} lines of height >= "
                             f"{self.line_height[0]} need {need} rows but the smallest page offers {usable}")
        min_line = self.margin[0] + self.indent[1] + self.word_width[0] + self.margin[0]
        if min_line > self.page_width[0]:
            raise ValueError("synth spec infeasible: indent and margins leave no room for a word")


def load_synth_spec(path) -> SynthSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path, encoding="utf-8") as f:
        cp.read_file(f)
    sec = cp["synth"] if "synth" in cp else {}
    kwargs = {}
    for f in fields(SynthSpec):
        if f.name not in sec:
            continue
        parts = sec[f.name].split()
        default = getattr(SynthSpec, f.name)
        cast = float if isinstance(default, float) or (isinstance(default, tuple)
                                                        and isinstance(default[0], float)) else int
        try:
            vals = tuple(cast(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"{path}: field {f.name}: {exc}") from exc
        kwargs[f.name] = vals if isinstance(default, tuple) else vals[0]
    spec = SynthSpec(**kwargs)
    spec.validate()
    return spec


def generate_page(spec: SynthSpec, rng: np.random.Generator) -> PageSample:
    """Light page with dark word blobs arranged in non-overlapping horizontal lines.

    One tight target box per line. Pixel values are quantized to k/255 so the
    page survives an 8-bit PGM round trip unchanged.
    """
    spec.validate()
    width = int(rng.integers(spec.page_width[0], spec.page_width[1] + 1))
    height = int(rng.integers(spec.page_height[0], spec.page_height[1] + 1))
    bg = rng.uniform(*spec.background)
    img = np.full((height, width), bg)
    n_lines = int(rng.integers(spec.lines[0], spec.lines[1] + 1))
    mx, my = spec.margin
    targets = []
    if n_lines:
        pitch = (height - 2 * my) / n_lines
        for k in range(n_lines):
            hmax = min(spec.line_height[1], int(pitch) - spec.line_gap)
            lh = int(rng.integers(spec.line_height[0], max(hmax, spec.line_height[0]) + 1))
            slack = max(int(pitch) - spec.line_gap - lh, 0)
            top = my + int(k * pitch) + int(rng.integers(0, slack + 1))
            x = mx + int(rng.integers(spec.indent[0], spec.indent[1] + 1))
            right = width - mx
            n_words = int(rng.integers(spec.words[0], spec.words[1] + 1))
            ink = rng.uniform(*spec.ink)
            x0 = y0 = 10**9
            x1 = y1 = -1
            for _ in range(n_words):
                ww = int(rng.integers(spec.word_width[0], spec.word_width[1] + 1))
                ww = min(ww, right - x)
                if ww < 1:
                    break
                wh = lh - int(rng.integers(0, 2)) if lh > 2 else lh
                wt = top + int(rng.integers(0, lh - wh + 1))
                img[wt:wt + wh, x:x + ww] = ink
                x0, y0 = min(x0, x), min(y0, wt)
                x1, y1 = max(x1, x + ww), max(y1, wt + wh)
                x += ww + int(rng.integers(spec.word_gap[0], spec.word_gap[1] + 1))
                if x >= right:
                    break
            if x1 < 0:
                continue
            targets.append((x0 / width, y0 / height, (x1 - x0) / width, (y1 - y0) / height))
    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal(img.shape)
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    image = (q.astype(np.float32) / np.float32(255))[None]
    return PageSample(image, np.array(targets, dtype=np.float64).reshape(-1, 4))


def generate_dataset(spec: SynthSpec, count: int, seed: int | None = None) -> list[PageSample]:
    rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
    pages = []
    for k in range(count):
        page = generate_page(spec, rng)
        page.name = f"page_{k:05d}"
        pages.append(page)
    return pages


# --- image I/O ------------------------------------------------------------------

def _pgm_header(data: bytes) -> tuple[list[int], int]:
    """Parse magic, width, height, maxval; return them and the payload offset."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError(f"corrupt PGM header: unexpected end at byte {pos}")
        tok = data[start:pos]
        if not tokens:
            if tok == b"P6" or tok == b"P3":
                raise ValueError(f"color image ({tok.decode()}) at byte {start}: only grayscale is supported")
            if tok != b"P5":
                raise ValueError(f"unsupported image format {tok[:8]!r} at byte {start}: expected binary PGM (P5)")
            tokens.append(5)
            continue
        if not tok.isdigit():
            raise ValueError(f"corrupt PGM header: expected an integer at byte {start}, got {tok[:16]!r}")
        tokens.append(int(tok))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ValueError(f"corrupt PGM header: missing separator before pixel data at byte {pos}")
    return tokens, pos + 1


def read_pgm(data: bytes) -> np.ndarray:
    (_, width, height, maxval), pos = _pgm_header(data)
    if not 0 < maxval < 65536:
        raise ValueError(f"PGM maxval {maxval} out of range")
    if width < 1 or height < 1:
        raise ValueError(f"PGM has empty size {width}x{height}")
    itemsize = 1 if maxval < 256 else 2
    expected = width * height * itemsize
    actual = len(data) - pos
    if actual < expected:
        raise ValueError(f"truncated PGM pixel payload: expected {expected} bytes, got {actual} "
                         f"(payload starts at byte {pos})")
    raw = np.frombuffer(data, np.uint8 if itemsize == 1 else ">u2", width * height, pos)
    img = raw.reshape(height, width).astype(np.float32) / np.float32(maxval)
    return np.clip(img, 0.0, 1.0)[None]


def write_pgm(path, image: np.ndarray) -> None:
    img = image[0] if image.ndim == 3 else image
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def load_image(path) -> np.ndarray:
    """Grayscale image as a (1, H, W) float32 array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path.read_bytes())
    from PIL import Image
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im).astype(np.float32)
            top = np.float32(255 if im.mode == "L" else 65535)
            return np.clip(arr / top, 0.0, 1.0)[None]
        raise ValueError(f"{path}: image mode {im.mode!r} is not grayscale")


def width_normalize(image: np.ndarray, target_width: int = 598) -> np.ndarray:
    """Bilinear rescale to ``target_width`` columns, height scaled by the same factor."""
    img = image[0]
    height, width = img.shape
    if width == target_width:
        return image.copy()
    new_h = max(1, int(round(height * target_width / width)))
    out = _resize_axis(img, new_h, axis=0)
    out = _resize_axis(out, target_width, axis=1)
    return out[None].astype(image.dtype, copy=False)


def _resize_axis(img: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == size:
        return img
    src = (np.arange(size) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(img.dtype)
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = size
    return a + frac.reshape(shape) * (b - a)


# --- dataset directories ---------------------------------------------------------

def format_boxes(targets: np.ndarray) -> str:
    return "".join(f"{x:.6f} {y:.6f} {w:.6f} {h:.6f}\n" for x, y, w, h in np.asarray(targets).reshape(-1, 4))


def parse_boxes(text: str, source: str = "<boxes>") -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{source}:{lineno}: expected 4 numbers 'x y w h', got {len(parts)}")
        try:
            rows.append(tuple(float(p) for p in parts))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_dataset(directory, samples) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        stem = s.name or f"page_{k:05d}"
        write_pgm(directory / f"{stem}.pgm", s.image)
        (directory / f"{stem}.boxes").write_text(format_boxes(s.targets), encoding="utf-8")


def read_dataset(directory):
    """Yield samples in lexicographic stem order; unpaired files are skipped with a warning."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    names = sorted(os.listdir(directory))
    images = {Path(n).stem: n for n in names if Path(n).suffix.lower() in IMAGE_SUFFIXES}
    boxes = {Path(n).stem for n in names if n.endswith(".boxes")}
    for stem in sorted(set(images) | boxes):
        if stem not in images:
            warnings.warn(f"{directory / (stem + '.boxes')}: no matching image, skipped")
            continue
        if stem not in boxes:
            warnings.warn(f"{directory / images[stem]}: no matching .boxes file, skipped")
            continue
        box_path = directory / f"{stem}.boxes"
        targets = parse_boxes(box_path.read_text(encoding="utf-8"), str(box_path))
        yield PageSample(load_image(directory / images[stem]), targets, stem)
