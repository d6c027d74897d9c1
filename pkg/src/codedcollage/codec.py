"""Collage encode/decode: grid layout, pixel compositing, and recovery.

The redundancy scheme packs the N = K*K images of a batch into one
square collage, one image per grid cell. A single multi-object detector
runs on the collage; its per-cell predictions stand in for any base
worker that is late. This module owns everything on that path that is
pure data transformation:

* ``build_layout`` / ``CollageLayout``: the grid of ground-truth cell
  boxes, in row-major order so cell ``i`` is worker ``i``'s image.
* ``compose_collage``: nearest-neighbor downscale-and-place compositing
  (the encode step).
* ``parse_prediction_tensor``: flattening a detector output tensor into
  a list of ``Detection``.
* ``decode``: threshold filtering, Jaccard cell assignment, and
  per-cell conflict resolution, producing one optional (class,
  confidence) entry per cell.
* ``recover``: merging base-worker results with decoded cells into the
  final per-request predictions.

Everything here is pure and deterministic; latency and sampling live in
``backend`` and ``engine``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .geometry import Box, assign_cell

__all__ = [
    "DEFAULT_DETECTION_THRESHOLD",
    "CollageLayout",
    "build_layout",
    "Detection",
    "PredictionTensor",
    "CellPrediction",
    "CellPredictions",
    "ImageBuffer",
    "compose_collage",
    "parse_prediction_tensor",
    "decode",
    "recover",
    "DetectionFormatError",
    "parse_detection_line",
    "read_detections",
    "format_detection",
    "write_detections",
    "read_ppm",
    "write_ppm",
]

# Predictions scoring below this are ignored by the decoder unless the
# caller passes an explicit threshold.
DEFAULT_DETECTION_THRESHOLD = 0.15


@dataclass(frozen=True)
class CollageLayout:
    """A K-by-K grid of ground-truth cell boxes over the unit canvas.

    ``cells[i]`` for ``i = r*K + c`` is the box centered at
    ``((c+0.5)/K, (r+0.5)/K)`` with size ``(1/K, 1/K)``; the cells tile
    the unit square exactly. ``canvas_px`` is the pixel side length used
    when compositing (the geometry itself is resolution-free).
    """

    k: int
    canvas_px: int
    cells: tuple[Box, ...]

    @property
    def n(self) -> int:
        return self.k * self.k


def build_layout(k: int, canvas_px: int = 416) -> CollageLayout:
    """Construct the row-major K-by-K grid layout.

    Rejects ``k < 1`` and non-positive canvas sizes.
    """
    if k < 1:
        raise ValueError(f"grid dimension k must be >= 1, got {k}")
    if canvas_px < 1:
        raise ValueError(f"canvas_px must be >= 1, got {canvas_px}")
    cells = tuple(
        Box((c + 0.5) / k, (r + 0.5) / k, 1.0 / k, 1.0 / k)
        for r in range(k)
        for c in range(k)
    )
    return CollageLayout(k=k, canvas_px=canvas_px, cells=cells)


@dataclass(frozen=True)
class Detection:
    """One predicted object: box, class label, and confidence score."""

    box: Box
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be nonnegative, got {self.class_id}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class PredictionTensor:
    """Raw detector output: K*K cells, 2 box slots per cell.

    ``values`` is flat, row-major over cells; within a cell, slot 0's
    ``5 + c`` numbers precede slot 1's. Each slot is laid out as
    ``[x, y, w, h, objectness, class probs...]``. For ``c = 100`` the
    per-cell span is 210 values.
    """

    k: int
    c: int
    values: tuple[float, ...]

    SLOTS_PER_CELL = 2

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"grid dimension k must be >= 1, got {self.k}")
        if self.c < 1:
            raise ValueError(f"class count c must be >= 1, got {self.c}")
        expected = self.k * self.k * self.SLOTS_PER_CELL * (5 + self.c)
        if len(self.values) != expected:
            raise ValueError(
                f"tensor for k={self.k}, c={self.c} needs {expected} values, "
                f"got {len(self.values)}"
            )


class CellPrediction(NamedTuple):
    class_id: int
    confidence: float


@dataclass(frozen=True)
class CellPredictions:
    """Decoder output: one optional (class, confidence) entry per cell."""

    entries: tuple[Optional[CellPrediction], ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Optional[CellPrediction]:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class ImageBuffer:
    """Raw RGB image: ``pixels`` holds width*height row-major triples."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self) -> None:
        if self.width < 0 or self.height < 0:
            raise ValueError(f"negative image size {self.width}x{self.height}")
        if len(self.pixels) != 3 * self.width * self.height:
            raise ValueError(
                f"{self.width}x{self.height} image needs "
                f"{3 * self.width * self.height} bytes, got {len(self.pixels)}"
            )

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(
            self.height, self.width, 3
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValueError(f"expected HxWx3 uint8 array, got {arr.shape} {arr.dtype}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr.tobytes())


def _nearest_indices(dst: int, src: int) -> np.ndarray:
    # Pixel-center convention: dst pixel d samples src pixel
    # floor((d + 0.5) * src / dst). The clip guards float rounding only;
    # mathematically the index stays below src.
    idx = ((np.arange(dst) + 0.5) * src / dst).astype(np.int64)
    return np.minimum(idx, src - 1)


def compose_collage(images: Sequence[ImageBuffer], layout: CollageLayout) -> ImageBuffer:
    """Encode a batch into one collage image.

    Each input is resized to ``floor(canvas_px / K)`` squared by
    nearest-neighbor sampling and placed at its row-major cell origin.
    When K does not divide ``canvas_px`` the trailing remainder rows and
    columns stay black.
    """
    if len(images) != layout.n:
        raise ValueError(
            f"layout k={layout.k} needs {layout.n} images, got {len(images)}"
        )
    cell_px = layout.canvas_px // layout.k
    canvas = np.zeros((layout.canvas_px, layout.canvas_px, 3), dtype=np.uint8)
    for i, img in enumerate(images):
        if img.width == 0 or img.height == 0:
            raise ValueError(f"image {i} is empty ({img.width}x{img.height})")
        src = img.to_array()
        ys = _nearest_indices(cell_px, img.height)
        xs = _nearest_indices(cell_px, img.width)
        tile = src[np.ix_(ys, xs)]
        r, c = divmod(i, layout.k)
        canvas[r * cell_px : (r + 1) * cell_px, c * cell_px : (c + 1) * cell_px] = tile
    return ImageBuffer.from_array(canvas)


def parse_prediction_tensor(t: PredictionTensor, threshold: float) -> list[Detection]:
    """Flatten a detector tensor into the detections scoring >= threshold.

    Per slot, reads ``[x, y, w, h, objectness, class probs...]``; the
    detection's class is the argmax probability (ties to the lowest class
    id) and its confidence is objectness times that probability. Slots
    whose geometry cannot form a valid box (non-positive or oversized
    w/h, center off the canvas) are skipped rather than rejected: real
    detector output is unconstrained and only plausible boxes can be
    assigned to cells anyway.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    span = 5 + t.c
    out: list[Detection] = []
    pos = 0
    for _cell in range(t.k * t.k):
        for _slot in range(t.SLOTS_PER_CELL):
            x, y, w, h, objectness = t.values[pos : pos + 5]
            probs = t.values[pos + 5 : pos + span]
            pos += span
            class_id = max(range(t.c), key=lambda j: (probs[j], -j))
            confidence = objectness * probs[class_id]
            if confidence < threshold:
                continue
            try:
                box = Box(x, y, w, h)
            except ValueError:
                continue
            out.append(Detection(box=box, class_id=class_id, confidence=confidence))
    return out


def decode(
    dets: Iterable[Detection],
    layout: CollageLayout,
    threshold: float = DEFAULT_DETECTION_THRESHOLD,
) -> CellPredictions:
    """Turn raw detections into one optional prediction per cell.

    Detections scoring below ``threshold`` are dropped. Each survivor is
    assigned to the cell with the largest Jaccard similarity to its box
    (detections overlapping no cell are dropped). When several detections
    land on one cell the highest confidence wins; exact confidence ties
    break to the lowest class id, then to input order. Cells nothing was
    assigned to decode as empty.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    best: list[Optional[CellPrediction]] = [None] * layout.n
    for det in dets:
        if det.confidence < threshold:
            continue
        cell = assign_cell(det.box, layout.cells)
        if cell is None:
            continue
        cur = best[cell]
        if (
            cur is None
            or det.confidence > cur.confidence
            or (det.confidence == cur.confidence and det.class_id < cur.class_id)
        ):
            best[cell] = CellPrediction(det.class_id, det.confidence)
    return CellPredictions(entries=tuple(best))


def recover(
    scnn: Sequence[Optional[int]], cells: CellPredictions
) -> tuple[list[Optional[int]], set[int], set[int]]:
    """Merge base-worker predictions with decoded collage cells.

    For each request ``i``: the worker's own prediction wins when
    present; otherwise the decoded cell entry is substituted (``i`` is
    recorded in ``used_collage``); when that is empty too the request
    must be replicated (``i`` in ``needs_replication`` and ``final[i]``
    is None). Exactly one of "final[i] is not None" and
    "i in needs_replication" holds for every i.
    """
    if len(scnn) != len(cells):
        raise ValueError(
            f"worker results ({len(scnn)}) and cells ({len(cells)}) differ in length"
        )
    final: list[Optional[int]] = []
    used_collage: set[int] = set()
    needs_replication: set[int] = set()
    for i, worker_class in enumerate(scnn):
        if worker_class is not None:
            final.append(worker_class)
        elif cells[i] is not None:
            final.append(cells[i].class_id)
            used_collage.add(i)
        else:
            final.append(None)
            needs_replication.add(i)
    return final, used_collage, needs_replication


class DetectionFormatError(ValueError):
    """A detection file line that does not follow the record format."""

    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


def parse_detection_line(line: str, lineno: int = 1) -> Optional[Detection]:
    """Parse one `cx cy w h class_id confidence` record.

    Text after ``#`` is a comment; a line that is blank after comment
    stripping yields None. Malformed lines raise DetectionFormatError
    carrying the line number.
    """
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    fields = body.split()
    if len(fields) != 6:
        raise DetectionFormatError(lineno, f"expected 6 fields, got {len(fields)}")
    try:
        cx, cy, w, h = (float(f) for f in fields[:4])
        class_id = int(fields[4])
        confidence = float(fields[5])
    except ValueError as exc:
        raise DetectionFormatError(lineno, f"non-numeric field ({exc})") from exc
    try:
        return Detection(Box(cx, cy, w, h), class_id, confidence)
    except ValueError as exc:
        raise DetectionFormatError(lineno, str(exc)) from exc


def read_detections(lines: Iterable[str]) -> list[Detection]:
    """Parse a detection list file (an iterable of text lines)."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        det = parse_detection_line(line, lineno)
        if det is not None:
            out.append(det)
    return out


def format_detection(det: Detection) -> str:
    return (
        f"{det.box.cx!r} {det.box.cy!r} {det.box.w!r} {det.box.h!r} "
        f"{det.class_id} {det.confidence!r}"
    )


def write_detections(dets: Iterable[Detection]) -> str:
    """Render detections in the record format, one per line."""
    return "".join(format_detection(d) + "\n" for d in dets)


def read_ppm(stream: BinaryIO) -> ImageBuffer:
    """Read a binary (P6) PPM image with maxval 255."""
    magic = _ppm_token(stream)
    if magic != b"P6":
        raise ValueError(f"not a P6 PPM stream (magic {magic!r})")
    width = int(_ppm_token(stream))
    height = int(_ppm_token(stream))
    maxval = int(_ppm_token(stream))
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    data = stream.read(3 * width * height)
    if len(data) != 3 * width * height:
        raise ValueError("truncated PPM pixel data")
    return ImageBuffer(width=width, height=height, pixels=data)


def _ppm_token(stream: BinaryIO) -> bytes:
    # Tokens are separated by whitespace; '#' starts a comment running to
    # end of line. Exactly one whitespace byte terminates the last header
    # token before the pixel data.
    token = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise ValueError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def write_ppm(img: ImageBuffer, stream: BinaryIO) -> None:
    """Write a binary (P6) PPM image with maxval 255."""
    stream.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
    stream.write(img.pixels)
