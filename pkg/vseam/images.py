import dataclasses
import io
import pathlib
import typing

import numpy as np
import PIL.Image

from vseam import utils

# Each channel is quantised to this many levels before the patch is mapped to
# an image token id.
QUANT_LEVELS = 4

ImageArray = np.ndarray  # H×W×3 uint8


@dataclasses.dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle [x0, x1) × [y0, y1)."""

    label: str
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise utils.ValidationError(
                f"Box `{self.label}` must satisfy 0 <= x0 < x1 and 0 <= y0 < y1, "
                f"got {[self.x0, self.y0, self.x1, self.y1]}"
            )

    def fits(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def to_json(self) -> typing.Dict[str, typing.Any]:
        return {"label": self.label, "bbox": [self.x0, self.y0, self.x1, self.y1]}


@dataclasses.dataclass(frozen=True)
class PatchGeometry:
    width: int
    height: int
    grid: int

    def __post_init__(self) -> None:
        if self.grid < 1:
            raise utils.ValidationError(f"Patch grid must be positive, got {self.grid}")
        if self.width < self.grid or self.height < self.grid:
            raise utils.ValidationError(
                f"Image {self.width}x{self.height} is smaller than the "
                f"{self.grid}×{self.grid} patch grid"
            )

    def _edges(self, size: int) -> typing.List[int]:
        return [round(i * size / self.grid) for i in range(self.grid + 1)]

    def patch_rect(self, row: int, col: int) -> typing.Tuple[int, int, int, int]:
        xs, ys = self._edges(self.width), self._edges(self.height)
        return xs[col], ys[row], xs[col + 1], ys[row + 1]

    def patches_intersecting(self, box: Box) -> typing.List[int]:
        """Row-major indices of patches whose footprint meets `box`."""
        hits = []
        for row in range(self.grid):
            for col in range(self.grid):
                px0, py0, px1, py1 = self.patch_rect(row, col)
                if px0 < box.x1 and box.x0 < px1 and py0 < box.y1 and box.y0 < py1:
                    hits.append(row * self.grid + col)
        return hits


def load_image(path: pathlib.Path) -> ImageArray:
    try:
        with PIL.Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise utils.ValidationError(f"Cannot read image {path}: {e}")


def image_size(path: pathlib.Path) -> typing.Tuple[int, int]:
    try:
        with PIL.Image.open(path) as image:
            return image.size
    except (OSError, ValueError) as e:
        raise utils.ValidationError(f"Cannot read image {path}: {e}")


def encode_png(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    PIL.Image.fromarray(array).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with PIL.Image.open(io.BytesIO(data)) as image:
        return np.asarray(image).copy()


def save_image(path: pathlib.Path, array: ImageArray) -> None:
    utils.atomic_write_bytes(path, encode_png(array))


def patch_means(image: ImageArray, grid: int) -> np.ndarray:
    """grid×grid×3 mean RGB per patch."""
    height, width = image.shape[:2]
    geometry = PatchGeometry(width, height, grid)
    means = np.zeros((grid, grid, 3), dtype=np.float64)
    for row in range(grid):
        for col in range(grid):
            x0, y0, x1, y1 = geometry.patch_rect(row, col)
            means[row, col] = image[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
    return means


def quantize(rgb: typing.Sequence[float]) -> typing.Tuple[int, int, int]:
    r, g, b = (min(int(c) * QUANT_LEVELS // 256, QUANT_LEVELS - 1) for c in rgb)
    return r, g, b


def color_token(levels: typing.Tuple[int, int, int], vocab_size: int) -> int:
    r, g, b = levels
    return (r * QUANT_LEVELS * QUANT_LEVELS + g * QUANT_LEVELS + b) % vocab_size


def token_levels(token: int) -> typing.Tuple[int, int, int]:
    """Inverse of `color_token` for vocabularies of at least 64 entries."""
    return (
        token // (QUANT_LEVELS * QUANT_LEVELS),
        (token // QUANT_LEVELS) % QUANT_LEVELS,
        token % QUANT_LEVELS,
    )


def image_token_ids(image: ImageArray, grid: int, vocab_size: int) -> typing.List[int]:
    means = patch_means(image, grid)
    return [
        color_token(quantize(means[row, col]), vocab_size)
        for row in range(grid)
        for col in range(grid)
    ]
