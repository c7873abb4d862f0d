import pathlib
import typing

import numpy as np
import pytest

from vseam import fixtures, images, utils


@pytest.mark.parametrize(
    "rgb,expected",
    [
        pytest.param((0, 0, 0), (0, 0, 0), id="black"),
        pytest.param((255, 255, 255), (3, 3, 3), id="white"),
        pytest.param((200, 30, 30), (3, 0, 0), id="red"),
        pytest.param((63.9, 64, 128), (0, 1, 2), id="level-edges"),
    ],
)
def test_quantize(
    rgb: typing.Tuple[float, float, float], expected: typing.Tuple[int, int, int]
) -> None:
    assert images.quantize(rgb) == expected


def test_color_token_inverts() -> None:
    for token in range(64):
        assert images.color_token(images.token_levels(token), 64) == token


def test_image_token_ids_of_a_painted_grid() -> None:
    cells = [fixtures.RED] * 8 + [fixtures.BLUE] * 8
    image = fixtures.paint_grid(cells)

    ids = images.image_token_ids(image, 4, 64)

    assert ids == [48] * 8 + [3] * 8


@pytest.mark.parametrize(
    "bbox,expected",
    [
        pytest.param((0, 0, 16, 8), [0, 1], id="two-patches"),
        pytest.param((8, 8, 9, 9), [5], id="one-pixel"),
        pytest.param((7, 7, 9, 9), [0, 1, 4, 5], id="corner"),
        pytest.param((0, 0, 32, 32), list(range(16)), id="whole-image"),
    ],
)
def test_patches_intersecting(
    bbox: typing.Tuple[int, int, int, int], expected: typing.List[int]
) -> None:
    geometry = images.PatchGeometry(32, 32, 4)
    assert geometry.patches_intersecting(images.Box("x", *bbox)) == expected


def test_patch_geometry_with_uneven_sizes() -> None:
    geometry = images.PatchGeometry(10, 10, 4)
    assert [geometry.patch_rect(0, c)[0] for c in range(4)] == [0, 2, 5, 8]
    assert geometry.patch_rect(3, 3) == (8, 8, 10, 10)


@pytest.mark.parametrize(
    "width,height", [pytest.param(3, 32, id="narrow"), pytest.param(32, 2, id="short")]
)
def test_image_smaller_than_the_grid(width: int, height: int) -> None:
    with pytest.raises(utils.ValidationError, match="smaller than the 4×4 patch grid"):
        images.PatchGeometry(width, height, 4)
    with pytest.raises(utils.ValidationError, match="smaller than"):
        images.image_token_ids(np.zeros((height, width, 3), np.uint8), 4, 64)


def test_one_pixel_patches() -> None:
    image = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    np.testing.assert_array_equal(images.patch_means(image, 4), image)


@pytest.mark.parametrize(
    "bbox",
    [
        pytest.param((4, 0, 4, 8), id="empty-width"),
        pytest.param((0, 9, 8, 3), id="inverted"),
        pytest.param((-1, 0, 8, 8), id="negative"),
    ],
)
def test_invalid_box(bbox: typing.Tuple[int, int, int, int]) -> None:
    with pytest.raises(utils.ValidationError, match="x0 < x1"):
        images.Box("x", *bbox)


def test_box_fits() -> None:
    box = images.Box("x", 0, 0, 32, 16)
    assert box.fits(32, 32)
    assert not box.fits(31, 32)


def test_save_and_load_image(tmp_path: pathlib.Path) -> None:
    rng = np.random.default_rng(0)
    array = rng.integers(0, 256, (12, 20, 3), dtype=np.uint8)
    path = tmp_path / "nested" / "image.png"

    images.save_image(path, array)

    assert np.array_equal(images.load_image(path), array)
    assert images.image_size(path) == (20, 12)


def test_load_unreadable_image(tmp_path: pathlib.Path) -> None:
    path = tmp_path / "broken.png"
    path.write_bytes(b"not a png")
    with pytest.raises(utils.ValidationError, match="Cannot read image"):
        images.load_image(path)
