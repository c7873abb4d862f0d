import numpy as np
import pytest

from tests import conftest
from vseam import dataset, fixtures, images
from vseam import model as _model


def test_benchmark_layout(benchmark: fixtures.SyntheticBenchmark) -> None:
    groups = conftest.by_kind(benchmark)

    assert len(benchmark.triples) == 40
    assert {kind: len(ts) for kind, ts in groups.items()} == {
        "yes-correct": 14,
        "yes-incorrect": 6,
        "no-correct": 20,
    }
    assert benchmark.yes_incorrect == tuple(f"color-{i:03d}" for i in range(14, 20))
    assert benchmark.config_path.name == "run.toml"
    assert benchmark.triples_path.is_file()
    for triple in benchmark.triples:
        assert triple.image.is_file()
        assert triple.edited_image is not None and triple.edited_image.is_file()
        (box,) = triple.boxes
        assert (box.x1 - box.x0, box.y1 - box.y0) == (16, 8)


def test_probe_answers_follow_the_pixels(
    benchmark: fixtures.SyntheticBenchmark, vseam_color_probe: _model.ModelHandle
) -> None:
    for kind, triples in conftest.by_kind(benchmark).items():
        for triple in triples:
            clean = dataset.predict(vseam_color_probe, triple)
            edited = dataset.predict(vseam_color_probe, triple, edited=True)
            if kind == "yes-incorrect":
                assert clean == "no"
            else:
                assert clean == triple.answer
                assert edited != triple.answer


def test_same_seed_same_benchmark(
    tmp_path_factory: pytest.TempPathFactory,
) -> None:
    first = fixtures.write_synthetic_benchmark(
        tmp_path_factory.mktemp("a"), seed=3, n_yes=3, n_no=3, n_yes_incorrect=1
    )
    second = fixtures.write_synthetic_benchmark(
        tmp_path_factory.mktemp("b"), seed=3, n_yes=3, n_no=3, n_yes_incorrect=1
    )

    assert [t.boxes for t in first.triples] == [t.boxes for t in second.triples]
    for a, b in zip(first.triples, second.triples):
        assert np.array_equal(images.load_image(a.image), images.load_image(b.image))


def test_paint_grid() -> None:
    cells = [fixtures.GRAY] * 16
    cells[5] = fixtures.RED

    image = fixtures.paint_grid(cells)

    assert image.shape == (32, 32, 3)
    assert tuple(image[12, 12]) == fixtures.RED
    assert tuple(image[0, 0]) == fixtures.GRAY


def test_silent_probe_answers_no() -> None:
    probe = fixtures.build_color_probe_vlm(alpha=0.0, beta=0.0)
    ids = images.image_token_ids(
        fixtures.paint_grid([fixtures.RED] * 16), probe.image_grid, probe.vocab_size
    )
    # Both logits are zero and ties resolve to "no".
    sequence = probe.sequence(ids, "Is the object red?")
    assert _model.predict_answer(probe, sequence) == "no"
