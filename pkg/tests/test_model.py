import pathlib
import typing

import pytest
import torch

from tests import oracles
from vseam import fixtures, heads, interventions, lens, utils
from vseam import model as _model


def test_forward_matches_the_weights(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    logits, cache = _model.forward(vseam_toy_model, vseam_probe_sequence)

    expected = oracles.manual_forward(vseam_toy_model, vseam_probe_sequence)
    assert logits.shape == (vseam_probe_sequence.length, vseam_toy_model.vocab_size)
    torch.testing.assert_close(logits, expected, rtol=0, atol=1e-9)
    assert cache.num_layers == vseam_toy_model.num_layers
    assert cache.head(0, 1).shape == (
        vseam_probe_sequence.length,
        vseam_toy_model.head_dim,
    )
    assert cache.pattern is None


def test_cache_sites(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, cache = _model.forward(
        vseam_toy_model, vseam_probe_sequence, capture_attention=True
    )

    for layer in range(vseam_toy_model.num_layers):
        torch.testing.assert_close(
            cache.resid_mid[layer], cache.resid_pre[layer] + cache.attn_out[layer]
        )
        torch.testing.assert_close(
            cache.resid_post[layer], cache.resid_mid[layer] + cache.mlp_out[layer]
        )
        assert cache.hidden(layer, "att") is cache.resid_mid[layer]
        assert cache.hidden(layer, "mlp") is cache.resid_post[layer]
    attention = cache.attention(2, 1)
    torch.testing.assert_close(
        attention.sum(dim=-1),
        torch.ones(vseam_probe_sequence.length, dtype=attention.dtype),
    )
    # Causal: nothing attends to a later position.
    assert float(torch.triu(attention, diagonal=1).abs().sum()) == 0.0


def test_forward_is_deterministic(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    first, _ = _model.forward(vseam_toy_model, vseam_probe_sequence)
    second, _ = _model.forward(vseam_toy_model.clone(), vseam_probe_sequence)
    assert torch.equal(first, second)


def test_same_seed_same_weights() -> None:
    a = _model.build_toy_vlm(seed=11)
    b = _model.build_toy_vlm(seed=11)
    c = _model.build_toy_vlm(seed=12)
    unembed = [_model.toy_backend(m).unembed for m in (a, b, c)]
    assert torch.equal(unembed[0], unembed[1])
    assert not torch.equal(unembed[0], unembed[2])


def test_sequence_layout(vseam_toy_model: _model.ModelHandle) -> None:
    sequence = vseam_toy_model.sequence([0] * 16, "Is there a cat?")

    assert sequence.image_positions == tuple(range(16))
    assert sequence.text_positions == (16, 17, 18, 19, 20)
    encoded = vseam_toy_model.vocabulary.encode("is there a cat ?")
    assert sequence.ids[16:] == tuple(encoded)

    with pytest.raises(utils.ValidationError, match="Expected 16 image tokens"):
        vseam_toy_model.sequence([0] * 3, "Is there a cat?")


def test_sequence_image_block_must_be_contiguous() -> None:
    with pytest.raises(utils.ValidationError, match="contiguous"):
        _model.TokenSequence(ids=(1, 2, 3), modalities=("image", "text", "image"))


@pytest.mark.parametrize(
    "kwargs",
    [
        pytest.param({"num_heads": 3}, id="heads-times-head-dim"),
        pytest.param({"image_token_count": 15}, id="non-square-image"),
        pytest.param({"image_token_count": 64}, id="image-exceeds-context"),
        pytest.param({"num_layers": 0}, id="no-layers"),
    ],
)
def test_invalid_dimensions(kwargs: typing.Dict[str, int]) -> None:
    with pytest.raises(_model.InvalidDimensionError):
        _model.ToyVLMConfig(**kwargs)


def test_forward_rejects_out_of_range_input(
    vseam_toy_model: _model.ModelHandle,
) -> None:
    bad_token = _model.TokenSequence(ids=(64,), modalities=("text",))
    with pytest.raises(interventions.InterventionError, match="out of range"):
        _model.forward(vseam_toy_model, bad_token)

    too_long = _model.TokenSequence(ids=(1,) * 65, modalities=("text",) * 65)
    with pytest.raises(interventions.InterventionError, match="exceeds context"):
        _model.forward(vseam_toy_model, too_long)


def test_readout() -> None:
    logits = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)

    logit, prob = _model.readout(logits, 2)

    assert logit == 2.0
    assert prob == pytest.approx(float(torch.softmax(logits, dim=0)[2]))
    with pytest.raises(utils.ValidationError):
        _model.readout(logits, 3)


@pytest.mark.parametrize(
    "yes_logit,no_logit,expected",
    [
        pytest.param(1.0, 0.0, "yes", id="yes"),
        pytest.param(0.0, 1.0, "no", id="no"),
        pytest.param(0.5, 0.5, "no", id="tie"),
    ],
)
def test_binary_answer(yes_logit: float, no_logit: float, expected: str) -> None:
    logits = torch.tensor([0.0, yes_logit, no_logit], dtype=torch.float64)
    assert _model.binary_answer(logits, 1, 2) == expected


def test_answer_must_be_one_token(vseam_toy_model: _model.ModelHandle) -> None:
    assert vseam_toy_model.yes_id == vseam_toy_model.vocabulary.tokens.index("yes")
    with pytest.raises(utils.ValidationError, match="single token"):
        vseam_toy_model.answer_id("not sure")


def test_save_and_load(
    tmp_path: pathlib.Path,
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    path = tmp_path / "toy.bin"
    _model.save_toy_vlm(vseam_toy_model, path)

    loaded = _model.load_toy_vlm(path)

    assert (
        _model.toy_backend(loaded).config
        == _model.toy_backend(vseam_toy_model).config
    )
    assert loaded.seed == vseam_toy_model.seed
    expected, _ = _model.forward(vseam_toy_model, vseam_probe_sequence)
    actual, _ = _model.forward(loaded, vseam_probe_sequence)
    assert torch.equal(expected, actual)


def test_load_rejects_foreign_files(tmp_path: pathlib.Path) -> None:
    path = tmp_path / "not-a-model.bin"
    path.write_bytes(b"hello world")
    with pytest.raises(utils.ValidationError, match="not a toy model container"):
        _model.load_toy_vlm(path)


class _Adapter(torch.nn.Module):
    """Exposes a toy model through the backend protocol and nothing else."""

    def __init__(self, inner: _model.ToyVLM) -> None:
        super().__init__()
        self.inner = inner

    @property
    def num_layers(self) -> int:
        return self.inner.num_layers

    @property
    def num_heads(self) -> int:
        return self.inner.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.inner.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.inner.head_dim

    @property
    def vocab_size(self) -> int:
        return self.inner.vocab_size

    @property
    def image_token_count(self) -> int:
        return self.inner.image_token_count

    @property
    def max_context(self) -> int:
        return self.inner.max_context

    def hook_point(self, layer: int, site: str) -> torch.nn.Module:
        return self.inner.hook_point(layer, site)

    def run(self, ids: torch.Tensor, is_image: torch.Tensor) -> torch.Tensor:
        return self.inner.run(ids, is_image)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.inner.project(hidden)


def test_external_adapter_backend(
    benchmark: fixtures.SyntheticBenchmark,
    vseam_color_probe: _model.ModelHandle,
) -> None:
    adapted = _model.ModelHandle(
        backend=_Adapter(_model.toy_backend(vseam_color_probe)),
        vocabulary=vseam_color_probe.vocabulary,
        backend_tag="external-adapter",
    )
    triple = benchmark.triples[0]
    sequence = adapted.sequence(list(range(16)), triple.question)
    plan = interventions.InterventionPlan((interventions.HeadMaskAction(1, 2),))

    for model in (adapted, adapted.clone()):
        expected, _ = _model.forward(vseam_color_probe, sequence, plan)
        actual, cache = _model.forward(model, sequence, plan)
        assert torch.equal(expected, actual)
        assert cache.head_out[0].shape == (sequence.length, 4, 8)

    assert heads.head_prob_delta(adapted, triple, 1, 2) == heads.head_prob_delta(
        vseam_color_probe, triple, 1, 2
    )
    (grid,) = lens.lens_grid(adapted, sequence, "mlp", k=3)
    (reference,) = lens.lens_grid(vseam_color_probe, sequence, "mlp", k=3)
    assert grid.top1() == reference.top1()

    with pytest.raises(utils.ValidationError, match="`external-adapter`"):
        _model.save_toy_vlm(adapted, pathlib.Path("unused.bin"))
