import numpy as np
import pytest
import torch

from tests import oracles
from vseam import heads, interventions
from vseam import model as _model


def _corrupted(
    model: _model.ModelHandle, sequence: _model.TokenSequence
) -> _model.TokenSequence:
    rng = np.random.default_rng(99)
    image_ids = [int(i) for i in rng.integers(0, model.vocab_size, 16)]
    question = [sequence.ids[p] for p in sequence.text_positions]
    return _model.TokenSequence(
        ids=tuple(image_ids) + tuple(question),
        modalities=sequence.modalities,
    )


def _random_sequence(
    rng: np.random.Generator, model: _model.ModelHandle
) -> _model.TokenSequence:
    image = rng.integers(0, model.vocab_size, model.image_token_count)
    text = rng.integers(0, model.vocab_size, int(rng.integers(1, 9)))
    return _model.TokenSequence(
        ids=tuple(int(i) for i in image) + tuple(int(i) for i in text),
        modalities=("image",) * len(image) + ("text",) * len(text),
    )


def test_patch_matches_manual_splice(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    rng = np.random.default_rng(2024)
    _, clean_cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    corrupted = _corrupted(vseam_toy_model, vseam_probe_sequence)

    for _ in range(200):
        layer = int(rng.integers(0, vseam_toy_model.num_layers))
        module: interventions.ModuleT = interventions.MODULES[int(rng.integers(0, 2))]
        count = int(rng.integers(1, corrupted.length + 1))
        positions = tuple(
            sorted(int(p) for p in rng.choice(corrupted.length, count, replace=False))
        )
        plan = interventions.InterventionPlan(
            (interventions.PatchAction(layer, module, positions, clean_cache),)
        )

        patched, cache = _model.forward(vseam_toy_model, corrupted, plan)

        expected = oracles.manual_forward(
            vseam_toy_model,
            corrupted,
            splice=oracles.splice_rows(layer, module, positions, clean_cache),
        )
        torch.testing.assert_close(patched, expected, rtol=0, atol=1e-9)
        # The cache records the patched state.
        torch.testing.assert_close(
            cache.hidden(layer, module)[list(positions)],
            clean_cache.hidden(layer, module)[list(positions)],
        )



def test_empty_patch_is_identity(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, clean_cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    corrupted = _corrupted(vseam_toy_model, vseam_probe_sequence)
    plan = interventions.InterventionPlan(
        (interventions.PatchAction(1, "att", (), clean_cache),)
    )

    baseline, _ = _model.forward(vseam_toy_model, corrupted)
    patched, _ = _model.forward(vseam_toy_model, corrupted, plan)

    assert torch.equal(baseline, patched)


@pytest.mark.parametrize("module", interventions.MODULES)
def test_patching_every_position_recovers_the_clean_run(
    module: interventions.ModuleT,
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    clean, clean_cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    corrupted = _corrupted(vseam_toy_model, vseam_probe_sequence)
    everything = tuple(range(corrupted.length))
    plan = interventions.InterventionPlan(
        (interventions.PatchAction(0, module, everything, clean_cache),)
    )

    patched, _ = _model.forward(vseam_toy_model, corrupted, plan)

    torch.testing.assert_close(patched, clean, rtol=0, atol=1e-12)


def test_output_site_patch(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, clean_cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    corrupted = _corrupted(vseam_toy_model, vseam_probe_sequence)
    action = interventions.PatchAction(2, "mlp", (3,), clean_cache, site="output")
    assert action.hook_site == "mlp_out"

    _, cache = _model.forward(
        vseam_toy_model, corrupted, interventions.InterventionPlan((action,))
    )

    torch.testing.assert_close(cache.mlp_out[2][3], clean_cache.mlp_out[2][3])


def test_head_mask_matches_manual_mean(vseam_toy_model: _model.ModelHandle) -> None:
    rng = np.random.default_rng(7)
    num_heads = vseam_toy_model.num_heads

    for _ in range(20):
        sequence = _random_sequence(rng, vseam_toy_model)
        for layer in range(vseam_toy_model.num_layers):
            for head in range(num_heads):
                plan = interventions.InterventionPlan(
                    (interventions.HeadMaskAction(layer, head),)
                )

                masked, cache = _model.forward(vseam_toy_model, sequence, plan)

                expected = oracles.manual_forward(
                    vseam_toy_model,
                    sequence,
                    head_fn=oracles.mask_head(layer, head),
                )
                torch.testing.assert_close(masked, expected, rtol=0, atol=1e-9)
                others = [h for h in range(num_heads) if h != head]
                torch.testing.assert_close(
                    cache.head(layer, head),
                    cache.head_out[layer][:, others].mean(dim=1),
                )



def test_head_rescale_matches_manual_scaling(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    plan = interventions.InterventionPlan(
        (interventions.HeadRescaleAction(1, 3, 1.75),)
    )

    scaled, _ = _model.forward(vseam_toy_model, vseam_probe_sequence, plan)

    expected = oracles.manual_forward(
        vseam_toy_model, vseam_probe_sequence, head_fn=oracles.scale_head(1, 3, 1.75)
    )
    torch.testing.assert_close(scaled, expected, rtol=0, atol=1e-9)


def test_rescale_by_one_is_identity(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    plan = interventions.InterventionPlan(
        tuple(
            interventions.HeadRescaleAction(layer, head, 1.0)
            for layer in range(vseam_toy_model.num_layers)
            for head in range(vseam_toy_model.num_heads)
        )
    )

    baseline, _ = _model.forward(vseam_toy_model, vseam_probe_sequence)
    scaled, _ = _model.forward(vseam_toy_model, vseam_probe_sequence, plan)

    assert torch.equal(baseline, scaled)


def test_masks_read_unmodified_heads(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    # Masking heads 0 and 1 together averages the original outputs, not the
    # already-masked ones.
    plan = interventions.InterventionPlan(
        (interventions.HeadMaskAction(1, 0), interventions.HeadMaskAction(1, 1))
    )
    _, clean = _model.forward(vseam_toy_model, vseam_probe_sequence)
    _, cache = _model.forward(vseam_toy_model, vseam_probe_sequence, plan)

    original = clean.head_out[1]
    torch.testing.assert_close(
        cache.head(1, 0), original[:, [1, 2, 3]].mean(dim=1)
    )
    torch.testing.assert_close(
        cache.head(1, 1), original[:, [0, 2, 3]].mean(dim=1)
    )


def test_identical_heads_have_no_effect_when_masked() -> None:
    model = _model.build_toy_vlm(_model.ToyVLMConfig(identical_heads=True), seed=5)
    sequence = model.sequence(list(range(16)), "Is the object red?")
    yes = model.answer_id("yes")

    logits, _ = _model.forward(model, sequence)
    _, baseline = _model.readout(logits[-1], yes)
    for layer in range(model.num_layers):
        for head in range(model.num_heads):
            plan = interventions.InterventionPlan(
                (interventions.HeadMaskAction(layer, head),)
            )
            masked, _ = _model.forward(model, sequence, plan)
            _, prob = _model.readout(masked[-1], yes)
            assert prob - baseline == pytest.approx(0.0, abs=1e-12)


def test_mask_head_output_uses_the_cache(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, cache = _model.forward(vseam_toy_model, vseam_probe_sequence)

    replacement = heads.mask_head_output(cache, 0, 2)

    torch.testing.assert_close(
        replacement, cache.head_out[0][:, [0, 1, 3]].mean(dim=1)
    )


def test_duplicate_targets_are_rejected() -> None:
    with pytest.raises(interventions.InterventionError, match="same site"):
        interventions.InterventionPlan(
            (
                interventions.HeadMaskAction(1, 2),
                interventions.HeadRescaleAction(1, 2, 2.0),
            )
        )


def test_negative_factor_is_rejected() -> None:
    with pytest.raises(interventions.InterventionError, match=">= 0"):
        interventions.HeadRescaleAction(0, 0, -0.5)


@pytest.mark.parametrize(
    "action",
    [
        pytest.param(interventions.HeadMaskAction(4, 0), id="layer"),
        pytest.param(interventions.HeadMaskAction(0, 4), id="head"),
        pytest.param(interventions.HeadRescaleAction(-1, 0, 1.0), id="negative-layer"),
    ],
)
def test_out_of_range_targets(
    action: interventions.ActionT,
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    with pytest.raises(interventions.InterventionError, match="out of range"):
        _model.forward(
            vseam_toy_model,
            vseam_probe_sequence,
            interventions.InterventionPlan((action,)),
        )


def test_patch_position_out_of_range(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    plan = interventions.InterventionPlan(
        (interventions.PatchAction(0, "att", (vseam_probe_sequence.length,), cache),)
    )
    with pytest.raises(interventions.InterventionError, match="Position"):
        _model.forward(vseam_toy_model, vseam_probe_sequence, plan)


def test_donor_length_must_match(
    vseam_toy_model: _model.ModelHandle,
    vseam_probe_sequence: _model.TokenSequence,
) -> None:
    _, cache = _model.forward(vseam_toy_model, vseam_probe_sequence)
    shorter = vseam_toy_model.sequence(list(range(16)), "Is it?")
    plan = interventions.InterventionPlan(
        (interventions.PatchAction(0, "mlp", (0,), cache),)
    )
    with pytest.raises(interventions.InterventionError, match="Donor cache"):
        _model.forward(vseam_toy_model, shorter, plan)


def test_masking_needs_two_heads() -> None:
    with pytest.raises(interventions.InterventionError, match="two heads"):
        interventions.mean_of_other_heads(torch.zeros((3, 1, 4)), 0)
