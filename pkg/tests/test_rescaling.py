import typing

import hypothesis
import pytest
from hypothesis import strategies as st

from vseam import fixtures, heads, interventions, reporting, rescaling, utils
from vseam import model as _model

PROBE_SELECTION = heads.HeadSetSelection(
    k=10,
    positive=((fixtures.SIGNAL_HEAD, -0.4),),
    negative=((fixtures.NOISE_HEAD, 0.3),),
)


@pytest.fixture(scope="module")
def probe_plan() -> rescaling.RescalePlan:
    return rescaling.build_rescale_plan(PROBE_SELECTION, source="synthetic-color")


def test_rescale_entry() -> None:
    positive = rescaling.RescaleEntry(1, 2, "positive", 0.4, 0.25)
    negative = rescaling.RescaleEntry(3, 3, "negative", 0.3, 0.25)
    assert positive.factor == 1.25
    assert negative.factor == 0.75

    with pytest.raises(utils.ValidationError, match=">= 0"):
        rescaling.RescaleEntry(0, 0, "positive", -0.1, 0.5)
    with pytest.raises(utils.ValidationError, match=r"\[0, 1\]"):
        rescaling.RescaleEntry(0, 0, "negative", 0.1, 1.5)


@hypothesis.given(
    positive=st.lists(
        st.floats(-1.0, 0.0, allow_nan=False), min_size=1, max_size=8, unique=True
    ),
    negative=st.lists(
        st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=8, unique=True
    ),
)
def test_weights_are_normalised_per_group(
    positive: typing.List[float], negative: typing.List[float]
) -> None:
    selection = heads.HeadSetSelection(
        k=8,
        positive=tuple(((0, i), score) for i, score in enumerate(positive)),
        negative=tuple(((1, i), score) for i, score in enumerate(negative)),
    )

    plan = rescaling.build_rescale_plan(selection)

    polarities: typing.Tuple[rescaling.PolarityT, ...] = ("positive", "negative")
    for polarity in polarities:
        weights = [e.weight for e in plan.group(polarity)]
        assert all(0.0 <= w <= 1.0 for w in weights)
        assert max(weights) == 1.0
        c_min, c_max = plan.normalization[polarity]
        assert c_min <= c_max
    # The largest |score| gets the full weight.
    strongest = max(positive, key=abs)
    entry = next(e for e in plan.group("positive") if e.c == abs(strongest))
    assert entry.weight == 1.0


def test_build_rescale_plan_prefers_head_scores() -> None:
    scores = [heads.HeadScore(1, 2, -0.6, None, 10, 0)]
    plan = rescaling.build_rescale_plan(PROBE_SELECTION, scores, seed=3)

    assert [(e.layer, e.head, e.c) for e in plan.entries] == [
        (1, 2, 0.6),
        (3, 3, 0.3),
    ]
    assert plan.seed == 3
    assert rescaling.RescalePlan.from_json(plan.to_json()) == plan


def test_build_rescale_plan_needs_heads() -> None:
    with pytest.raises(utils.ValidationError, match="empty selection"):
        rescaling.build_rescale_plan(heads.HeadSetSelection(1, (), ()))


def test_plan_to_interventions(probe_plan: rescaling.RescalePlan) -> None:
    def targets(strategy: rescaling.StrategyT) -> typing.List[typing.Any]:
        plan = rescaling.plan_to_interventions(probe_plan, strategy, 4, 4)
        return [
            (type(a).__name__, a.layer, a.head, getattr(a, "factor", None))
            for a in plan.actions
        ]

    assert targets("original") == []
    assert targets("rescaling") == [
        ("HeadRescaleAction", 1, 2, 2.0),
        ("HeadRescaleAction", 3, 3, 0.0),
    ]
    assert targets("wo-positive") == [("HeadMaskAction", 1, 2, None)]
    assert targets("wo-negative") == [("HeadMaskAction", 3, 3, None)]

    with pytest.raises(utils.ValidationError, match="Unknown head editing strategy"):
        rescaling.plan_to_interventions(probe_plan, "prune", 4, 4)  # type: ignore[arg-type]


def test_random_removal_is_seeded(probe_plan: rescaling.RescalePlan) -> None:
    first = rescaling.plan_to_interventions(
        probe_plan, "random-remove", 4, 4, seed=5, random_count=6
    )
    again = rescaling.plan_to_interventions(
        probe_plan, "random-remove", 4, 4, seed=5, random_count=6
    )
    assert first == again
    assert len(first.actions) == 6
    assert rescaling.sample_random_heads(4, 4, 16, 0) == [
        (layer, head) for layer in range(4) for head in range(4)
    ]
    with pytest.raises(utils.ValidationError, match="Cannot sample 17 heads"):
        rescaling.sample_random_heads(4, 4, 17, 0)


def test_zero_weights_leave_predictions_unchanged(
    benchmark: fixtures.SyntheticBenchmark, vseam_color_probe: _model.ModelHandle
) -> None:
    plan = rescaling.RescalePlan(
        entries=(
            rescaling.RescaleEntry(1, 2, "positive", 0.4, 0.0),
            rescaling.RescaleEntry(3, 3, "negative", 0.3, 0.0),
        ),
        normalization={},
    )
    actions = rescaling.plan_to_interventions(plan, "rescaling", 4, 4)

    original = rescaling.evaluate_plan(
        vseam_color_probe, benchmark.triples, interventions.EMPTY_PLAN, "original"
    )
    rescaled = rescaling.evaluate_plan(
        vseam_color_probe, benchmark.triples, actions, "rescaling"
    )

    assert rescaled.correct == original.correct


def test_color_probe_strategies(
    benchmark: fixtures.SyntheticBenchmark,
    vseam_color_probe: _model.ModelHandle,
    probe_plan: rescaling.RescalePlan,
) -> None:
    report = rescaling.evaluate_strategies(
        vseam_color_probe,
        benchmark.triples,
        probe_plan,
        ["original", "wo-positive", "wo-negative", "rescaling"],
        with_metrics=True,
    )

    averages = {name: r.average for name, r in report.results.items()}
    assert averages == {
        "original": 85.0,
        "wo-positive": 50.0,
        "wo-negative": 100.0,
        "rescaling": 100.0,
    }
    assert report.results["original"].per_category == {"color": 85.0}
    assert report.results["original"].per_level == {"attribute": 85.0}
    metrics = report.results["wo-positive"].metrics
    assert metrics is not None and metrics.yes_ratio == 0.0
    assert report.plans == (probe_plan,)
    assert report.to_csv().splitlines() == [
        "strategy,color,attribute,average",
        "original,85.00,85.00,85.00",
        "wo-positive,50.00,50.00,50.00",
        "wo-negative,100.00,100.00,100.00",
        "rescaling,100.00,100.00,100.00",
    ]
    assert "- rescaling: 100.00%" in report.make_report()
    reporting.validate_report(report.to_json())


def test_plan_from_triples(
    benchmark: fixtures.SyntheticBenchmark, vseam_color_probe: _model.ModelHandle
) -> None:
    plan = rescaling.plan_from_triples(vseam_color_probe, benchmark.triples, k=10)

    assert [(e.layer, e.head, e.polarity, e.weight) for e in plan.entries] == [
        (1, 2, "positive", 1.0),
        (3, 3, "negative", 1.0),
    ]


def test_evaluate_strategies_errors(
    benchmark: fixtures.SyntheticBenchmark,
    vseam_color_probe: _model.ModelHandle,
    probe_plan: rescaling.RescalePlan,
) -> None:
    with pytest.raises(utils.ValidationError, match="No strategy"):
        rescaling.evaluate_strategies(
            vseam_color_probe, benchmark.triples, probe_plan, []
        )
    with pytest.raises(utils.ValidationError, match="empty set"):
        rescaling.evaluate_strategies(vseam_color_probe, [], probe_plan)
    with pytest.raises(utils.ValidationError, match="sample_fraction"):
        rescaling.evaluate_strategies(
            vseam_color_probe, benchmark.triples, probe_plan, sample_fraction=0.0
        )


def test_data_proportion_study(
    benchmark: fixtures.SyntheticBenchmark, vseam_color_probe: _model.ModelHandle
) -> None:
    report = rescaling.data_proportion_study(
        vseam_color_probe, benchmark.triples, [0.5, 1.0], repeats=2, seed=1
    )

    assert list(report.rows) == ["initial", "0.5", "full"]
    assert report.rows["initial"] == {"attribute": 85.0}
    assert report.rows["full"] == {"attribute": 100.0}
    assert report.to_csv().splitlines()[0] == "setting,attribute"
    reporting.validate_report(report.to_json())


def test_transfer_study(
    benchmark: fixtures.SyntheticBenchmark,
    vseam_color_probe: _model.ModelHandle,
    probe_plan: rescaling.RescalePlan,
) -> None:
    transfer = rescaling.transfer_study(
        vseam_color_probe,
        probe_plan,
        benchmark.triples[20:],
        "synthetic-color",
        "synthetic-color-no",
        strategies=["original", "rescaling"],
    )

    results = transfer.report.results
    assert results["original"].average == 100.0
    assert results["rescaling"].average == 100.0
    assert results["rescaling"].metrics is not None
    payload = transfer.to_json()
    assert (payload["source"], payload["target"]) == (
        "synthetic-color",
        "synthetic-color-no",
    )
    reporting.validate_report(payload)
