import numpy as np
import pytest

import gdaflow.interpolate as interpolate_module
from gdaflow.config import ClassifierConfig
from gdaflow.data import LabeledDataset, UnlabeledDataset
from gdaflow.diffmath.mlp import ParamVector, mlp_layout
from gdaflow.errors import GdaFlowError
from gdaflow.evaluation import accuracy
from gdaflow.selftrain import (
    Classifier,
    CycleReport,
    _best,
    argmax_labels,
    classifier_spec,
    classifier_loss,
    cycle_consistency,
    dedupe_alphas,
    gradual_chain,
    gradual_self_train,
    pseudo_label,
    select_alpha,
    self_train,
    source_only,
    train_source,
)


def test_argmax_ties_pick_the_lowest_class():
    np.testing.assert_array_equal(argmax_labels([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]), [1, 2])


def test_source_fit_separates_blobs(blobs, tiny_classifier_config):
    model = train_source(blobs.source, tiny_classifier_config)
    assert model.train_accuracy == pytest.approx(1.0)
    assert model.class_count == 3
    assert accuracy(model, blobs.source) == pytest.approx(1.0)


def test_source_fit_is_seeded(blobs, tiny_classifier_config):
    a = train_source(blobs.source, tiny_classifier_config, seed=7)
    b = train_source(blobs.source, tiny_classifier_config, seed=7)
    np.testing.assert_array_equal(a.theta.values, b.theta.values)


def test_absent_source_class_is_reported(tiny_classifier_config):
    x = np.random.default_rng(0).normal(size=(20, 2))
    source = LabeledDataset(x, np.repeat([1, 2], 10), class_count=3)
    model = train_source(source, tiny_classifier_config)
    assert model.class_count == 3
    assert any("absent" in w for w in model.warnings)


def test_pseudo_label_of_single_row_is_an_int(blobs, tiny_classifier_config):
    model = source_only(blobs.source, tiny_classifier_config)
    label = pseudo_label(model, blobs.source.features[0])
    assert isinstance(label, int)
    assert label == blobs.source.labels[0]
    assert pseudo_label(model, blobs.source.features).shape == (blobs.source.n,)


def test_classifier_loss_uses_one_based_labels(blobs, tiny_classifier_config):
    model = train_source(blobs.source, tiny_classifier_config)
    good = classifier_loss(model.spec, model.theta, blobs.source.features, blobs.source.labels)
    shifted = blobs.source.labels % 3 + 1
    bad = classifier_loss(model.spec, model.theta, blobs.source.features, shifted)
    assert good.item() < bad.item()


def test_self_train_keeps_labels_of_nearby_domain(blobs, tiny_classifier_config):
    model = train_source(blobs.source, tiny_classifier_config)
    adapted = self_train(model, blobs.unlabeled[0], tiny_classifier_config)
    held = blobs.evaluation_dataset(2.0)
    assert held is not None
    assert accuracy(adapted, held) >= 0.9


def test_degenerate_pseudo_labels_warn(blobs, tiny_classifier_config):
    model = train_source(blobs.source, tiny_classifier_config)
    one_class = blobs.source.features[blobs.source.labels == 1]
    adapted = self_train(model, UnlabeledDataset(one_class, 2.0), tiny_classifier_config)
    assert any("degenerate" in w for w in adapted.warnings)


def test_confidence_threshold_falls_back_to_all_points(blobs, tiny_classifier_config):
    trained = train_source(blobs.source, tiny_classifier_config)
    # all-zero weights give uniform probabilities, below any threshold over 1/3
    model = Classifier(trained.spec, trained.theta.with_values(np.zeros(len(trained.theta))), 3)
    config = tiny_classifier_config.model_copy(update={"confidence_threshold": 0.5})
    adapted = self_train(model, blobs.unlabeled[0], config)
    assert any("confidence threshold" in w for w in adapted.warnings)


def test_gradual_chain_records_each_step(blobs, tiny_classifier_config):
    theta1 = train_source(blobs.source, tiny_classifier_config)
    chain = gradual_chain(theta1, blobs.unlabeled, tiny_classifier_config)
    assert len(chain.steps) == 2
    assert chain.final is chain.steps[-1]
    assert chain.in_force()[0] is theta1
    empty = gradual_chain(theta1, (), tiny_classifier_config)
    assert empty.final is theta1


def test_gradual_self_train_reaches_the_target(blobs, tiny_classifier_config):
    result = gradual_self_train(blobs, tiny_classifier_config)
    target = blobs.target_evaluation()
    assert target is not None
    assert accuracy(result.final, target) >= 0.9


def test_cycle_on_a_gentle_walk_recovers_the_source(blobs, tiny_classifier_config):
    result = gradual_self_train(blobs, tiny_classifier_config)
    walk = [blobs.source.without_labels(), *blobs.unlabeled]
    report = cycle_consistency(
        result.final,
        walk,
        blobs.source,
        tiny_classifier_config,
        alpha=1.0,
        target=blobs.target_evaluation(),
    )
    assert report.cycle_accuracy >= 0.9
    assert report.cycle_loss >= 0.0
    assert report.forward_target_accuracy is not None


def test_cycle_needs_a_walk(blobs, tiny_classifier_config):
    model = source_only(blobs.source, tiny_classifier_config)
    with pytest.raises(GdaFlowError):
        cycle_consistency(model, [], blobs.source, tiny_classifier_config)


def test_dedupe_alphas_sorts_and_drops_repeats():
    assert dedupe_alphas([1.0, 0.5, 0.5, 0.2]) == [0.2, 0.5, 1.0]


def test_ties_select_the_smaller_alpha():
    reports = [CycleReport(0.2, 0.3, 1.0), CycleReport(0.5, 0.3, 1.0), CycleReport(1.0, 0.4, 1.0)]
    assert _best(reports) == 0.2


def test_select_alpha_reports_every_candidate(random_flow, moons_sequence, tiny_run_config):
    selection = select_alpha(random_flow, moons_sequence, (1.0, 0.5, 1.0), tiny_run_config)
    assert selection.best_alpha in (0.5, 1.0)
    assert [r.alpha for r in selection.reports] == [0.5, 1.0]
    assert selection.failures == {}
    best = min(selection.reports, key=lambda r: r.cycle_loss)
    assert best.alpha == selection.best_alpha


def test_select_alpha_threads_do_not_change_the_result(
    random_flow, moons_sequence, tiny_run_config
):
    serial = select_alpha(random_flow, moons_sequence, (0.5, 1.0), tiny_run_config, threads=1)
    parallel = select_alpha(random_flow, moons_sequence, (0.5, 1.0), tiny_run_config, threads=2)
    assert serial.best_alpha == parallel.best_alpha
    assert [r.cycle_loss for r in serial.reports] == [r.cycle_loss for r in parallel.reports]


def test_select_alpha_rejects_alpha_beyond_horizon(random_flow, moons_sequence, tiny_run_config):
    with pytest.raises(GdaFlowError) as exc:
        select_alpha(random_flow, moons_sequence, (2.5,), tiny_run_config)
    assert exc.value.code == "INVALID_INPUT"


def test_select_alpha_fails_when_every_candidate_fails(
    random_flow, moons_sequence, tiny_run_config, monkeypatch
):
    def broken(*args, **kwargs):
        raise GdaFlowError("blew up", code="TRANSPORT_FAILED")

    monkeypatch.setattr(interpolate_module, "run_gda", broken)
    with pytest.raises(GdaFlowError) as exc:
        select_alpha(random_flow, moons_sequence, (0.5, 1.0), tiny_run_config)
    assert exc.value.code == "INTERNAL_ERROR"
    assert set(exc.value.context["failures"]) == {"0.5", "1.0"}


def test_warm_start_can_be_disabled(blobs):
    config = ClassifierConfig(hidden=(8,), steps=20, warm_start=False)
    model = train_source(blobs.source, config)
    adapted = self_train(model, blobs.unlabeled[0], config)
    assert adapted.theta.values.shape == model.theta.values.shape


def test_select_alpha_excludes_a_candidate_that_raises(
    random_flow, moons_sequence, tiny_run_config, monkeypatch
):
    real_run_gda = interpolate_module.run_gda

    def flaky(source, unlabeled, flow, alpha, *args, **kwargs):
        if alpha == 0.5:
            raise FloatingPointError("overflow in exp")
        return real_run_gda(source, unlabeled, flow, alpha, *args, **kwargs)

    monkeypatch.setattr(interpolate_module, "run_gda", flaky)
    selection = select_alpha(random_flow, moons_sequence, (0.5, 1.0), tiny_run_config)
    assert selection.best_alpha == 1.0
    assert [r.alpha for r in selection.reports] == [1.0]
    assert "FloatingPointError" in selection.failures[0.5]


def test_cycle_of_a_collapsed_chain_scores_the_class_frequency(blobs, tiny_classifier_config):
    spec = classifier_spec(blobs.dim, blobs.class_count, tiny_classifier_config)
    layout = mlp_layout(spec)
    values = np.zeros(layout.size)
    bias = layout.slot(f"dense{len(spec.hidden)}", "bias")
    values[bias.start] = 5.0
    constant = Classifier(spec, ParamVector(values, layout), blobs.class_count)
    walk = [blobs.source.without_labels(), *blobs.unlabeled]

    report = cycle_consistency(constant, walk, blobs.source, tiny_classifier_config)

    assert report.cycle_accuracy == pytest.approx(np.mean(blobs.source.labels == 1), abs=0.02)
