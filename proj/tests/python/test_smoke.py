import math

import pytest

import focatt_mil as fm


def small_spec():
    spec = fm.SynthSpec()
    spec.diagnoses_per_site = [1, 1]
    spec.bags_per_diagnosis = 16
    spec.feature_dim = 6
    spec.noise_sigma = 0.0
    spec.key_fraction = 1.0
    return spec


def small_config(dim, classes):
    mc = fm.ModelConfig()
    mc.input_dim = dim
    mc.class_count = classes
    mc.hidden = 8
    mc.context_dim = 4
    mc.transform_dim = 4
    return mc


def test_aggregate_worked_example():
    y = fm.aggregate([[0.8, 0.2], [0.4, 0.6]], [1.0, 1.0], [1.0, 1.0])
    assert y == pytest.approx([0.6, 0.4], abs=1e-12)


def test_aggregate_rejects_bad_attention():
    with pytest.raises(fm.Error):
        fm.aggregate([[0.8, 0.2]], [1.0, 1.0], [1.5])


def test_forward_outputs_distributions():
    data = fm.generate_bags(small_spec())
    model = fm.FocAttModel.make(small_config(6, 2), 0)
    out = fm.forward(model, data.train[0])
    assert math.isclose(sum(out.y), 1.0, abs_tol=1e-9)
    assert len(out.a) == len(data.train[0])
    assert all(g > 0 for g in out.gamma)


def test_train_and_evaluate(tmp_path):
    spec = small_spec()
    spec.bags_per_diagnosis = 40
    data = fm.generate_bags(spec)
    train, validation = fm.split_train_validation(data.train, 0.15, 0)
    cfg = fm.TrainConfig()
    result = fm.train(fm.FocAttModel.make(small_config(6, 2), 0), train, validation, cfg)
    assert result.history[0].epoch == 0
    report = fm.evaluate(result.best, data.test)
    assert report.accuracy == 1.0
    assert report.auc == 1.0
    path = tmp_path / "m.ckpt"
    result.best.save(path)
    assert fm.FocAttModel.load(path) == result.best


def test_auc_and_kmeans():
    assert fm.auc([0.6, 0.4, 0.5, 0.3], [1, 1, 0, 0]) == 0.75
    pts = [[0.0], [0.1], [10.0], [10.1]]
    fit = fm.kmeans(pts, 2, seed=0)
    assert fit.assignments[0] == fit.assignments[1] != fit.assignments[2] == fit.assignments[3]
    assert fit.inertia == pytest.approx(fm.within_cluster_ss(pts, fit.assignments, 2))


def test_hier_probabilities_factorise():
    table = fm.HierarchyTable([("a", "s0"), ("b", "s0"), ("c", "s1")])
    out = fm.hier_probabilities([0.3, -0.2], [1.0, 0.5, -1.0], table)
    assert sum(out.p_pd_marginal) == pytest.approx(1.0, abs=1e-12)
    for d in range(3):
        site = table.site_of(d)
        assert out.p_pd_marginal[d] == pytest.approx(out.p_pd_given_site[d] * out.p_site[site], abs=1e-12)


def test_bag_round_trip(tmp_path):
    data = fm.generate_bags(small_spec())
    fm.write_bag(tmp_path / "b.bag", data.train[0])
    back = fm.read_bag(tmp_path / "b.bag")
    assert back == data.train[0]
    assert fm.bag_checksum(back) == fm.bag_checksum(data.train[0])
