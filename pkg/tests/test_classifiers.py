import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardioscope.classifiers import (DEFAULT_SVM_GRID, BalancedBatchSampler, Kind, NnConfig, RfcConfig, SvmConfig,
                                     TrainedClassifier, grid_search, nn_probabilities, predict_scores, train_nn,
                                     train_rfc, train_svm)
from cardioscope.errors import EmptyGrid, SingleClassTraining, WidthMismatch
from cardioscope.evaluation import auc_mann_whitney

from oracles import auc_pairs_loop


def clusters(rng, n=40, d=2, gap=4.0):
    x = np.vstack([rng.normal(0, 1, (n, d)), rng.normal(gap, 1, (n, d))])
    y = np.r_[np.zeros(n, int), np.ones(n, int)]
    return x, y


def encodings(rng, n=120, d=100, shift=1.5, pos_frac=0.3):
    y = (rng.uniform(size=n) < pos_frac).astype(int)
    y[:2] = [0, 1]
    x = rng.normal(size=(n, d))
    x[:, :5] += shift * y[:, None]
    return x, y


def test_svm_separable(rng):
    x, y = clusters(rng, gap=10.0)
    m = train_svm(x, y, SvmConfig(gamma=0.1, c=10.0))
    s = predict_scores(m, x)
    assert np.mean((s > 0) == (y == 1)) == 1.0


def test_svm_defaults():
    c = SvmConfig()
    assert (c.gamma, c.c, c.kernel) == (1e-4, 100.0, "rbf")
    assert DEFAULT_SVM_GRID["gamma"].count(1e-4) and DEFAULT_SVM_GRID["c"].count(100.0)
    with pytest.raises(ValueError):
        SvmConfig(gamma=0)


@pytest.mark.parametrize("trainer", [train_svm, train_rfc, train_nn])
def test_single_class_rejected(trainer, rng):
    with pytest.raises(SingleClassTraining):
        trainer(rng.normal(size=(10, 3)), np.zeros(10, int))


def test_rfc_vote_granularity_and_determinism(rng):
    x, y = encodings(rng, d=10)
    m = train_rfc(x, y, RfcConfig(seed=4))
    assert m.config.n_trees == 75
    s = predict_scores(m, rng.normal(size=(200, 10)))
    k = s * 75
    np.testing.assert_allclose(k, np.round(k), atol=1e-9)
    assert s.min() >= 0 and s.max() <= 1
    again = predict_scores(train_rfc(x, y, RfcConfig(seed=4)), rng.normal(size=(5, 10)))
    assert len(again) == 5
    np.testing.assert_array_equal(predict_scores(m, x), predict_scores(train_rfc(x, y, RfcConfig(seed=4)), x))


def test_rfc_scores_agree_with_sklearn_proba_on_fully_grown_trees(rng):
    # pure leaves make predict_proba an average of 0/1 votes
    x, y = clusters(rng, d=3, gap=1.0)
    m = train_rfc(x, y, RfcConfig(n_trees=20, seed=1))
    np.testing.assert_allclose(predict_scores(m, x), m.model.predict_proba(x)[:, 1], atol=1e-12)


def test_balanced_sampler(rng):
    y = np.r_[np.zeros(90, int), np.ones(7, int)]
    s = BalancedBatchSampler(y, 100, rng)
    for _ in range(20):
        idx = s()
        assert len(idx) == 100 and y[idx].sum() == 50
    with pytest.raises(ValueError):
        NnConfig(batch_size=99)


def test_nn_batches_balanced_and_scores(rng):
    x, y = encodings(rng, shift=3.0)
    seen = []
    m = train_nn(x, y, NnConfig(iterations=200, seed=2), on_batch=lambda idx: seen.append(y[idx].sum()))
    assert len(seen) == 200 and set(seen) == {50}
    p = nn_probabilities(m, x)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    s = predict_scores(m, x)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_array_equal(s, predict_scores(m, x))  # dropout off at inference


def test_nn_learns_easy_encodings(rng):
    x, y = encodings(rng, n=300, shift=1.5)
    xv, yv = encodings(np.random.default_rng(99), n=200, shift=1.5)
    m = train_nn(x, y, NnConfig(iterations=2000, seed=0))
    assert auc_mann_whitney(predict_scores(m, xv), yv) > 0.9


def test_nn_deterministic(rng):
    x, y = encodings(rng)
    a = predict_scores(train_nn(x, y, NnConfig(iterations=50, seed=5)), x)
    b = predict_scores(train_nn(x, y, NnConfig(iterations=50, seed=5)), x)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("trainer", [train_svm, train_rfc, train_nn])
def test_width_mismatch(trainer, rng):
    x, y = encodings(rng)
    kw = {"cfg": NnConfig(iterations=5)} if trainer is train_nn else {}
    m = trainer(x, y, **kw)
    assert predict_scores(m, x[:7]).shape == (7,)
    assert predict_scores(m, x[0]).shape == (1,)
    with pytest.raises(WidthMismatch):
        predict_scores(m, x[:, :99])


def test_scores_orient_toward_non_survivors(rng):
    x, y = encodings(rng, shift=2.0)
    for m in (train_svm(x, y, SvmConfig(gamma=1e-2, c=1.0)), train_rfc(x, y),
              train_nn(x, y, NnConfig(iterations=300))):
        assert auc_pairs_loop(predict_scores(m, x), y) > 0.8, m.kind


def test_save_load(tmp_path, rng):
    x, y = encodings(rng)
    m = train_svm(x, y)
    m.save(tmp_path / "svm.pkl")
    back = TrainedClassifier.load(tmp_path / "svm.pkl")
    np.testing.assert_array_equal(predict_scores(back, x), predict_scores(m, x))
    assert (tmp_path / "svm.json").read_text().count('"kind": "SVM"') == 1


def test_grid_single_point(rng):
    x, y = encodings(rng)
    r = grid_search((x, y), encodings(rng), {"gamma": [1e-3], "c": [10.0]}, Kind.SVM)
    assert (r.best.gamma, r.best.c) == (1e-3, 10.0) and len(r.evaluated) == 1


def test_grid_empty():
    with pytest.raises(EmptyGrid):
        grid_search((None, None), (None, None), {"gamma": []}, Kind.SVM)
    with pytest.raises(EmptyGrid):
        grid_search((None, None), (None, None), {}, Kind.SVM)


def test_grid_tie_break(rng):
    # constant features: every point scores the validation set with one value -> AUC 0.5 ties
    x = np.zeros((20, 3))
    y = np.r_[np.zeros(10, int), np.ones(10, int)]
    r = grid_search((x, y), (x, y), {"gamma": [1e-2, 1e-4], "c": [100.0, 1.0]}, Kind.SVM)
    assert (r.best.c, r.best.gamma) == (1.0, 1e-4)
    r = grid_search((x, y), (x, y), {"n_trees": [50, 5, 20]}, Kind.RFC)
    assert r.best.n_trees == 5


@settings(max_examples=10, deadline=None)
@given(st.permutations([1e-5, 1e-4, 1e-3, 1e-2]), st.permutations([1.0, 10.0, 100.0]))
def test_grid_order_invariant(gammas, cs):
    r = np.random.default_rng(0)
    train, val = encodings(r, n=80), encodings(r, n=60)
    ref = grid_search(train, val, {"gamma": [1e-5, 1e-4, 1e-3, 1e-2], "c": [1.0, 10.0, 100.0]}, Kind.SVM)
    got = grid_search(train, val, {"c": list(cs), "gamma": list(gammas)}, Kind.SVM)
    assert (got.best.gamma, got.best.c) == (ref.best.gamma, ref.best.c)
    assert got.best_auc == ref.best_auc


def test_grid_skips_single_class_points(rng, monkeypatch):
    import cardioscope.classifiers as clf
    x, y = encodings(rng)
    real = clf.TRAINERS[Kind.RFC]

    def picky(xx, yy, cfg):
        if cfg.n_trees == 10:
            raise SingleClassTraining("simulated")
        return real(xx, yy, cfg)

    monkeypatch.setitem(clf.TRAINERS, Kind.RFC, picky)
    r = grid_search((x, y), encodings(rng), {"n_trees": [10, 20]}, Kind.RFC)
    assert r.best.n_trees == 20
    assert r.skipped == [{"params": {"n_trees": 10}, "reason": "simulated"}]
