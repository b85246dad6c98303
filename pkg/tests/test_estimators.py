import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from airknow import ComposedRetriever, TripletConfidenceClassifier
from airknow.eki import compose_gdv_batch
from airknow.errors import ConfigError, InputError, ShapeError
from airknow.rng import RngState
from airknow.world import WorldSpec, generate_world, inject_noise, \
    sample_clean_triplets


@pytest.fixture(scope="module")
def toy_problem():
    world = generate_world(WorldSpec(embed_dim=24, concept_count=12,
                                     intra_noise=0.02, seed=7))
    triplets = sample_clean_triplets(world, 500, RngState(8))
    dataset = inject_noise(triplets, 0.5, rng=RngState(9))
    Zr, Zm, Zt = dataset.arrays()
    Zq = Zr + Zm @ world.modality_map
    Zq /= np.linalg.norm(Zq, axis=1, keepdims=True)
    X = compose_gdv_batch(Zq, Zt)
    y = dataset.clean_mask().astype(int)
    return world, dataset, X, y


class TestTripletConfidenceClassifier:
    def test_sklearn_protocol(self):
        clf = TripletConfidenceClassifier(hidden_layers=(8, 4), epochs=1)
        params = clf.get_params()
        assert params["hidden_layers"] == (8, 4)
        cloned = clone(clf)
        assert cloned.get_params() == params

    def test_fit_predict_separates_noise(self, toy_problem):
        _, _, X, y = toy_problem
        clf = TripletConfidenceClassifier(hidden_layers=(32, 16), epochs=4,
                                          batch_size=32, learning_rate=2e-3,
                                          random_state=0)
        clf.fit(X[:350], y[:350])
        assert clf.n_features_in_ == X.shape[1]
        proba = clf.predict_proba(X[350:])
        assert proba.shape == (150, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        acc = (clf.predict(X[350:]) == y[350:]).mean()
        assert acc >= 0.8

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            TripletConfidenceClassifier().predict(np.zeros((1, 4)))

    def test_prediction_is_deterministic(self, toy_problem):
        _, _, X, y = toy_problem
        clf = TripletConfidenceClassifier(hidden_layers=(8,), epochs=1,
                                          batch_size=64, random_state=3)
        clf.fit(X[:200], y[:200])
        p1 = clf.predict_proba(X[200:260])
        p2 = clf.predict_proba(X[200:260])
        np.testing.assert_array_equal(p1, p2)

    def test_bad_labels_rejected(self, toy_problem):
        _, _, X, _ = toy_problem
        clf = TripletConfidenceClassifier(hidden_layers=(4,), epochs=1)
        with pytest.raises(InputError):
            clf.fit(X[:10], np.full(10, 0.5))


class TestComposedRetriever:
    def make_stacked(self, dataset):
        Zr, Zm, Zt = dataset.arrays()
        return np.hstack([Zr, Zm, Zt])

    def test_fit_transform_improves_over_random_heads(self, toy_problem):
        world, dataset, X, y = toy_problem
        clf = TripletConfidenceClassifier(hidden_layers=(32, 16), epochs=4,
                                          batch_size=32, learning_rate=2e-3)
        clf.fit(X, y)
        retriever = ComposedRetriever(
            confidence_model=clf, learning_rate=0.5, epochs=6, batch_size=64,
            head_init="pretrained", modality_map=world.modality_map,
            random_state=1)
        stacked = self.make_stacked(dataset)
        retriever.fit(stacked)
        val = inject_noise(sample_clean_triplets(world, 100, RngState(55)),
                           0.0, rng=RngState(56))
        Zr, Zm, Zt = val.arrays()
        queries = retriever.transform(np.hstack([Zr, Zm]))
        gallery = retriever.encode_gallery(Zt)
        scores = queries @ gallery.T
        # same-concept gallery twins cap top-1, so check the top-10 band
        ranks = (scores > scores[np.arange(100), np.arange(100)][:, None]).sum(1)
        assert (ranks < 10).mean() >= 0.6

    def test_infonce_mode_needs_no_confidence_model(self, toy_problem):
        _, dataset, _, _ = toy_problem
        retriever = ComposedRetriever(loss_mode="infonce", epochs=1,
                                      batch_size=64, learning_rate=0.1)
        retriever.fit(self.make_stacked(dataset))
        assert hasattr(retriever, "heads_")

    def test_airknow_mode_requires_fitted_model(self, toy_problem):
        _, dataset, _, _ = toy_problem
        with pytest.raises(ConfigError):
            ComposedRetriever(epochs=1).fit(self.make_stacked(dataset))
        with pytest.raises(NotFittedError):
            ComposedRetriever(confidence_model=TripletConfidenceClassifier(),
                              epochs=1).fit(self.make_stacked(dataset))

    def test_width_validation(self, toy_problem):
        _, dataset, _, _ = toy_problem
        retriever = ComposedRetriever(loss_mode="infonce", epochs=1,
                                      batch_size=64, learning_rate=0.1)
        retriever.fit(self.make_stacked(dataset))
        with pytest.raises(ShapeError):
            retriever.transform(np.ones((2, 11)))
        with pytest.raises(ShapeError):
            ComposedRetriever(loss_mode="infonce", epochs=1).fit(np.ones((4, 10)))
