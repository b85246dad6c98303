import itertools
import json
import math

import numpy as np
import pytest

from airknow import eki
from airknow.eki import (Confidence, EkiHyper, build_proxy, compose_gdv,
                         compose_gdv_batch, eki_loss, elbo_identity_check,
                         fit_confidence_mlp, gdv_dim, infer_confidence,
                         infer_confidence_batch, load_checkpoint,
                         resolve_class_weight, save_checkpoint, train_eki)
from airknow.epa import AnchorRecord, ArbiterModel, Verdict, build_anchor_set
from airknow.errors import ConfigError, InputError, ParseError
from airknow.numkit import (IDENTITY, MlpParams, SIGMOID, flatten_params,
                            grad_check, init_mlp, mlp_forward,
                            unflatten_params)
from airknow.rng import RngState
from airknow.world import WorldSpec, generate_world, inject_noise, \
    sample_clean_triplets


class TestComposeGdv:
    def test_worked_two_dimensional_case(self):
        out = compose_gdv(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out, [1, 0, 0, 1, 1, -1, 0, 0])

    def test_full_dimension_at_default_width(self):
        g = RngState(1).generator()
        out = compose_gdv(g.standard_normal(256), g.standard_normal(256))
        assert out.shape == (1024,)

    def test_equal_inputs_zero_difference_squared_product(self):
        z = RngState(2).generator().standard_normal(6)
        out = compose_gdv(z, z)
        np.testing.assert_array_equal(out[12:18], np.zeros(6))
        np.testing.assert_allclose(out[18:24], z * z, rtol=1e-15)

    @pytest.mark.parametrize("variant,blocks", [
        ("full", 4), ("triplet_raw", 3), ("basic_only", 2),
        ("no_hadamard", 3), ("no_diff", 3), ("no_basic", 2),
    ])
    def test_variant_dimensions(self, variant, blocks):
        d = 8
        assert gdv_dim(variant, d) == blocks * d
        g = RngState(3).generator()
        q, t, r, m = (g.standard_normal(d) for _ in range(4))
        out = compose_gdv(q, t, variant, z_r=r, z_m=m)
        assert out.shape == (blocks * d,)

    def test_raw_variant_requires_raw_inputs(self):
        g = RngState(4).generator()
        with pytest.raises(InputError):
            compose_gdv(g.standard_normal(4), g.standard_normal(4), "triplet_raw")

    def test_batch_matches_single(self):
        g = RngState(5).generator()
        Q, T = g.standard_normal((3, 4)), g.standard_normal((3, 4))
        batch = compose_gdv_batch(Q, T, "no_diff")
        for k in range(3):
            np.testing.assert_array_equal(batch[k], compose_gdv(Q[k], T[k], "no_diff"))


def zero_net(input_dim=4):
    return MlpParams([np.zeros((1, input_dim))], [np.zeros(1)], [SIGMOID], [0.0])


class TestEkiLoss:
    def test_uninformative_prediction_gives_log_two(self):
        X = np.ones((1, 4))
        loss, _ = eki_loss(zero_net(), X, [1.0])
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_positive_weight_scales_positive_term(self):
        X = np.ones((1, 4))
        loss, _ = eki_loss(zero_net(), X, [1.0], omega=2.0)
        assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_matches_finite_differences(self):
        g = RngState(7).generator()
        X = g.standard_normal((4, 6))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        params = init_mlp([6, 5, 1], ["relu", SIGMOID], rng=RngState(8))

        def loss_fn(theta):
            p = unflatten_params(params, theta)
            loss, grads = eki_loss(p, X, y, omega=1.7, lambda_l2=1e-3)
            return loss, flatten_params(grads)

        assert grad_check(loss_fn, flatten_params(params)) < 1e-4

    def test_l2_counts_weights_not_biases(self):
        params = MlpParams([np.full((1, 2), 3.0)], [np.full(1, 100.0)],
                           [IDENTITY], [0.0])
        loss_no, _ = eki_loss(params, np.zeros((1, 2)), [0.0], lambda_l2=0.0)
        loss_l2, _ = eki_loss(params, np.zeros((1, 2)), [0.0], lambda_l2=0.5)
        assert loss_l2 - loss_no == pytest.approx(0.5 * 18.0, rel=1e-12)

    def test_loss_vanishes_at_confident_correct_predictions(self):
        logit = math.log((1.0 - 1e-6) / 1e-6)
        net_pos = MlpParams([np.zeros((1, 2))], [np.array([logit])], [SIGMOID], [0.0])
        loss_pos, _ = eki_loss(net_pos, np.zeros((1, 2)), [1.0])
        net_neg = MlpParams([np.zeros((1, 2))], [np.array([-logit])], [SIGMOID], [0.0])
        loss_neg, _ = eki_loss(net_neg, np.zeros((1, 2)), [0.0])
        for loss in (loss_pos, loss_neg):
            assert 0.0 < loss < 2e-6

    def test_empty_batch_rejected(self):
        with pytest.raises(InputError):
            eki_loss(zero_net(), np.zeros((0, 4)), [])

    def test_non_binary_labels_rejected(self):
        with pytest.raises(InputError):
            eki_loss(zero_net(), np.ones((1, 4)), [0.5])


class TestConfidence:
    def test_zero_rate_is_bitwise_deterministic(self):
        params = init_mlp([6, 4, 1], ["relu", SIGMOID], [0.0, 0.2], rng=RngState(9))
        x = RngState(10).generator().standard_normal(6)
        det, _ = mlp_forward(params, x)
        conf = infer_confidence(params, x, T=7, p=0.0, rng=RngState(11))
        assert conf.value == det[0]
        assert np.all(conf.per_pass == det[0])

    def test_zero_weights_give_half(self):
        params = MlpParams([np.zeros((3, 4)), np.zeros((1, 3))],
                           [np.zeros(3), np.zeros(1)],
                           ["relu", SIGMOID], [0.0, 0.5])
        for T, p in [(1, 0.0), (5, 0.3), (16, 0.9)]:
            conf = infer_confidence(params, np.ones(4), T=T, p=p, rng=RngState(12))
            assert conf.value == 0.5

    def test_exhaustive_masks_match_large_T_average(self):
        # single-layer net with input dropout p = 0.5: enumerate all masks
        g = RngState(13).generator()
        w, b = g.standard_normal((1, 8)), g.standard_normal(1)
        params = MlpParams([w], [b], [SIGMOID], [0.5])
        x = g.standard_normal(8)
        outs = []
        for bits in itertools.product([0.0, 1.0], repeat=8):
            out, _ = mlp_forward(params, x, dropout_enabled=True,
                                 masks=[np.array(bits)])
            outs.append(out[0])
        exact_mean = float(np.mean(outs))
        exact_std = float(np.std(outs))
        conf = infer_confidence(params, x, T=4096, p=0.5, rng=RngState(14))
        tolerance = 3.0 * exact_std / math.sqrt(4096)
        assert abs(conf.value - exact_mean) <= tolerance

    def test_value_is_mean_of_passes(self):
        params = init_mlp([5, 4, 1], ["relu", SIGMOID], [0.0, 0.4], rng=RngState(15))
        conf = infer_confidence(params, np.ones(5), T=32, p=0.4, rng=RngState(16))
        assert conf.value == pytest.approx(conf.per_pass.mean(), abs=1e-15)
        assert conf.per_pass.shape == (32,)
        assert 0.0 <= conf.value <= 1.0

    def test_batch_agrees_with_itself_deterministically(self):
        params = init_mlp([5, 4, 1], ["relu", SIGMOID], [0.0, 0.3], rng=RngState(17))
        X = RngState(18).generator().standard_normal((6, 5))
        a = infer_confidence_batch(params, X, T=8, p=0.3, rng=RngState(19))
        b = infer_confidence_batch(params, X, T=8, p=0.3, rng=RngState(19))
        np.testing.assert_array_equal(a, b)

    def test_invalid_passes_rejected(self):
        params = zero_net()
        with pytest.raises(InputError):
            infer_confidence(params, np.ones(4), T=0, rng=RngState(1))


@pytest.fixture(scope="module")
def trained_setup():
    world = generate_world(WorldSpec(embed_dim=32, concept_count=8,
                                     intra_noise=0.02, seed=20))
    triplets = sample_clean_triplets(world, 600, RngState(21))
    dataset = inject_noise(triplets, 0.5, rng=RngState(22))
    model = ArbiterModel(p_clean_correct=1.0, p_noisy_correct=1.0)
    anchor = build_anchor_set(dataset, model, 400, RngState(23))

    def embed_fn(Zr, Zm, Zt):
        Zq = Zr + Zm @ world.modality_map
        Zq = Zq / np.linalg.norm(Zq, axis=1, keepdims=True)
        return Zq, Zt

    return world, dataset, anchor, embed_fn


class TestTrainEki:
    def test_loss_decreases_on_separable_anchor(self, trained_setup):
        _, dataset, anchor, embed_fn = trained_setup
        hyper = EkiHyper(hidden=(32, 16), batch_size=64, epochs=2)
        params, losses = train_eki(anchor, dataset, hyper, seed=42,
                                   embed_fn=embed_fn)
        assert len(losses) == 2
        assert losses[-1] < losses[0]
        assert params.dims() == [128, 32, 16, 1]

    def test_detects_held_out_noise(self, trained_setup):
        world, dataset, anchor, embed_fn = trained_setup
        hyper = EkiHyper(hidden=(64, 32), batch_size=32, epochs=4,
                         learning_rate=2e-3)
        params, _ = train_eki(anchor, dataset, hyper, seed=42, embed_fn=embed_fn)
        held = inject_noise(sample_clean_triplets(world, 400, RngState(30)),
                            0.5, rng=RngState(31))
        Zr, Zm, Zt = held.arrays()
        Zq, Zte = embed_fn(Zr, Zm, Zt)
        gdv = compose_gdv_batch(Zq, Zte)
        c = infer_confidence_batch(params, gdv, T=16, p=0.1, rng=RngState(32))
        truth = held.clean_mask()
        acc = ((c > 0.5) == truth).mean()
        assert acc >= 0.85

    def test_raw_triplet_variant_needs_no_heads(self, trained_setup):
        _, dataset, anchor, _ = trained_setup
        hyper = EkiHyper(hidden=(16,), epochs=1, batch_size=64,
                         gdv_variant="triplet_raw")
        params, _ = train_eki(anchor, dataset, hyper, seed=1)
        assert params.input_dim == 3 * dataset.dim

    def test_empty_anchor_rejected(self, trained_setup):
        _, dataset, _, embed_fn = trained_setup
        with pytest.raises(ConfigError):
            train_eki([], dataset, EkiHyper(), seed=1, embed_fn=embed_fn)

    def test_unresolvable_id_rejected(self, trained_setup):
        _, dataset, _, embed_fn = trained_setup
        ghost = [AnchorRecord("no-such-id", Verdict("clean"))]
        with pytest.raises(ConfigError):
            train_eki(ghost, dataset, EkiHyper(), seed=1, embed_fn=embed_fn)

    def test_single_class_anchor_warns_and_uses_unit_weight(self):
        y = np.ones(10)
        with pytest.warns(UserWarning):
            assert resolve_class_weight(y, "balanced") == 1.0

    def test_balanced_weight_is_clamped_ratio(self):
        y = np.array([1.0] * 10 + [0.0] * 5)
        assert resolve_class_weight(y, "balanced") == 0.5
        y = np.array([1.0] + [0.0] * 100)
        assert resolve_class_weight(y, "balanced") == 10.0


class TestElboIdentity:
    def test_posterior_as_variational_gives_zero_kl(self):
        prior = np.full(4, 0.25)
        lik = np.array([0.9, 0.1, 0.3, 0.7])
        evidence = float(lik @ prior)
        posterior = lik * prior / evidence
        assert elbo_identity_check(prior, lik, posterior) < 1e-12

    def test_prior_as_variational(self):
        prior = np.array([0.1, 0.2, 0.3, 0.4])
        lik = np.array([2.0, 0.5, 1.5, 0.25])
        assert elbo_identity_check(prior, lik, prior) < 1e-12

    def test_random_variational_masses(self):
        g = RngState(40).generator()
        for _ in range(100):
            n = int(g.integers(2, 17))
            prior = g.random(n) + 0.05
            prior /= prior.sum()
            lik = g.random(n) * 10 + 1e-3
            q = g.random(n) + 0.05
            q /= q.sum()
            assert elbo_identity_check(prior, lik, q) < 1e-10

    def test_unnormalized_mass_rejected(self):
        with pytest.raises(InputError):
            elbo_identity_check(np.array([0.5, 0.6]), np.ones(2),
                                np.array([0.5, 0.5]))

    def test_oversized_space_rejected(self):
        n = 17
        u = np.full(n, 1.0 / n)
        with pytest.raises(InputError):
            elbo_identity_check(u, np.ones(n), u)


class TestCheckpoint:
    def test_round_trip_is_bitwise_exact(self, tmp_path):
        params = init_mlp([10, 6, 1], ["relu", SIGMOID], [0.0, 0.1],
                          rng=RngState(50))
        # exercise awkward magnitudes
        params.weights[0][0, 0] = 1e-17
        params.weights[0][0, 1] = -3.141592653589793e5
        path = tmp_path / "proxy.json"
        save_checkpoint(params, path, {"mc_passes": 16, "dropout_rate": 0.1})
        back, hyper = load_checkpoint(path)
        assert hyper["mc_passes"] == 16
        assert back.activations == params.activations
        assert back.dropout == params.dropout
        for w1, w2 in zip(params.weights, back.weights):
            np.testing.assert_array_equal(w1, w2)
        for b1, b2 in zip(params.biases, back.biases):
            np.testing.assert_array_equal(b1, b2)

    def test_checkpoint_is_single_json_document(self, tmp_path):
        params = build_proxy(12, EkiHyper(hidden=(4, 2)), RngState(51))
        path = tmp_path / "proxy.json"
        save_checkpoint(params, path)
        doc = json.loads(path.read_text())
        assert doc["schema"] == "airknow-ckpt-v1"
        assert doc["arch"] == [12, 4, 2, 1]
        assert len(doc["layers"]) == 3

    def test_corrupted_schema_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": "other", "layers": []}')
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_arch_mismatch_rejected(self, tmp_path):
        params = build_proxy(8, EkiHyper(hidden=(4,)), RngState(52))
        path = tmp_path / "proxy.json"
        save_checkpoint(params, path)
        doc = json.loads(path.read_text())
        doc["arch"] = [9, 4, 1]
        path.write_text(json.dumps(doc))
        with pytest.raises(ParseError):
            load_checkpoint(path)


class TestFitPlumbing:
    def test_standardization_fold_preserves_predictions(self):
        g = RngState(60).generator()
        X = g.standard_normal((64, 10)) * np.array([1e-3] * 5 + [10.0] * 5)
        y = (X[:, 0] * 1e3 + X[:, 5] / 10 > 0).astype(float)
        hyper = EkiHyper(hidden=(8,), epochs=30, batch_size=16,
                         learning_rate=5e-3, dropout=0.0, mc_passes=1)
        params, losses = fit_confidence_mlp(X, y, hyper, seed=0)
        c = infer_confidence_batch(params, X, T=1, p=0.0)
        acc = ((c > 0.5) == (y == 1)).mean()
        assert acc > 0.9
        assert losses[-1] < losses[0]

    def test_sgd_option_runs(self):
        g = RngState(61).generator()
        X = g.standard_normal((32, 4))
        y = (X[:, 0] > 0).astype(float)
        hyper = EkiHyper(hidden=(4,), epochs=2, batch_size=8, optimizer="sgd",
                         dropout=0.0)
        params, losses = fit_confidence_mlp(X, y, hyper, seed=0)
        assert len(losses) == 2
