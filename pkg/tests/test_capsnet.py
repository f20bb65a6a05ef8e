import numpy as np
import pytest

from colorcapsnet import capsnet
from colorcapsnet.capsnet import ColorCapsNetConfig
from colorcapsnet.checkpoint import Checkpoint
from colorcapsnet.errors import ConfigurationError, DomainError, ShapeError, WeightImportError
from colorcapsnet.tensor_core import gradcheck


@pytest.fixture
def small_model():
    return capsnet.build_model(capsnet.reduced_config(), seed=7)


def routing_oracle(u_hat: np.ndarray, iterations: int):
    """Loop-by-loop routing on a single example u_hat[primary, C, dim]; returns (v, final couplings)."""
    primary, num_out, _ = u_hat.shape
    b = np.zeros((primary, num_out))
    for it in range(iterations):
        c = np.zeros_like(b)
        for i in range(primary):
            e = np.exp(b[i] - b[i].max())
            c[i] = e / e.sum()
        v = []
        for j in range(num_out):
            s = sum(c[i, j] * u_hat[i, j] for i in range(primary))
            norm = np.sqrt(np.sum(s * s))
            v.append(s * norm / (1.0 + norm * norm) if norm > 0 else s * 0.0)
        v = np.array(v)
        if it < iterations - 1:
            for i in range(primary):
                for j in range(num_out):
                    b[i, j] += float(np.dot(u_hat[i, j], v[j]))
    return v, c


class TestConfig:

    def test_defaults(self):
        config = ColorCapsNetConfig()
        assert (config.patch_size, config.routing_iterations, config.num_output_capsules) == (9, 1, 6)
        assert config.detector_channels == 64 and config.primary_filters == 256

    @pytest.mark.parametrize("field, value", [("patch_size", 7), ("routing_iterations", 0),
                                              ("num_output_capsules", 0)])
    def test_rejects_out_of_range(self, field, value):
        with pytest.raises(ValueError):
            ColorCapsNetConfig(**{field: value})


class TestSquash:

    def test_zero_vector(self):
        assert np.array_equal(capsnet.squash(np.zeros(4)), np.zeros(4))

    def test_unit_vector(self):
        np.testing.assert_allclose(capsnet.squash(np.array([1.0, 0.0, 0.0])), [0.5, 0.0, 0.0], atol=1e-7)

    def test_three_e2(self):
        np.testing.assert_allclose(capsnet.squash(np.array([0.0, 3.0])), [0.0, 0.9], atol=1e-7)

    def test_norm_below_one_and_direction_kept(self, rng):
        s = rng.normal(0, 5, size=(200, 8))
        v = capsnet.squash(s)
        assert np.all(np.linalg.norm(v, axis=-1) < 1.0)
        cosine = np.sum(s * v, axis=-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(v, axis=-1))
        np.testing.assert_allclose(cosine, 1.0, atol=1e-6)

    def test_backward_gradcheck(self, rng):
        weights = rng.standard_normal((3, 5))

        def f(p):
            return (float(np.sum(capsnet.squash(p["s"]) * weights)),
                    {"s": capsnet.squash_backward(weights, p["s"])})

        assert gradcheck(f, {"s": rng.standard_normal((3, 5))}) < 1e-4


class TestDynamicRouting:

    def test_single_iteration_is_uniform_average(self, rng):
        u_hat = rng.standard_normal((3, 32, 6, 16)).astype(np.float32)
        caps = capsnet.dynamic_routing(u_hat, 1)
        expected = capsnet.squash(u_hat.sum(axis=1) / 6)
        assert np.array_equal(caps.activities, expected)

    def test_symmetric_outputs(self, rng):
        u = rng.standard_normal(4)
        u_hat = np.stack([u, u])[None, None]  # [1, 1, 2, 4]
        caps = capsnet.dynamic_routing(u_hat, 1)
        np.testing.assert_allclose(caps.activities[0, 0], capsnet.squash(u / 2), atol=1e-12)
        np.testing.assert_allclose(caps.activities[0, 1], capsnet.squash(u / 2), atol=1e-12)

    def test_agreement_raises_coupling(self):
        u_hat = np.array([[[1.0, 1.0], [1.0, -1.0]],
                          [[1.0, 1.0], [-1.0, 1.0]]])  # [primary=2, C=2, dim=2]
        caps = capsnet.dynamic_routing(u_hat[None], 3)
        assert np.all(caps.couplings[0, :, 0] > 0.5)
        v, c = routing_oracle(u_hat, 3)
        np.testing.assert_allclose(caps.activities[0], v, atol=1e-6)
        np.testing.assert_allclose(caps.couplings[0], c, atol=1e-6)

    @pytest.mark.parametrize("iterations", [2, 3])
    def test_matches_oracle_on_random(self, rng, iterations):
        u_hat = rng.standard_normal((2, 5, 3, 4))
        caps = capsnet.dynamic_routing(u_hat, iterations)
        for example in range(2):
            v, _ = routing_oracle(u_hat[example], iterations)
            np.testing.assert_allclose(caps.activities[example], v, atol=1e-6)

    def test_couplings_are_distributions(self, rng):
        for _ in range(1000 // 50):
            caps = capsnet.dynamic_routing(rng.standard_normal((50, 4, 3, 5)), 3)
            for couplings in caps.coupling_trace:
                assert np.all(couplings >= 0)
                np.testing.assert_allclose(couplings.sum(axis=-1), 1.0, atol=1e-6)

    def test_zero_iterations(self, rng):
        with pytest.raises(ConfigurationError):
            capsnet.dynamic_routing(rng.standard_normal((1, 2, 2, 2)), 0)


class TestBuildModel:

    def test_same_seed_bit_identical(self):
        a = capsnet.build_model(ColorCapsNetConfig(), seed=3)
        b = capsnet.build_model(ColorCapsNetConfig(), seed=3)
        for name, value in a.named_tensors().items():
            assert np.array_equal(value, b.named_tensors()[name])

    def test_parameter_count_matches_closed_form(self):
        config = ColorCapsNetConfig()
        count = capsnet.count_parameters(config)
        assert capsnet.build_model(config).num_parameters() == count.total
        assert count.breakdown["conv1"] == 640
        assert count.breakdown["routing"] == 24576

    def test_more_capsules_more_parameters(self):
        six = capsnet.count_parameters(ColorCapsNetConfig(num_output_capsules=6))
        ten = capsnet.count_parameters(ColorCapsNetConfig(num_output_capsules=10))
        assert six.total < ten.total
        # routing grows by P*d*o per capsule, decoder1 by o*hidden per capsule
        assert ten.total - six.total == 4 * (32 * 8 * 16 + 16 * 512)

    def test_batchnorm_toggle(self):
        without = capsnet.count_parameters(ColorCapsNetConfig(batchnorm=False))
        assert not any(name.startswith(("bn", "primary_bn")) for name in without.breakdown)
        assert capsnet.count_parameters(ColorCapsNetConfig()).total - without.total == 2 * (64 + 64 + 256)

    def test_vgg_import_missing_tensor(self):
        rng = np.random.default_rng(0)
        tensors = {"vgg.conv1_1.weight": rng.standard_normal((64, 1, 3, 3)),
                   "vgg.conv1_1.bias": np.zeros(64),
                   "vgg.conv1_2.weight": rng.standard_normal((64, 64, 3, 3))}
        with pytest.raises(WeightImportError, match="vgg.conv1_2.bias") as info:
            capsnet.build_model(ColorCapsNetConfig(), vgg_weights=Checkpoint.from_tensors(tensors))
        assert info.value.names == ["vgg.conv1_2.bias"]

    def test_vgg_import_overwrites_first_layers(self):
        rng = np.random.default_rng(0)
        tensors = {"vgg.conv1_1.weight": rng.standard_normal((64, 1, 3, 3)),
                   "vgg.conv1_1.bias": rng.standard_normal(64),
                   "vgg.conv1_2.weight": rng.standard_normal((64, 64, 3, 3)),
                   "vgg.conv1_2.bias": rng.standard_normal(64)}
        model = capsnet.build_model(ColorCapsNetConfig(), vgg_weights=Checkpoint.from_tensors(tensors))
        np.testing.assert_array_equal(model.layers["conv2"].params["bias"],
                                      tensors["vgg.conv1_2.bias"].astype(np.float32))
        assert "conv2.weight" in model.named_parameters()


class TestForward:

    def test_output_shape_and_range(self):
        model = capsnet.build_model(ColorCapsNetConfig(), seed=0)
        gray = np.random.default_rng(0).uniform(0, 1, (2, 1, 9, 9)).astype(np.float32)
        lab, caps, _ = capsnet.forward(model, gray, "train")
        assert lab.shape == (2, 3, 9, 9)
        assert np.all((lab > 0) & (lab < 1))
        assert caps.activities.shape == (2, 6, 16)

    def test_identical_inputs_identical_outputs(self, small_model, rng):
        patch = rng.uniform(0, 1, (1, 1, 9, 9)).astype(np.float32)
        lab, _, _ = capsnet.forward(small_model, np.concatenate([patch, patch]), "infer")
        assert np.array_equal(lab[0], lab[1])

    def test_deterministic(self, rng):
        gray = rng.uniform(0, 1, (3, 1, 9, 9)).astype(np.float32)
        first = capsnet.forward(capsnet.build_model(capsnet.reduced_config(), seed=1), gray, "infer")[0]
        second = capsnet.forward(capsnet.build_model(capsnet.reduced_config(), seed=1), gray, "infer")[0]
        assert np.array_equal(first, second)

    def test_infer_is_batch_independent(self, small_model, rng):
        gray = rng.uniform(0, 1, (6, 1, 9, 9)).astype(np.float32)
        together = capsnet.forward(small_model, gray, "infer")[0]
        alone = capsnet.forward(small_model, gray[2:3], "infer")[0]
        assert np.array_equal(together[2:3], alone)

    def test_infer_is_batch_independent_at_full_width(self, rng):
        model = capsnet.build_model(ColorCapsNetConfig(), seed=0)
        gray = rng.uniform(0, 1, (16, 1, 9, 9)).astype(np.float32)
        together = capsnet.forward(model, gray, "infer")[0]
        for i in range(gray.shape[0]):
            assert np.array_equal(together[i:i + 1], capsnet.forward(model, gray[i:i + 1], "infer")[0])

    def test_single_patch_training_batch_warns(self, small_model, rng, caplog):
        with caplog.at_level("WARNING", logger="colorcapsnet.capsnet"):
            capsnet.forward(small_model, rng.uniform(0, 1, (1, 1, 9, 9)).astype(np.float32), "train")
        assert "single patch" in caplog.text

    def test_domain_error(self, small_model):
        with pytest.raises(DomainError):
            capsnet.forward(small_model, np.full((1, 1, 9, 9), 1.5, dtype=np.float32))

    def test_shape_error(self, small_model):
        with pytest.raises(ShapeError):
            capsnet.forward(small_model, np.zeros((1, 1, 8, 8), dtype=np.float32))

    @pytest.mark.parametrize("overrides", [{"feature_detector": "capsnet", "feature_channels": 8},
                                           {"batchnorm": False}, {"patch_size": 11},
                                           {"routing_iterations": 3, "num_output_capsules": 10}])
    def test_variants_run(self, rng, overrides):
        config = capsnet.reduced_config(**overrides)
        model = capsnet.build_model(config)
        n = config.patch_size
        lab, _, _ = capsnet.forward(model, rng.uniform(0, 1, (2, 1, n, n)).astype(np.float32), "train")
        assert lab.shape == (2, 3, n, n)


class TestLosses:

    def test_mse_zero(self):
        x = np.ones((1, 3, 9, 9))
        assert capsnet.mse_loss(x, x)[0] == 0.0

    def test_mse_single_difference(self):
        pred = np.zeros((1, 3, 9, 9))
        target = pred.copy()
        target[0, 1, 4, 4] = 3.0
        loss, grad = capsnet.mse_loss(pred, target)
        assert loss == pytest.approx(9 / 243)
        np.testing.assert_allclose(grad, 2.0 * (pred - target) / 243)

    @pytest.mark.parametrize("target, length, expected", [(1.0, 0.9, 0.0), (1.0, 0.0, 0.81), (0.0, 0.6, 0.125)])
    def test_margin_anchor_values(self, target, length, expected):
        activities = np.zeros((1, 1, 4))
        activities[0, 0, 0] = length
        loss, _ = capsnet.margin_loss(activities, np.array([[target]]), 0.5)
        assert loss == pytest.approx(expected)

    def test_margin_gradcheck(self, rng):
        targets = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

        def f(p):
            loss, grad = capsnet.margin_loss(p["v"], targets)
            return loss, {"v": grad}

        assert gradcheck(f, {"v": rng.normal(0, 0.3, (2, 3, 4))}, step=1e-6) < 1e-4

    def test_capsule_targets_one_hot(self, rng):
        lab = rng.uniform(0, 1, (5, 3, 9, 9))
        targets = capsnet.capsule_targets(lab, 6)
        np.testing.assert_array_equal(targets.sum(axis=1), 1.0)


class TestTraining:

    def test_zero_learning_rate_keeps_model(self, small_model, rng):
        gray = rng.uniform(0, 1, (4, 1, 9, 9)).astype(np.float32)
        lab = rng.uniform(0, 1, (4, 3, 9, 9)).astype(np.float32)
        optimizer = capsnet.init_optimizer(small_model, lr=0.0)
        model, _, loss = capsnet.train_step(small_model, optimizer, gray, lab)
        assert np.isfinite(loss)
        for name, value in small_model.named_tensors().items():
            assert np.array_equal(model.named_tensors()[name], value)
        assert "bn1.running_mean" in small_model.named_buffers()

    def test_running_statistics_advance_with_positive_learning_rate(self, small_model, rng):
        gray = rng.uniform(0, 1, (4, 1, 9, 9)).astype(np.float32)
        lab = rng.uniform(0, 1, (4, 3, 9, 9)).astype(np.float32)
        model, _, _ = capsnet.train_step(small_model, capsnet.init_optimizer(small_model), gray, lab)
        assert not np.array_equal(model.named_buffers()["bn1.running_mean"],
                                  small_model.named_buffers()["bn1.running_mean"])

    def test_mismatched_batches(self, small_model):
        with pytest.raises(ShapeError):
            capsnet.train_step(small_model, capsnet.init_optimizer(small_model),
                               np.zeros((2, 1, 9, 9), dtype=np.float32), np.zeros((3, 3, 9, 9), dtype=np.float32))

    def test_same_seed_same_trajectory(self, rng):
        gray = rng.uniform(0, 1, (4, 1, 9, 9)).astype(np.float32)
        lab = rng.uniform(0, 1, (4, 3, 9, 9)).astype(np.float32)

        def trajectory():
            model = capsnet.build_model(capsnet.reduced_config(), seed=5)
            optimizer = capsnet.init_optimizer(model)
            losses = []
            for _ in range(5):
                model, optimizer, loss = capsnet.train_step(model, optimizer, gray, lab)
                losses.append(loss)
            return losses

        assert trajectory() == trajectory()

    @pytest.mark.slow
    def test_overfits_fixed_batch(self, rng):
        gray = rng.uniform(0, 1, (4, 1, 9, 9)).astype(np.float32)
        lab = rng.uniform(0.05, 0.25, (4, 3, 9, 9)).astype(np.float32)
        model = capsnet.build_model(ColorCapsNetConfig(), seed=0)
        optimizer = capsnet.init_optimizer(model)
        losses = []
        for _ in range(200):
            model, optimizer, loss = capsnet.train_step(model, optimizer, gray, lab)
            losses.append(loss)
        assert losses[-1] < 0.25 * losses[0]

    @pytest.mark.parametrize("loss", ["mse", "margin"])
    def test_end_to_end_gradcheck(self, loss):
        assert capsnet.end_to_end_gradcheck(capsnet.reduced_config(loss=loss), seed=0) < 1e-3

    def test_end_to_end_gradcheck_three_iterations_is_finite(self):
        # final couplings are held constant, so only finiteness is meaningful for r > 1
        config = capsnet.reduced_config(routing_iterations=3)
        assert np.isfinite(capsnet.end_to_end_gradcheck(config, seed=0, max_coords=2))

    def test_colorize_patches_keeps_order(self, small_model, rng):
        gray = rng.uniform(0, 1, (7, 1, 9, 9)).astype(np.float32)
        batched = capsnet.colorize_patches(small_model, gray, batch_size=3)
        whole = capsnet.colorize_patches(small_model, gray, batch_size=64)
        assert np.array_equal(batched, whole)
