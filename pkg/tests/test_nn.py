import numpy as np
import pytest

from faqsim.errors import ConfigError
from faqsim.faq import faq_convert, inject
from faqsim.faultmodel import generate_fault_map
from faqsim.io import Dataset, synthesize_gaussian_clusters
from faqsim.mapper import DataflowConfig, build_error_mask
from faqsim.model import QuantizedLayer, QuantizedModel, models_equal
from faqsim.nn import (
    _FloatLayer,
    calibrate_activation_scales,
    evaluate,
    forward,
    loss_and_gradients,
    retrain_with_faq,
    train_fixture,
)
from faqsim.numfmt import QuantSpec, ScaleFactor


def _fc_layer(weight, bias=None, activation="linear"):
    weight = np.asarray(weight, dtype=np.float64)
    scale = ScaleFactor(np.abs(weight).max() / 127 or 1.0, "w")
    codes = np.rint(weight / scale.scale).astype(np.int16)
    return QuantizedLayer(kind="fc", codes=codes, scale=scale,
                          bias=None if bias is None else np.asarray(bias, float),
                          activation=activation)


class TestForward:
    def test_identity_conv(self):
        # 1x1 kernel with weight 1.0 and zero bias passes input through
        codes = np.full((1, 1, 1, 1), 127, dtype=np.int16)
        layer = QuantizedLayer(kind="conv2d", codes=codes,
                               scale=ScaleFactor(1.0 / 127, "w"),
                               bias=np.zeros(1))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        x = np.arange(32, dtype=np.float64).reshape(1, 1, 4, 8)
        assert np.allclose(forward(model, x), x)

    def test_identity_fc(self):
        layer = _fc_layer(np.eye(5))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        x = np.linspace(-2, 2, 10).reshape(2, 5)
        assert np.allclose(forward(model, x), x)

    def test_relu_layer(self):
        model = QuantizedModel(layers=(QuantizedLayer(kind="relu"),),
                               spec=QuantSpec(8))
        out = forward(model, np.array([[-3.0, 0.0, 5.0]]))
        assert np.array_equal(out, [[0.0, 0.0, 5.0]])

    def test_deterministic(self, cnn_bundle):
        _, test, model = cnn_bundle
        a = forward(model, test.images[:16])
        b = forward(model, test.images[:16])
        assert np.array_equal(a, b)

    def test_shape_error(self):
        model = QuantizedModel(layers=(_fc_layer(np.eye(5)),), spec=QuantSpec(8))
        with pytest.raises(ValueError):
            forward(model, np.zeros((2, 3)))

    @pytest.mark.parametrize("h,w,pad,stride", [
        (8, 8, 1, 1), (9, 7, 0, 1), (10, 10, 2, 2), (5, 5, 1, 2),
    ])
    def test_conv_output_shape(self, h, w, pad, stride):
        codes = np.ones((3, 2, 3, 3), dtype=np.int16)
        layer = QuantizedLayer(kind="conv2d", codes=codes,
                               scale=ScaleFactor(0.1, "w"),
                               stride=stride, padding=pad)
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        out = forward(model, np.zeros((2, 2, h, w)))
        oh = (h + 2 * pad - 3) // stride + 1
        ow = (w + 2 * pad - 3) // stride + 1
        assert out.shape == (2, 3, oh, ow)

    def test_maxpool(self):
        model = QuantizedModel(layers=(QuantizedLayer(kind="maxpool2x2"),),
                               spec=QuantSpec(8))
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = forward(model, x)
        assert np.array_equal(out[0, 0], [[5, 7], [13, 15]])


class TestEvaluate:
    def test_constant_logits_balanced_set(self):
        layer = _fc_layer(np.zeros((10, 4)))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        labels = np.repeat(np.arange(10), 5)
        data = Dataset(images=np.random.default_rng(0).normal(size=(50, 4)),
                       labels=labels)
        assert evaluate(model, data) == pytest.approx(0.1)

    def test_fixture_reaches_95_percent(self, cnn_bundle):
        train, _, model = cnn_bundle
        assert evaluate(model, train) >= 0.95

    def test_random_mlp_near_chance(self):
        data = synthesize_gaussian_clusters(seed=1, classes=10,
                                            samples_per_class=30, shape=(16,))
        accs = [
            evaluate(train_fixture(data, "mlp2", epochs=0, learning_rate=0.1,
                                   seed=seed), data)
            for seed in range(20)
        ]
        assert 0.05 <= np.mean(accs) <= 0.15

    def test_empty_dataset_rejected(self):
        layer = _fc_layer(np.zeros((10, 4)))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        data = Dataset(images=np.zeros((0, 4)), labels=np.zeros(0, dtype=np.int64))
        with pytest.raises(ValueError):
            evaluate(model, data)

    def test_label_out_of_range_rejected(self):
        layer = _fc_layer(np.zeros((3, 4)))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        data = Dataset(images=np.zeros((2, 4)), labels=np.array([0, 3]))
        with pytest.raises(ValueError):
            evaluate(model, data)


class TestCalibration:
    def test_all_zero_batch_unit_scales(self):
        # bias-free model: a zero batch keeps every tensor at zero
        layer = _fc_layer(np.eye(4))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        scales = calibrate_activation_scales(model, np.zeros((4, 4)))
        assert all(sf.scale == 1.0 for sf in scales.values())

    def test_max_abs_formula(self):
        layer = _fc_layer(np.eye(4))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        batch = np.zeros((2, 4))
        batch[0, 0] = 2.54
        scales = calibrate_activation_scales(model, batch)
        assert scales["input"].scale == pytest.approx(2.54 / 127)

    def test_scales_monotone_in_batch_magnitude(self):
        layer = _fc_layer(np.eye(4))
        model = QuantizedModel(layers=(layer,), spec=QuantSpec(8))
        small = calibrate_activation_scales(model, np.full((2, 4), 0.5))
        large = calibrate_activation_scales(model, np.full((2, 4), 2.0))
        assert large["layer0"].scale > small["layer0"].scale

    def test_fake_quant_roundtrip_close(self, cnn_bundle):
        _, test, model = cnn_bundle
        scales = calibrate_activation_scales(model, test.images[:64])
        model_fq = model.with_activation_scales(scales)
        plain = evaluate(model_fq, test)
        fq = evaluate(model_fq, test, fake_quant_activations=True)
        assert abs(plain - fq) <= 0.05

    def test_fake_quant_requires_scales(self, cnn_bundle):
        _, test, model = cnn_bundle
        with pytest.raises(ValueError):
            forward(model, test.images[:4], fake_quant_activations=True)


class TestGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        layers = [
            _FloatLayer("conv2d", rng.normal(size=(2, 1, 3, 3)) * 0.5,
                        rng.normal(size=2) * 0.1, activation="relu", padding=1),
            _FloatLayer(kind="maxpool2x2"),
            _FloatLayer(kind="flatten"),
            _FloatLayer("fc", rng.normal(size=(3, 8)) * 0.5,
                        rng.normal(size=3) * 0.1),
        ]
        x = rng.normal(size=(4, 1, 4, 4))
        y = rng.integers(0, 3, size=4)
        _, grads = loss_and_gradients(layers, x, y)

        def loss_at():
            value, _ = loss_and_gradients(layers, x, y)
            return value

        eps = 1e-6
        for li, grad in enumerate(grads):
            if grad is None:
                continue
            for name, analytic in zip(("weight", "bias"), grad):
                param = getattr(layers[li], name)
                flat = param.ravel()
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + eps
                    up = loss_at()
                    flat[k] = orig - eps
                    down = loss_at()
                    flat[k] = orig
                    numeric = (up - down) / (2 * eps)
                    assert analytic.ravel()[k] == pytest.approx(
                        numeric, rel=1e-4, abs=1e-7
                    )


class TestTrainFixture:
    def test_separable_two_class(self):
        data = synthesize_gaussian_clusters(seed=2, classes=2,
                                            samples_per_class=100, shape=(2,),
                                            mean_scale=2.0, noise=0.3)
        model = train_fixture(data, "mlp2", epochs=50, learning_rate=0.1, seed=0)
        assert evaluate(model, data) >= 0.98

    def test_zero_learning_rate_keeps_init(self):
        data = synthesize_gaussian_clusters(seed=2, classes=3,
                                            samples_per_class=20, shape=(8,))
        frozen = train_fixture(data, "mlp2", epochs=5, learning_rate=0.0, seed=4)
        init = train_fixture(data, "mlp2", epochs=0, learning_rate=0.5, seed=4)
        assert models_equal(frozen, init)

    def test_deterministic(self):
        data = synthesize_gaussian_clusters(seed=2, classes=3,
                                            samples_per_class=20, shape=(8,))
        a = train_fixture(data, "mlp2", epochs=3, learning_rate=0.1, seed=9)
        b = train_fixture(data, "mlp2", epochs=3, learning_rate=0.1, seed=9)
        assert models_equal(a, b)

    def test_unknown_architecture(self):
        data = synthesize_gaussian_clusters(seed=2, classes=2,
                                            samples_per_class=5, shape=(4,))
        with pytest.raises(ValueError):
            train_fixture(data, "resnet18", epochs=1, learning_rate=0.1, seed=0)


@pytest.fixture(scope="module")
def retrain_setup(mlp_bundle, lut8):
    train, _, model = mlp_bundle
    fmap = generate_fault_map(256, 256, 8, 0.1, seed=21)
    mask = build_error_mask(model, fmap, DataflowConfig())
    return train, model, mask, lut8


class TestRetrain:

    def test_trace_length(self, retrain_setup):
        train, model, mask, lut8 = retrain_setup
        _, trace = retrain_with_faq(model, mask, lut8, train, epochs=2,
                                    learning_rate=0.05, use_faq=True, seed=0)
        assert len(trace) == 3

    def test_zero_epochs_with_faq_equals_convert(self, retrain_setup):
        train, model, mask, lut8 = retrain_setup
        result, trace = retrain_with_faq(model, mask, lut8, train, epochs=0,
                                         learning_rate=0.05, use_faq=True, seed=0)
        converted = faq_convert(model, mask, lut8)
        assert models_equal(result, converted)
        assert trace == [evaluate(converted, train)]

    def test_zero_epochs_without_faq_is_injected_baseline(self, retrain_setup):
        train, model, mask, _ = retrain_setup
        result, trace = retrain_with_faq(model, mask, None, train, epochs=0,
                                         learning_rate=0.05, use_faq=False, seed=0)
        assert models_equal(result, model)
        assert trace == [evaluate(inject(model, mask), train)]

    def test_zero_rate_matches_plain_faultfree_loop(self, mlp_bundle, lut8):
        train, _, model = mlp_bundle
        fmap = generate_fault_map(256, 256, 8, 0.0, seed=0)
        mask = build_error_mask(model, fmap, DataflowConfig())
        _, with_faq = retrain_with_faq(model, mask, lut8, train, epochs=2,
                                       learning_rate=0.05, use_faq=True, seed=1)
        _, without = retrain_with_faq(model, mask, None, train, epochs=2,
                                      learning_rate=0.05, use_faq=False, seed=1)
        assert with_faq == without  # projection and masking are identities

    def test_faq_requires_lut(self, retrain_setup):
        train, model, mask, _ = retrain_setup
        with pytest.raises(ConfigError):
            retrain_with_faq(model, mask, None, train, epochs=1,
                             learning_rate=0.05, use_faq=True, seed=0)

    def test_faq_recovers_better(self, retrain_setup):
        train, model, mask, lut8 = retrain_setup
        _, tr_with = retrain_with_faq(model, mask, lut8, train, epochs=2,
                                      learning_rate=0.05, use_faq=True, seed=2)
        _, tr_without = retrain_with_faq(model, mask, None, train, epochs=2,
                                         learning_rate=0.05, use_faq=False, seed=2)
        assert tr_with[-1] >= tr_without[-1]
