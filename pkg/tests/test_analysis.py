import contextlib

import numpy as np
import pytest

from robustlab import tensor as T
from robustlab.analysis import (AttackSetting, EvalReport, GradientMap,
                                RobustnessRanking, _normalize_map, evaluate,
                                gradient_map, gradient_maps_batch,
                                gradmap_classification, mean_attention_by_cell,
                                render_attention_map, robustness_ranking,
                                write_pgm, write_ranking_csv)
from robustlab.attacks import AttackConfig, accuracy, pgd
from robustlab.data_io import Dataset
from robustlab.network import attention_pool, build_mnist_cnn, build_mini_resnet
from robustlab.tensor import ShapeError, Tensor


class PixelAttentionNet:
    """Duck-typed attention model whose locations are the image pixels.

    local feature at location n is the pixel value itself; compatibility
    score equals the pixel, so attention follows brightness. Exposes the
    same surface the analyses need.
    """

    def __init__(self, hw=2):
        self.hw = hw
        self.with_attention = True
        self.spec = {"arch": "pixel", "with_attention": True}
        self.params = {}

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        b = x.shape[0]
        n = self.hw * self.hw
        local = T.reshape(x, (b, n, 1))
        scores = T.mul(T.reshape(x, (b, n)), 8.0)
        weights, descriptor = attention_pool(local, scores)
        logits = T.concat([descriptor, T.mul(descriptor, -1.0)], axis=1)
        return type("O", (), {
            "local_features": local, "attention_weights": weights,
            "descriptor": descriptor, "logits": logits})()

    def predict(self, x):
        return self.forward(x).logits.data.argmax(axis=1)

    @contextlib.contextmanager
    def frozen(self):
        yield self


def _balanced_data(rng, n_per_class=20, classes=10):
    labels = np.repeat(np.arange(classes), n_per_class)
    images = rng.uniform(0, 1, (len(labels), 1, 28, 28)).astype(np.float32)
    return Dataset(images, labels)


@pytest.fixture(scope="module")
def mnist_net():
    return build_mnist_cnn(seed=0)


class TestEvaluate:
    def test_zero_epsilon_suite_equals_natural(self, mnist_net):
        data = _balanced_data(np.random.default_rng(0), n_per_class=4)
        suite = [AttackSetting(kind="pgd", epsilon=0.0, steps=3),
                 AttackSetting(kind="natural")]
        report = evaluate(mnist_net, data, suite)
        assert all(acc == report.natural_accuracy for acc in report.cells.values())

    def test_untrained_net_chance_level(self, mnist_net):
        data = _balanced_data(np.random.default_rng(1), n_per_class=30)
        report = evaluate(mnist_net, data, [])
        assert abs(report.natural_accuracy - 0.1) <= 0.03

    def test_whitebox_cell_matches_example_at_a_time(self, mnist_net):
        data = _balanced_data(np.random.default_rng(2), n_per_class=2)
        setting = AttackSetting(kind="pgd", epsilon=0.2, alpha=0.1, steps=2,
                                random_start=False)
        report = evaluate(mnist_net, data, [setting])
        correct = 0
        for i in range(len(data)):
            batch = pgd(mnist_net, data.images[i:i + 1], data.labels[i:i + 1],
                        setting.to_attack_config())
            correct += int(mnist_net.predict(batch.adversarial)[0] == data.labels[i])
        assert report.cells["white:pgd:2"] == correct / len(data)

    def test_missing_transfer_source_rejected(self, mnist_net):
        data = _balanced_data(np.random.default_rng(3), n_per_class=1)
        with pytest.raises(ValueError, match="transfer"):
            evaluate(mnist_net, data, [AttackSetting(kind="pgd", epsilon=0.1,
                                                     steps=1, transfer=True)])

    def test_report_validates_range(self):
        with pytest.raises(ValueError):
            EvalReport(natural_accuracy=1.2)

    def test_report_json_roundtrip(self, mnist_net):
        import json
        data = _balanced_data(np.random.default_rng(4), n_per_class=1)
        report = evaluate(mnist_net, data, [], provenance={"seed": 0})
        loaded = json.loads(report.to_json())
        assert loaded["natural_accuracy"] == report.natural_accuracy


class TestGradientMap:
    def test_constant_raw_normalizes_to_half(self):
        assert np.all(_normalize_map(np.full((1, 4, 4), 3.0), None) == 0.5)

    def test_affine_rescale_no_clip(self):
        out = _normalize_map(np.array([-1.0, 0.0, 1.0]), None)
        assert np.allclose(out, [0.0, 0.5, 1.0])

    def test_clipping_four_pixel_oracle(self):
        raw = np.array([10.0, 0.1, 0.2, 0.3])
        mu, sd = raw.mean(), raw.std()
        lo, hi = mu - 3 * sd, mu + 3 * sd
        clipped = [min(max(v, lo), hi) for v in raw]
        cmin, cmax = min(clipped), max(clipped)
        expected = [(v - cmin) / (cmax - cmin) for v in clipped]
        assert np.allclose(_normalize_map(raw, 3.0), expected, atol=1e-12)

    def test_monotone_without_clipping(self, mnist_net):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (1, 28, 28)).astype(np.float32)
        gm = gradient_map(mnist_net, x, 3, clip_sigmas=None)
        flat_raw = gm.raw.reshape(-1)
        flat_norm = gm.normalized.reshape(-1)
        order = np.argsort(flat_raw)
        assert np.all(np.diff(flat_norm[order]) >= 0)
        assert isinstance(gm, GradientMap)

    def test_batch_maps_match_single(self, mnist_net):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, (3, 1, 28, 28)).astype(np.float32)
        y = np.array([1, 2, 3])
        maps = gradient_maps_batch(mnist_net, x, y)
        for i in range(3):
            single = gradient_map(mnist_net, x[i], y[i]).normalized
            assert np.allclose(maps[i], single, atol=1e-6)


class TestGradmapClassification:
    def test_noise_maps_score_chance(self, mnist_net):
        rng = np.random.default_rng(7)
        data = _balanced_data(rng, n_per_class=20)
        subject = build_mnist_cnn(seed=5)
        acc = gradmap_classification(mnist_net, subject, data, clipped=True)
        assert abs(acc - 0.1) <= 0.05

    def test_shape_mismatch_rejected(self, mnist_net):
        other = build_mini_resnet(widths=[4, 4, 8, 16])
        data = _balanced_data(np.random.default_rng(8), n_per_class=1)
        with pytest.raises(ShapeError):
            gradmap_classification(mnist_net, other, data)


class TestRobustnessRanking:
    def _pixel_data(self, rng, n=8, hw=2):
        return Dataset(rng.uniform(0.2, 0.8, (n, 1, hw, hw)).astype(np.float32),
                       rng.integers(0, 2, n))

    def test_zero_epsilon_all_distances_zero(self):
        net = PixelAttentionNet()
        data = self._pixel_data(np.random.default_rng(9))
        cfg = AttackConfig(epsilon=0.0, steps=1)
        ranking = robustness_ranking(net, data, cfg)
        assert np.all(ranking.distances == 0.0)
        assert np.array_equal(ranking.order, np.arange(4))  # index-order tie-break

    def test_single_location(self):
        net = PixelAttentionNet(hw=1)
        data = self._pixel_data(np.random.default_rng(10), hw=1)
        ranking = robustness_ranking(net, data, AttackConfig(epsilon=0.1, steps=1))
        assert len(ranking.order) == 1
        assert np.allclose(ranking.mean_weights, [1.0])

    def test_permutation_covariance(self):
        net = PixelAttentionNet()
        rng = np.random.default_rng(11)
        data = self._pixel_data(rng, n=6)
        cfg = AttackConfig(epsilon=0.1, alpha=0.05, steps=2, random_start=False)
        r1 = robustness_ranking(net, data, cfg)
        # permute the pixels of every image: locations permute identically
        perm = np.array([2, 0, 3, 1])
        flat = data.images.reshape(len(data), 1, 4)[:, :, perm].reshape(data.images.shape)
        r2 = robustness_ranking(net, Dataset(flat, data.labels), cfg)

        def by_location(r):
            d = np.empty(4)
            w = np.empty(4)
            d[r.order] = r.distances
            w[r.order] = r.mean_weights
            return d, w

        d1, w1 = by_location(r1)
        d2, w2 = by_location(r2)
        # new location k holds what used to live at location perm[k]
        assert np.allclose(d2, d1[perm], atol=1e-6)
        assert np.allclose(w2, w1[perm], atol=1e-6)

    def test_non_attention_model_rejected(self, mnist_net):
        data = _balanced_data(np.random.default_rng(12), n_per_class=1)
        with pytest.raises(ValueError, match="attention"):
            robustness_ranking(mnist_net, data, AttackConfig(epsilon=0.1))

    def test_distances_sorted_invariant(self):
        net = PixelAttentionNet()
        data = self._pixel_data(np.random.default_rng(13), n=10)
        cfg = AttackConfig(epsilon=0.15, alpha=0.08, steps=3, seed=1)
        ranking = robustness_ranking(net, data, cfg)
        assert isinstance(ranking, RobustnessRanking)  # __post_init__ checks order


class TestRenderAttentionMap:
    def test_uniform_weights_constant_map(self):
        net = PixelAttentionNet()
        x = np.full((1, 2, 2), 0.5, dtype=np.float32)
        out = render_attention_map(net, x)
        assert np.all(out == 0.5)
        assert out.shape == (2, 2)

    def test_one_hot_single_bright_block(self):
        net = PixelAttentionNet(hw=2)
        x = np.array([[[0.9, 0.1], [0.1, 0.1]]], dtype=np.float32)
        out = render_attention_map(net, x)
        assert out[0, 0] == 1.0
        assert out.max() == 1.0 and out.min() == 0.0

    def test_min_zero_max_one_for_nonconstant(self):
        net = PixelAttentionNet()
        rng = np.random.default_rng(14)
        out = render_attention_map(net, rng.uniform(0, 1, (1, 2, 2)).astype(np.float32))
        assert out.min() == 0.0 and out.max() == 1.0


class TestWriters:
    def test_pgm_format(self, tmp_path):
        img = np.array([[0.0, 0.5], [1.0, 0.25]])
        p = tmp_path / "m.pgm"
        write_pgm(p, img)
        raw = p.read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        assert raw[-4:] == bytes([0, 128, 255, 64])

    def test_ranking_csv(self, tmp_path):
        net = PixelAttentionNet()
        data = Dataset(np.random.default_rng(15).uniform(0, 1, (4, 1, 2, 2)).astype(np.float32),
                       [0, 1, 0, 1])
        ranking = robustness_ranking(net, data, AttackConfig(epsilon=0.1, steps=1))
        p = tmp_path / "rank.csv"
        write_ranking_csv(p, ranking)
        lines = p.read_text().splitlines()
        assert lines[0] == "rank,location,mean_distance,mean_weight"
        assert len(lines) == 5


def test_mean_attention_by_cell_sums_to_one():
    net = PixelAttentionNet()
    data = Dataset(np.random.default_rng(16).uniform(0, 1, (6, 1, 2, 2)).astype(np.float32),
                   [0] * 6)
    means = mean_attention_by_cell(net, data)
    assert abs(means.sum() - 1.0) < 1e-6
