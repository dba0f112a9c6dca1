import numpy as np
import pytest
from scipy import stats

from codanet import autodiff as ad
from codanet import experiments as X
from codanet import interpret as I
from codanet import network as nw
from codanet import verify as V
from codanet.config import preset
from codanet.datasets import GridSample
from codanet.layers import DauConvLayer, dau_forward
from codanet.tensor import GeometryError, Rng


def static_net(rng, name="tiny1"):
    """Random preset with A = 0, so every weight vector is fixed."""
    net = V.random_net(name, rng)
    for layer in net.layers:
        layer.A[:] = 0
    return net


def channel_zero_net(num_classes=3):
    """One pointwise layer that only reads encoded channel 0."""
    layer = DauConvLayer(6, num_classes, 1, kernel=1, padding=0, nonlinearity="l2").init_params(Rng(0), np.float64)
    layer.A[:] = 0
    layer.b = np.zeros((num_classes, 6))
    layer.b[:, 0] = 1.0
    return nw.CodaNet([layer], num_classes, temperature=2.0)


def grid3(n=3):
    return GridSample(np.zeros((1, 3 * n, 3 * n)), n, list(range(n * n)), list(range(n * n)))


class TestMethodParsing:
    @pytest.mark.parametrize("text,tag,size,stride", [
        ("coda", "coda", 0, 2), ("IxG", "ixg", 0, 2), ("occ", "occ", 4, 2), ("occ-8", "occ", 8, 2), ("occ-5-3", "occ", 5, 3),
    ])
    def test_parse(self, text, tag, size, stride):
        m = I.AttributionMethod.parse(text)
        assert (m.tag, m.size, m.stride) == (tag, size, stride)

    def test_unknown(self):
        with pytest.raises(ValueError):
            I.AttributionMethod.parse("lime")


class TestAttribute:
    def test_coda_sums_to_logit(self):
        rng = Rng(0)
        net = V.random_net("tiny3", rng)
        img = rng.uniform(size=(3, 8, 8))
        logits = nw.forward(net, img)
        for j in (0, 4, 9):
            assert I.attribute("coda", net, img, j).sum() == pytest.approx(logits[j], abs=1e-10)

    def test_static_weights_make_ixg_equal_coda(self):
        rng = Rng(1)
        net = static_net(rng)
        img = rng.uniform(size=(3, 8, 8))
        for j in (0, 7):
            np.testing.assert_allclose(I.attribute("ixg", net, img, j), I.attribute("coda", net, img, j), atol=1e-12)

    def test_grad_is_collapsed_row(self):
        rng = Rng(2)
        net = static_net(rng)
        img = rng.uniform(size=(3, 8, 8))
        row = nw.collapse_full(net, img)[3].reshape(6, 8, 8) / net.temperature
        np.testing.assert_allclose(I.attribute("grad", net, img, 3), row.sum(axis=0), atol=1e-12)

    def test_dynamic_ixg_differs_from_coda(self):
        rng = Rng(3)
        net = V.random_net("tiny1", rng)
        img = rng.uniform(size=(3, 8, 8))
        assert np.abs(I.attribute("ixg", net, img, 0) - I.attribute("coda", net, img, 0)).max() > 1e-6

    def test_occlusion_zero_where_net_ignores(self):
        net = channel_zero_net()
        img = Rng(4).uniform(size=(3, 8, 8))
        img[0, :, :4] = 0  # channel 0 blank on the left, so the net ignores it there
        attr = I.attribute("occ-2-2", net, img, 1)
        np.testing.assert_array_equal(attr[:, :4], 0)
        assert np.all(attr[:, 4:] > 0)

    def test_occlusion_single_patch(self):
        net = channel_zero_net()
        img = Rng(5).uniform(size=(3, 4, 4))
        attr = I.attribute("occ-4", net, img, 0)
        drop = nw.forward(net, img)[0]  # zeroing everything leaves logit 0
        np.testing.assert_allclose(attr, np.full((4, 4), drop))

    def test_occlusion_patch_too_big(self):
        with pytest.raises(GeometryError):
            I.attribute("occ-9", channel_zero_net(), np.zeros((3, 8, 8)), 0)

    def test_batch_matches_single(self):
        rng = Rng(6)
        net = V.random_net("tiny3", rng)
        imgs = rng.uniform(size=(3, 3, 8, 8))
        maps = I.attribute_batch("grad", net, imgs, [1, 2, 3])
        for i in range(3):
            np.testing.assert_allclose(maps[i], I.attribute("grad", net, imgs[i], i + 1), atol=1e-12)

    def test_class_range(self):
        with pytest.raises(IndexError):
            I.attribute("coda", channel_zero_net(), np.zeros((3, 4, 4)), 3)


class TestPointing:
    def test_oracle_map_scores_one(self):
        g = grid3()
        attr = np.zeros((9, 9))
        attr[3:6, 6:9] = 1.0  # cell 5
        assert I.pointing_score(attr, g, 5) == 1.0

    def test_uniform_map_is_chance(self):
        assert I.pointing_score(np.ones((9, 9)), grid3(), 0) == pytest.approx(1 / 9)

    def test_no_positive_mass_is_chance(self):
        assert I.pointing_score(-np.ones((9, 9)), grid3(), 2) == pytest.approx(1 / 9)
        assert I.pointing_score(np.zeros((9, 9)), grid3(), 2) == pytest.approx(1 / 9)

    def test_negative_mass_ignored(self):
        attr = np.zeros((9, 9))
        attr[0, 0] = 2.0
        attr[8, 8] = 1.0
        attr[0, 1] = -5.0
        assert I.pointing_score(attr, grid3(), 0) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(GeometryError):
            I.pointing_score(np.ones((8, 9)), grid3(), 0)
        g = GridSample(np.zeros((1, 6, 6)), 2, [0, 1, 2, 3], [0, 1, 2, 3])
        with pytest.raises(KeyError):
            I.pointing_score(np.ones((6, 6)), g, 7)

    def test_game_shape(self):
        rng = Rng(7)
        net = V.random_net("tiny1", rng)
        grids = [GridSample(rng.uniform(size=(3, 12, 12)), 2, [0, 3, 5, 9], [0, 1, 2, 3]) for _ in range(2)]
        scores = I.pointing_game(net, grids, "coda")
        assert scores.shape == (8,)
        assert np.all((scores >= 0) & (scores <= 1))


class TestPixelRemoval:
    def test_starts_at_logit(self):
        rng = Rng(8)
        net = V.random_net("tiny3", rng)
        img = rng.uniform(size=(3, 8, 8))
        c = I.pixel_removal_curve(net, img, 2, rng.normal((8, 8)), "least", steps=5)
        assert c.values[0] == pytest.approx(nw.forward(net, img)[2], abs=1e-12)
        np.testing.assert_allclose(c.fractions, np.linspace(0, 0.25, 6))
        assert np.all(np.diff(c.fractions) > 0)

    def test_tie_break_is_row_major(self):
        np.testing.assert_array_equal(I.removal_order(np.ones((3, 4)), "least"), np.arange(12))
        np.testing.assert_array_equal(I.removal_order(np.ones((3, 4)), "most"), np.arange(12))

    def test_constant_inputs_reproducible(self):
        net = V.random_net("tiny1", Rng(9))
        img = np.full((3, 8, 8), 0.5)
        a = I.pixel_removal_curve(net, img, 0, np.zeros((8, 8)), steps=4)
        b = I.pixel_removal_curve(net, img, 0, np.zeros((8, 8)), steps=4)
        assert a.values.tobytes() == b.values.tobytes()

    def test_removed_pixels_are_zero_in_every_channel(self):
        # with a channel-0 reader, removing pixels ranked least-first drops exactly their share
        net = channel_zero_net()
        img = Rng(10).uniform(size=(3, 4, 4))
        ranking = np.arange(16.0).reshape(4, 4)
        c = I.pixel_removal_curve(net, img, 0, ranking, "least", steps=4, max_fraction=1.0)
        x = nw.encode_input(img)[0].ravel()
        w = 1.0 / net.temperature
        kept = [x[k:].sum() * w for k in (0, 4, 8, 12, 16)]
        np.testing.assert_allclose(c.values, kept, atol=1e-12)

    def test_area_trapezoid(self):
        c = I.RemovalCurve(np.array([0.0, 0.5, 1.0]), np.array([2.0, 2.0, 0.0]), "least")
        assert c.area() == pytest.approx(1.5)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            I.removal_order(np.ones(3), "sideways")


class TestSanity:
    def test_identity_and_layout(self):
        rng = Rng(11)
        net = V.random_net("tiny3", rng)
        img = rng.uniform(size=(3, 8, 8))
        before = {k: v.copy() for k, v in net.params().items()}
        out = I.sanity_randomization(net, img, 4, Rng(0))
        assert [l for l, _ in out] == [3, 2, 1, 0]
        np.testing.assert_array_equal(out[0][1], nw.contributions(net, img, 4).spatial())
        for k, v in net.params().items():
            np.testing.assert_array_equal(v, before[k])  # works on a copy
        np.testing.assert_array_equal(I.attribute("coda", net, img, 4), out[0][1])

    def test_fully_randomised_matches_untrained(self):
        cascade, fresh = [], []
        imgs = Rng(12).uniform(size=(50, 3, 8, 8))
        for i in range(50):
            net = V.random_net("tiny3", Rng(100 + i))
            cascade.append(np.linalg.norm(I.sanity_randomization(net, imgs[i], 0, Rng(200 + i))[-1][1]))
            untrained = nw.CodaNet.from_config(preset("tiny3"), Rng(300 + i), np.float64)
            fresh.append(np.linalg.norm(nw.contributions(untrained, imgs[i], 0).spatial()))
        assert stats.ks_2samp(cascade, fresh).pvalue > 0.01

    def test_distance(self):
        assert I.normalized_distance(np.ones(4), np.ones(4)) == 0
        assert I.normalized_distance(np.array([3.0, 4.0]), np.zeros(2)) == 1.0
        assert I.normalized_distance(np.zeros(2), np.ones(2)) == 1.0

    def test_random_nets_perturbed(self):
        rng = Rng(13)
        net = V.random_net("tiny3", rng)
        data = X.D.LabeledImageSet(rng.uniform(size=(10, 3, 8, 8)).astype(np.float32), np.arange(10))
        res = X.run_sanity_check(net, data, count=10)
        assert res.distances.shape == (10, 3)
        assert res.perturbed().mean() >= 0.9


class TestEigenvectors:
    def test_projector(self):
        B = np.linalg.qr(Rng(0).normal((10, 3)))[0].T
        pairs = I.dau_eigenvectors(B.T, B)
        assert len(pairs) == 3
        for lam, v in pairs:
            assert lam == pytest.approx(1.0)
            assert np.linalg.norm(B @ v) == pytest.approx(1.0)  # inside the row space
            assert v[np.argmax(np.abs(v))] > 0
        V_ = np.stack([v for _, v in pairs])
        np.testing.assert_allclose(V_ @ V_.T, np.eye(3), atol=1e-12)

    def test_residual(self):
        rng = Rng(1)
        for _ in range(10):
            A, B = rng.normal((16, 3)), rng.normal((3, 16))
            M = A @ B
            for lam, v in I.dau_eigenvectors(A, B):
                assert np.abs(M @ v - lam * v).max() < 1e-8

    def test_rank_deficient(self):
        rng = Rng(2)
        A, B = rng.normal((12, 3)), rng.normal((3, 12))
        B[2] = B[0]
        assert len(I.dau_eigenvectors(A, B)) <= 2

    def test_sorted_by_magnitude(self):
        B = np.linalg.qr(Rng(3).normal((6, 3)))[0].T
        pairs = I.dau_eigenvectors(B.T * np.array([0.5, -3.0, 1.0]), B)
        assert [round(l, 8) for l, _ in pairs] == [-3.0, 1.0, 0.5]
        for (_, v), row in zip(pairs, B[[1, 2, 0]]):
            assert abs(v @ row) == pytest.approx(1.0)

    def test_subspace_cosines(self):
        e = np.eye(4)
        cos = I.subspace_cosines([e[0], e[1]], np.array([e[0] * 2, e[0] + e[2], e[3]]))
        np.testing.assert_allclose(cos, [1.0, np.sqrt(0.5), 0.0], atol=1e-12)
        np.testing.assert_array_equal(I.subspace_cosines([], e[:2]), 0)


class TestOutputMaximisation:
    @pytest.mark.parametrize("g", ["l2", "sq"])
    def test_closed_form_matches_autodiff(self, g):
        rng = Rng(4)
        Xs, A, B = rng.normal((7, 9)), rng.normal((9, 3)), rng.normal((3, 9))
        out, dA, dB = I.mean_output_and_grads(Xs, A, B, g)
        pa, pb = ad.parameter(A), ad.parameter(B)
        outs = [dau_forward(x, pa, pb, np.zeros(9), g)[0] for x in Xs]
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        mean = total * (1.0 / len(Xs))
        grads = ad.backward(mean)
        assert out == pytest.approx(float(mean.value), rel=1e-12)
        np.testing.assert_allclose(dA, grads[pa], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(dB, grads[pb], rtol=1e-9, atol=1e-12)

    def test_ascent_increases_output(self):
        Xs = Rng(5).normal((64, 10)) + np.linspace(0, 1, 10)
        res = I.maximise_dau_output(Xs, rank=2, steps=100, lr=1e-2)
        assert res.mean_output[-1] > res.mean_output[0]
        # the output of a DAU never exceeds the input norm
        assert res.mean_output[-1] <= np.linalg.norm(Xs, axis=1).mean()

    def test_single_direction_recovered(self):
        d = np.zeros(12)
        d[:4] = 1.0
        Xs = d * Rng(6).uniform(0.5, 1.5, size=(200, 1)) + 0.05 * Rng(7).normal((200, 12))
        res = I.maximise_dau_output(Xs, rank=1, steps=400, lr=1e-2)
        (_, v), = I.dau_eigenvectors(res.A, res.B)
        assert abs(v @ d) / np.linalg.norm(d) > 0.99
