import numpy as np
import pytest

from satgraph import autodiff as ad
from satgraph.autodiff import DropoutStream, ModelParams, Tape, Tensor, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def grad_of(fn, *leaves):
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


class TestPrimitives:
    def test_softmax_uniform(self):
        assert ad.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_softmax_rows_sum_to_one(self, rng):
        y = ad.softmax_rows(Tensor(rng.standard_normal((20, 9)) * 30)).data
        assert np.all(y > 0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_segment_sum(self):
        out = ad.segment_sum(Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
        assert out.data[:, 0].tolist() == [3.0, 3.0]

    def test_layer_norm_constant_row(self):
        out = ad.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.all(np.isfinite(out.data))
        assert np.all(out.data == 0.0)

    def test_broadcast_only_row_vectors(self):
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_matmul_shape_error(self):
        with pytest.raises(ad.ShapeError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_concat_and_slice(self):
        a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))
        c = ad.concat([a, b], axis=1)
        assert c.shape == (2, 3)
        assert ad.slice_cols(c, 0, 1).data.tolist() == [[1.0], [1.0]]

    def test_row_gather_out_of_range(self):
        with pytest.raises(ad.ShapeError):
            ad.row_gather(Tensor(np.zeros((2, 2))), [2])


class TestPairAttentionPrimitives:
    def test_segment_softmax_matches_rowwise(self, rng):
        s = rng.standard_normal((3, 4))
        indptr = np.array([0, 4])
        # one segment containing the 4 entries of each column
        out = ad.segment_softmax(Tensor(s.T.copy()), indptr).data
        np.testing.assert_allclose(out.T, ad.softmax_rows(Tensor(s)).data, atol=1e-15)

    def test_empty_segment_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.segment_softmax(Tensor(np.zeros((2, 1))), [0, 0, 2])

    @pytest.mark.parametrize("heads", [1, 2, 3])
    def test_gradients(self, rng, heads):
        n, d = 4, 6
        rows = np.repeat(np.arange(n), n)
        cols = np.tile(np.arange(n), n)
        indptr = np.arange(0, n * n + 1, n)
        p = ModelParams(q=leaf(rng.standard_normal((n, d))), k=leaf(rng.standard_normal((n, d))),
                        v=leaf(rng.standard_normal((n, d))))
        r = rng.standard_normal((n, d))

        def f(ps):
            s = ad.pair_scores(ps["q"], ps["k"], rows, cols, heads)
            w = ad.segment_softmax(s, indptr)
            out = ad.pair_aggregate(w, ps["v"], rows, cols, n)
            return ad.sum_all(ad.mul(out, Tensor(r)))

        assert grad_check(f, p) < 1e-8


class TestBackward:
    def test_matmul_adjoint(self, rng):
        w = leaf(rng.standard_normal((3, 4)))
        x = Tensor(rng.standard_normal((2, 3)))
        (gw,) = grad_of(lambda w: ad.sum_all(x @ w), w)
        np.testing.assert_allclose(gw, np.repeat(x.data.sum(axis=0)[:, None], 4, axis=1))

    def test_independent_leaf_has_zero_grad(self):
        a, b = leaf([[1.0]]), leaf([[2.0]])
        ga, gb = grad_of(lambda a, b: ad.sum_all(a * 3.0), a, b)
        assert ga.tolist() == [[3.0]]
        assert gb.tolist() == [[0.0]]

    def test_inactive_relu(self):
        w = leaf([[5.0]])
        (gw,) = grad_of(lambda w: ad.sum_all(ad.relu(Tensor([[-1.0]])) * w), w)
        assert gw.tolist() == [[0.0]]

    def test_linearity(self, rng):
        x = leaf(rng.standard_normal((3, 3)))
        a, b = rng.standard_normal(2)
        f = lambda x: ad.sum_all(ad.softmax_rows(x))
        g = lambda x: ad.sum_all(ad.mul(ad.relu(x), x))
        (gf,) = grad_of(f, x)
        (gg,) = grad_of(g, x)
        (gc,) = grad_of(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)), x)
        np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)

    def test_tape_errors(self):
        x = leaf([[1.0]])
        with Tape() as tape:
            loss = ad.sum_all(x * 2.0)
        tape.backward(loss)
        with pytest.raises(ad.TapeError):
            tape.backward(loss)
        with Tape() as t2:
            y = x * 2.0
        with pytest.raises(ad.ShapeError):
            t2.backward(ad.concat([y, y]))
        with pytest.raises(ad.TapeError):
            ad.backward(Tensor(1.0))

    def test_gradients_accumulate_across_uses(self):
        x = leaf([[2.0]])
        (gx,) = grad_of(lambda x: ad.sum_all(ad.mul(x, x) + x), x)
        assert gx.tolist() == [[5.0]]


class TestGradCheck:
    def test_quadratic(self, rng):
        p = leaf(rng.standard_normal((3, 2)))
        assert grad_check(lambda ps: ad.sum_all(ad.mul(ps["p"], ps["p"])), p, eps=1e-5) < 1e-9

    def test_constant(self):
        p = leaf([[1.0, 2.0]])
        assert grad_check(lambda ps: ad.sum_all(Tensor([[3.0]])), p) == 0.0

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x, y: ad.sum_all(ad.layer_norm(x, Tensor(np.arange(1.0, 4.0)), Tensor(np.ones(3)))),
            lambda x, y: ad.sum_all(ad.mul(ad.softmax_rows(x), y)),
            lambda x, y: ad.cross_entropy(x, [0, 2, 1, 1]),
            lambda x, y: ad.sum_all(ad.mul(ad.segment_sum(x, [0, 0, 1, 0], 4), y)),
            lambda x, y: ad.sum_all(ad.mul(ad.row_gather(x, [3, 3, 0, 1]), y)),
            lambda x, y: ad.sum_all(ad.mul(ad.transpose(ad.transpose(x)), y)),
            lambda x, y: ad.mean_all(ad.abs_(ad.sub(x, y))),
            lambda x, y: ad.sum_all(ad.mul(ad.scale_rows(x, [1.0, 2.0, 3.0, 4.0]), y)),
        ],
    )
    def test_primitive_gradients(self, rng, fn):
        p = ModelParams(x=leaf(rng.standard_normal((4, 3))))
        y = Tensor(rng.standard_normal((4, 3)))
        lam = fn
        assert grad_check(lambda ps: lam(ps["x"], y), p) < 1e-7


class TestDropout:
    def test_identity_when_off(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        assert ad.dropout(x, 0.5, False) is x
        assert ad.dropout(x, 0.0, True, DropoutStream(1)) is x

    def test_mean_preserved(self):
        x = Tensor(np.ones((400, 250)))
        y = ad.dropout(x, 0.3, True, DropoutStream(7)).data
        assert abs(y.mean() - 1.0) < 0.02

    def test_stream_is_reproducible(self):
        a, b = DropoutStream(3), DropoutStream(3)
        assert np.array_equal(a.keep_mask((5, 5), 0.5), b.keep_mask((5, 5), 0.5))

    def test_counter_advances(self):
        s = DropoutStream(3)
        first, second = s.keep_mask((50,), 0.5), s.keep_mask((50,), 0.5)
        assert not np.array_equal(first, second)

    def test_needs_stream(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones((2, 2))), 0.5, True)
