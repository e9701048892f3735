import numpy as np
import pytest

from scenegrid.nn import (BatchNorm, Linear, Node, Parameter, SparseTensor, Tape,
                          TapeError, backward, build_kernel_map, kernel_offsets, ops,
                          sparse_conv, sparse_conv_transposed)

from oracles import (analytic_gradients, dense_conv_oracle, finite_diff_gradients,
                     max_relative_error)


def make_tensor(coords, features=None, stride=1, c=1, rng=None):
    coords = np.asarray(coords, dtype=np.int64)
    if features is None:
        features = (rng.standard_normal((len(coords), c)) if rng is not None
                    else np.ones((len(coords), c)))
    return SparseTensor.from_arrays(coords, np.asarray(features, dtype=np.float64),
                                    stride=stride)


def random_tensor(rng, n_batch=1, max_side=8, c=3, stride=1):
    rows = []
    for b in range(n_batch):
        n = int(rng.integers(4, 20))
        pts = rng.integers(0, max_side, size=(n, 3)) * stride
        pts = np.unique(pts, axis=0)
        rows.append(np.column_stack([np.full(len(pts), b), pts]))
    coords = np.concatenate(rows, axis=0)
    feats = rng.standard_normal((len(coords), c))
    return SparseTensor.from_arrays(coords, feats, stride=stride)


def conv_weight(rng, kernel_size, c_in, c_out, name="w"):
    k = len(kernel_offsets(kernel_size))
    return Parameter(name, rng.standard_normal((k, c_in, c_out)))


class TestKernelMap:
    def test_kernel1_identity(self):
        rng = np.random.default_rng(0)
        st = random_tensor(rng)
        kmap, out_cs = build_kernel_map(st, 1, 1)
        assert kmap.num_offsets == 1
        np.testing.assert_array_equal(out_cs.coords, st.coords)
        in_rows, out_rows = kmap.pairs[0]
        np.testing.assert_array_equal(in_rows, np.arange(len(st)))
        np.testing.assert_array_equal(out_rows, np.arange(len(st)))

    def test_two_voxel_hand_enumeration(self):
        # coords (0,0,0,0) and (0,1,0,0): the identity offset pairs both rows,
        # offsets (+-1,0,0) pair the neighbours, total 4 pairs.
        st = make_tensor([(0, 0, 0, 0), (0, 1, 0, 0)])
        kmap, out_cs = build_kernel_map(st, 3, 1)
        offsets = kernel_offsets(3)
        k_plus = int(np.where((offsets == [1, 0, 0]).all(axis=1))[0][0])
        k_zero = int(np.where((offsets == [0, 0, 0]).all(axis=1))[0][0])
        k_minus = int(np.where((offsets == [-1, 0, 0]).all(axis=1))[0][0])

        assert kmap.pair_count() == 4
        assert len(kmap.pairs[k_zero][0]) == 2
        # offset (1,0,0): input at (1,0,0) (row 1) feeds output at (0,0,0) (row 0)
        np.testing.assert_array_equal(kmap.pairs[k_plus][0], [1])
        np.testing.assert_array_equal(kmap.pairs[k_plus][1], [0])
        np.testing.assert_array_equal(kmap.pairs[k_minus][0], [0])
        np.testing.assert_array_equal(kmap.pairs[k_minus][1], [1])

    def test_dense_block_pair_count_matches_enumeration(self):
        # Fully dense 4^3 block: pair count equals the zero-padded dense
        # receptive-field count, enumerated independently.
        side = 4
        coords = np.array([(0, x, y, z) for x in range(side)
                           for y in range(side) for z in range(side)])
        st = make_tensor(coords)
        kmap, _ = build_kernel_map(st, 3, 1)
        expected = 0
        for x in range(side):
            for y in range(side):
                for z in range(side):
                    for dx, dy, dz in kernel_offsets(3):
                        if (0 <= x + dx < side and 0 <= y + dy < side
                                and 0 <= z + dz < side):
                            expected += 1
        assert kmap.pair_count() == expected

    def test_even_kernel_rejected(self):
        st = make_tensor([(0, 0, 0, 0)])
        with pytest.raises(ValueError):
            build_kernel_map(st, 2, 1)

    def test_stride2_single_voxel(self):
        st = make_tensor([(0, 0, 0, 0)])
        kmap, out_cs = build_kernel_map(st, 3, 2)
        np.testing.assert_array_equal(out_cs.coords, [[0, 0, 0, 0]])
        assert out_cs.stride == 2

    def test_stride2_dense_block_aggregates_eight(self):
        coords = np.array([(0, x, y, z) for x in range(2) for y in range(2)
                           for z in range(2)])
        st = make_tensor(coords)
        kmap, out_cs = build_kernel_map(st, 3, 2)
        assert len(out_cs) == 1
        assert kmap.pair_count() == 8

    def test_no_cross_batch_pairs(self):
        rng = np.random.default_rng(3)
        st = random_tensor(rng, n_batch=3)
        for kernel, stride in ((3, 1), (3, 2), (1, 1)):
            kmap, out_cs = build_kernel_map(st, kernel, stride)
            for in_rows, out_rows in kmap.pairs:
                if len(in_rows):
                    np.testing.assert_array_equal(st.coords[in_rows, 0],
                                                  out_cs.coords[out_rows, 0])


class TestSparseConv:
    def test_kernel1_identity_weights(self):
        rng = np.random.default_rng(1)
        st = random_tensor(rng, c=4)
        w = Parameter("w", np.eye(4)[None, :, :].astype(np.float64))
        tape = Tape()
        kmap, out_cs = build_kernel_map(st, 1, 1)
        out = sparse_conv(tape, st, w, kmap, out_cs)
        np.testing.assert_array_equal(out.features, st.features)

    def test_zero_weights(self):
        rng = np.random.default_rng(2)
        st = random_tensor(rng, c=2)
        w = Parameter("w", np.zeros((27, 2, 3)))
        tape = Tape()
        kmap, out_cs = build_kernel_map(st, 3, 1)
        out = sparse_conv(tape, st, w, kmap, out_cs)
        assert np.all(out.features == 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_oracle_submanifold(self, seed):
        rng = np.random.default_rng(seed)
        st = random_tensor(rng, n_batch=2, max_side=5, c=3)
        w = conv_weight(rng, 3, 3, 4)
        kmap, out_cs = build_kernel_map(st, 3, 1)
        out = sparse_conv(Tape(), st, w, kmap, out_cs)
        expected = dense_conv_oracle(st.coords, st.features, w.value, 1,
                                     out_cs.coords, 3)
        assert np.abs(out.features - expected).max() < 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_dense_oracle_strided(self, seed):
        rng = np.random.default_rng(100 + seed)
        st = random_tensor(rng, n_batch=2, max_side=8, c=2)
        w = conv_weight(rng, 3, 2, 3)
        kmap, out_cs = build_kernel_map(st, 3, 2)
        out = sparse_conv(Tape(), st, w, kmap, out_cs)
        expected = dense_conv_oracle(st.coords, st.features, w.value, 1,
                                     out_cs.coords, 3)
        assert np.abs(out.features - expected).max() < 1e-10

    def test_stride2_from_stride2_tensor(self):
        # offsets scale with the input stride
        rng = np.random.default_rng(11)
        st = random_tensor(rng, max_side=6, c=2, stride=2)
        w = conv_weight(rng, 3, 2, 2)
        kmap, out_cs = build_kernel_map(st, 3, 2)
        out = sparse_conv(Tape(), st, w, kmap, out_cs)
        assert out_cs.stride == 4
        assert np.all(out_cs.coords[:, 1:] % 4 == 0)
        expected = dense_conv_oracle(st.coords, st.features, w.value, 2,
                                     out_cs.coords, 3)
        assert np.abs(out.features - expected).max() < 1e-10

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(5)
        st = random_tensor(rng, n_batch=2, c=3)
        w = conv_weight(rng, 3, 3, 3)

        def run():
            kmap, out_cs = build_kernel_map(st, 3, 1)
            return sparse_conv(Tape(), st, w, kmap, out_cs).features

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_batch_permutation_permutes_outputs(self):
        rng = np.random.default_rng(6)
        a = random_tensor(rng, n_batch=1, c=2)
        b = random_tensor(rng, n_batch=1, c=2)
        w = conv_weight(rng, 3, 2, 2)

        def stacked(first, second):
            ca = first.coords.copy()
            cb = second.coords.copy()
            cb[:, 0] = 1
            coords = np.concatenate([ca, cb])
            feats = np.concatenate([first.features, second.features])
            st = SparseTensor.from_arrays(coords, feats)
            kmap, out_cs = build_kernel_map(st, 3, 1)
            return sparse_conv(Tape(), st, w, kmap, out_cs)

        ab = stacked(a, b)
        ba = stacked(b, a)
        na = len(a)
        np.testing.assert_allclose(ab.features[:na], ba.features[len(b):])
        np.testing.assert_allclose(ab.features[na:], ba.features[:len(b)])


class TestTransposedConv:
    def test_round_trip_single_voxel(self):
        st = make_tensor([(0, 0, 0, 0)], features=[[2.0]])
        w = Parameter("w", np.zeros((27, 1, 1)))
        k_center = 13  # offset (0,0,0)
        w.value[k_center, 0, 0] = 1.0
        kmap, coarse_cs = build_kernel_map(st, 3, 2)
        tape = Tape()
        down = sparse_conv(tape, st, w, kmap, coarse_cs)
        up = sparse_conv_transposed(tape, down, w, kmap, st.coord_set)
        np.testing.assert_allclose(up.features, [[2.0]])

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(7)
        st = random_tensor(rng, c=2)
        kmap, coarse_cs = build_kernel_map(st, 3, 2)
        coarse = SparseTensor(coarse_cs, Node(np.zeros((len(coarse_cs), 2))))
        w = conv_weight(rng, 3, 2, 2)
        up = sparse_conv_transposed(Tape(), coarse, w, kmap, st.coord_set)
        assert np.all(up.features == 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_identity(self, seed):
        # <down(x), y> == <x, up(y; W^T)> for random x, y.
        rng = np.random.default_rng(200 + seed)
        st = random_tensor(rng, n_batch=2, max_side=8, c=3)
        w = conv_weight(rng, 3, 3, 4)
        kmap, coarse_cs = build_kernel_map(st, 3, 2)
        down = sparse_conv(Tape(), st, w, kmap, coarse_cs)

        y = rng.standard_normal(down.features.shape)
        wt = Parameter("wt", np.transpose(w.value, (0, 2, 1)))
        coarse = SparseTensor(coarse_cs, Node(y))
        up = sparse_conv_transposed(Tape(), coarse, wt, kmap, st.coord_set)

        lhs = float((down.features * y).sum())
        rhs = float((st.features * up.features).sum())
        assert abs(lhs - rhs) < 1e-10


class TestBatchNorm:
    def test_identity_on_normalised_input(self):
        # eps=1e-5 inside the sqrt shifts unit variance by 5e-6 relative.
        rng = np.random.default_rng(8)
        x = rng.standard_normal((200, 4))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        bn = BatchNorm(4, np.float64)
        out = bn(Tape(), Node(x), train=True)
        np.testing.assert_allclose(out.value, x, rtol=1e-5, atol=1e-9)

    def test_zero_variance_outputs_beta(self):
        bn = BatchNorm(2, np.float64)
        bn.beta.value[:] = 5.0
        x = np.full((10, 2), 3.25)
        out = bn(Tape(), Node(x), train=True)
        np.testing.assert_allclose(out.value, 5.0)

    def test_empty_input_raises(self):
        bn = BatchNorm(2, np.float64)
        with pytest.raises(ValueError):
            bn(Tape(), Node(np.zeros((0, 2))), train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients_match_finite_differences(self, train):
        rng = np.random.default_rng(9)
        bn = BatchNorm(3, np.float64)
        bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.value[:] = rng.uniform(-1, 1, 3)
        bn.set_buffer("running_mean", rng.standard_normal(3))
        bn.set_buffer("running_var", rng.uniform(0.5, 2.0, 3))
        x_param = Parameter("x", rng.standard_normal((12, 3)))

        def build():
            tape = Tape()
            rm = bn.get_buffer("running_mean").copy()
            rv = bn.get_buffer("running_var").copy()
            out = bn(tape, x_param, train=train)
            bn.set_buffer("running_mean", rm)
            bn.set_buffer("running_var", rv)
            loss = ops.cross_entropy(tape, out, np.zeros(12, dtype=np.int64))
            return tape, loss

        params = [bn.gamma, bn.beta, x_param]
        fd = finite_diff_gradients(build, params)
        an = analytic_gradients(build, params)
        assert max_relative_error(an, fd) < 1e-4


class TestOps:
    def test_relu_values_and_grad(self):
        tape = Tape()
        x = Node(np.array([[-1.0, 0.0, 2.0]]))
        out = ops.relu(tape, x)
        np.testing.assert_array_equal(out.value, [[0.0, 0.0, 2.0]])
        loss = ops.cross_entropy(tape, out, np.array([2]))
        backward(tape, loss)
        assert x.grad[0, 0] == 0.0  # negative input blocks gradient

    def test_global_avg_pool(self):
        st = make_tensor([(0, 0, 0, 0), (0, 1, 0, 0)], features=[[1.0], [3.0]])
        out = ops.global_avg_pool(Tape(), st)
        np.testing.assert_allclose(out.value, [[2.0]])

    def test_global_max_pool_per_batch(self):
        st = make_tensor([(0, 0, 0, 0), (0, 1, 0, 0), (1, 0, 0, 0)],
                         features=[[1.0], [3.0], [-2.0]])
        out = ops.global_max_pool(Tape(), st)
        np.testing.assert_allclose(out.value, [[3.0], [-2.0]])

    def test_concat_preserves_order_and_width(self):
        rng = np.random.default_rng(10)
        coords = [(0, 0, 0, 0), (0, 1, 1, 1)]
        a = make_tensor(coords, features=rng.standard_normal((2, 8)))
        b = SparseTensor(a.coord_set, Node(rng.standard_normal((2, 8))))
        out = ops.concat_features(Tape(), a, b)
        assert out.features.shape == (2, 16)
        np.testing.assert_array_equal(out.features[:, :8], a.features)
        np.testing.assert_array_equal(out.features[:, 8:], b.features)

    def test_concat_coordinate_mismatch(self):
        a = make_tensor([(0, 0, 0, 0)], features=[[1.0]])
        b = make_tensor([(0, 1, 0, 0)], features=[[1.0]])
        with pytest.raises(ValueError):
            ops.concat_features(Tape(), a, b)

    def test_pool_empty_batch_element(self):
        # batch id 1 missing while id 2 present
        st = make_tensor([(0, 0, 0, 0), (2, 0, 0, 0)], features=[[1.0], [1.0]])
        with pytest.raises(ValueError):
            ops.global_avg_pool(Tape(), st)

    def test_cross_entropy_uniform(self):
        tape = Tape()
        logits = Node(np.zeros((3, 4)))
        loss = ops.cross_entropy(tape, logits, np.array([0, 1, 2]))
        assert abs(float(loss.value) - np.log(4)) < 1e-12

    def test_cross_entropy_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        z = rng.standard_normal((10, 5))
        targets = rng.integers(0, 5, size=10)
        loss = ops.cross_entropy(Tape(), Node(z), targets)
        naive = np.mean([-np.log(np.exp(z[i, targets[i]]) / np.exp(z[i]).sum())
                         for i in range(10)])
        assert abs(float(loss.value) - naive) < 1e-12

    def test_cross_entropy_monotone_in_margin(self):
        vals = []
        for margin in (0.0, 1.0, 2.0, 4.0):
            z = np.array([[margin, 0.0, 0.0]])
            vals.append(float(ops.cross_entropy(Tape(), Node(z), np.array([0])).value))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_cross_entropy_ignore_id(self):
        z = np.array([[1.0, 0.0], [5.0, 0.0]])
        full = ops.cross_entropy(Tape(), Node(z), np.array([0, -1]), ignore_id=-1)
        solo = ops.cross_entropy(Tape(), Node(z[:1]), np.array([0]))
        assert abs(float(full.value) - float(solo.value)) < 1e-15
        with pytest.raises(ValueError):
            ops.cross_entropy(Tape(), Node(z), np.array([-1, -1]), ignore_id=-1)


class TestBackward:
    def test_linear_map_gradient_exact(self):
        # loss = sum(x @ W): dL/dW is the column-summed outer structure of x.
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 3))
        w = Parameter("w", rng.standard_normal((3, 2)))
        tape = Tape()
        loss = ops.sum_all(tape, ops.matmul(tape, Node(x), w))
        backward(tape, loss)
        np.testing.assert_allclose(w.grad, np.outer(x.sum(axis=0), np.ones(2)), atol=1e-12)

    def test_double_backward_raises(self):
        tape = Tape()
        x = Node(np.array([[1.0, 2.0]]))
        loss = ops.cross_entropy(tape, x, np.array([0]))
        backward(tape, loss)
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_non_scalar_root_raises(self):
        tape = Tape()
        x = Node(np.ones((2, 2)))
        with pytest.raises(TapeError):
            backward(tape, x)

    def test_conv_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        st_coords = np.array([(0, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 2, 2, 1)])
        feats0 = rng.standard_normal((4, 2))
        w = conv_weight(rng, 3, 2, 3)
        lin = Linear(3, 3, rng, np.float64)

        def build():
            tape = Tape()
            st = SparseTensor.from_arrays(st_coords, feats0.copy())
            kmap, out_cs = build_kernel_map(st, 3, 1)
            h = sparse_conv(tape, st, w, kmap, out_cs)
            h = ops.relu_sparse(tape, h)
            pooled = ops.global_avg_pool(tape, h)
            logits = lin(tape, pooled)
            loss = ops.cross_entropy(tape, logits, np.array([1]))
            return tape, loss

        params = [w, lin.weight, lin.bias]
        fd = finite_diff_gradients(build, params)
        an = analytic_gradients(build, params)
        assert max_relative_error(an, fd) < 1e-4
