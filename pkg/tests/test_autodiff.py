import numpy as np
import numpy.testing as npt
import pytest

from giga import autodiff as ad
from giga.autodiff import Parameter, Tape, Tensor


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_finite_checks(True)
    yield
    ad.set_finite_checks(False)


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar f() w.r.t. arr, in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def run_grads(build, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return loss.item(), [p.grad.copy() for p in params]


def weighted_sum(build_out, rng):
    """Deterministic scalar head: fixed random weights over the op output."""
    w = Tensor(rng.standard_normal(build_out().shape))
    return lambda: ad.sum_all(ad.mul(build_out(), w))


# one graph construction per registered op: (params, loss builder)
def op_case(name, rng):
    if name == "conv2d":
        x = Parameter(rng.standard_normal((2, 4, 4, 3)))
        w = Parameter(rng.standard_normal((3, 3, 3, 2)) * 0.5)
        b = Parameter(rng.standard_normal(2))
        return [x, w, b], weighted_sum(lambda: ad.conv2d(x, w, b), rng)
    if name == "conv3d":
        x = Parameter(rng.standard_normal((1, 3, 3, 3, 2)))
        w = Parameter(rng.standard_normal((3, 3, 3, 2, 2)) * 0.5)
        b = Parameter(rng.standard_normal(2))
        return [x, w, b], weighted_sum(lambda: ad.conv3d(x, w, b), rng)
    if name == "avg_pool2d":
        x = Parameter(rng.standard_normal((2, 4, 4, 3)))
        return [x], weighted_sum(lambda: ad.avg_pool2d(x), rng)
    if name == "max_pool2d":
        vals = rng.permutation(2 * 4 * 4 * 3).astype(float)  # no ties
        x = Parameter(vals.reshape(2, 4, 4, 3))
        return [x], weighted_sum(lambda: ad.max_pool2d(x), rng)
    if name == "nearest_upsample2d":
        x = Parameter(rng.standard_normal((2, 3, 3, 2)))
        return [x], weighted_sum(lambda: ad.nearest_upsample2d(x), rng)
    if name == "linear":
        x = Parameter(rng.standard_normal((4, 3)))
        w = Parameter(rng.standard_normal((3, 5)))
        b = Parameter(rng.standard_normal(5))
        return [x, w, b], weighted_sum(lambda: ad.linear(x, w, b), rng)
    if name == "add_bias":
        x = Parameter(rng.standard_normal((2, 3, 3, 4)))
        b = Parameter(rng.standard_normal(4))
        return [x, b], weighted_sum(lambda: ad.add_bias(x, b), rng)
    if name == "relu":
        v = rng.standard_normal((3, 4))
        v += np.sign(v) * 0.2  # keep away from the kink
        x = Parameter(v)
        return [x], weighted_sum(lambda: ad.relu(x), rng)
    if name == "sigmoid":
        x = Parameter(rng.standard_normal((3, 4)))
        return [x], weighted_sum(lambda: ad.sigmoid(x), rng)
    if name == "log":
        x = Parameter(rng.uniform(0.5, 2.0, (3, 4)))
        return [x], weighted_sum(lambda: ad.log(x), rng)
    if name == "abs_":
        v = rng.standard_normal((3, 4))
        v += np.sign(v) * 0.2
        x = Parameter(v)
        return [x], weighted_sum(lambda: ad.abs_(x), rng)
    if name == "clip":
        v = rng.uniform(-1.0, 1.0, (3, 4))
        v[np.abs(np.abs(v) - 0.5) < 0.1] = 0.0  # keep off the clip edges
        x = Parameter(v)
        return [x], weighted_sum(lambda: ad.clip(x, -0.5, 0.5), rng)
    if name == "minimum":
        a = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(a.data + np.where(rng.random((3, 4)) < 0.5, 0.3, -0.3))
        return [a, b], weighted_sum(lambda: ad.minimum(a, b), rng)
    if name == "add":
        a = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(rng.standard_normal((3, 4)))
        return [a, b], weighted_sum(lambda: ad.add(a, b), rng)
    if name == "sub":
        a = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(rng.standard_normal((3, 4)))
        return [a, b], weighted_sum(lambda: ad.sub(a, b), rng)
    if name == "mul":
        a = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(rng.standard_normal((3, 4)))
        return [a, b], weighted_sum(lambda: ad.mul(a, b), rng)
    if name == "scale":
        x = Parameter(rng.standard_normal((3, 4)))
        return [x], weighted_sum(lambda: ad.scale(x, -1.7), rng)
    if name == "add_const":
        x = Parameter(rng.standard_normal((3, 4)))
        return [x], weighted_sum(lambda: ad.add_const(x, 0.3), rng)
    if name == "sum_all":
        x = Parameter(rng.standard_normal((3, 4)))
        return [x], lambda: ad.sum_all(ad.mul(x, x))
    if name == "mean_all":
        x = Parameter(rng.standard_normal((3, 4)))
        return [x], lambda: ad.mean_all(ad.mul(x, x))
    if name == "sum_axis":
        x = Parameter(rng.standard_normal((3, 4, 2)))
        return [x], weighted_sum(lambda: ad.sum_axis(x, 1), rng)
    if name == "concat":
        a = Parameter(rng.standard_normal((3, 2)))
        b = Parameter(rng.standard_normal((3, 4)))
        return [a, b], weighted_sum(lambda: ad.concat((a, b), 1), rng)
    if name == "reshape":
        x = Parameter(rng.standard_normal((2, 6)))
        return [x], weighted_sum(lambda: ad.reshape(x, (3, 4)), rng)
    if name == "project_mean":
        x = Parameter(rng.standard_normal((2, 3, 3, 3, 2)))
        return [x], weighted_sum(lambda: ad.project_mean(x, 2), rng)
    if name == "plane_sample":
        p = Parameter(rng.standard_normal((2, 4, 4, 3)))
        uv = rng.uniform(0.05, 0.95, (2, 5, 2))
        return [p], weighted_sum(lambda: ad.plane_sample(p, uv), rng)
    if name == "normalize_rows":
        x = Parameter(rng.standard_normal((3, 4)) + 2.0)
        return [x], weighted_sum(lambda: ad.normalize_rows(x), rng)
    raise AssertionError("no gradient-check case for op %r" % name)


class TestGradients:
    @pytest.mark.parametrize("name", ad.DIFFERENTIABLE_OPS)
    def test_finite_difference(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        params, build = op_case(name, rng)
        _, grads = run_grads(build, params)
        for p, g in zip(params, grads):
            num = numeric_grad(lambda: build().item(), p.data)
            npt.assert_allclose(g, num, rtol=1e-4, atol=1e-7)

    def test_every_op_has_a_case(self):
        rng = np.random.default_rng(0)
        for name in ad.DIFFERENTIABLE_OPS:
            params, build = op_case(name, rng)
            assert params and callable(build)

    def test_sum_gradient_is_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        npt.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_chained_sigmoid_matches_hand_derivation(self):
        rng = np.random.default_rng(3)
        w = Parameter(rng.standard_normal((3, 1)))
        x = rng.standard_normal((1, 3))
        with Tape() as tape:
            s = ad.sigmoid(ad.linear(Tensor(x), w))
            loss = ad.sum_all(s)
        tape.backward(loss)
        z = (x @ w.data).item()
        sig = 1.0 / (1.0 + np.exp(-z))
        expect = (sig * (1.0 - sig) * x).reshape(3, 1)
        npt.assert_allclose(w.grad, expect, atol=1e-12)

    def test_backward_linearity(self):
        rng = np.random.default_rng(7)
        x = Parameter(rng.standard_normal((4, 3)))
        w = Parameter(rng.standard_normal((3, 3)))

        def f():
            return ad.mean_all(ad.relu(ad.linear(x, w)))

        def g():
            return ad.sum_all(ad.sigmoid(ad.linear(x, w)))

        a, b = 1.7, -0.4
        _, (gx_f, gw_f) = run_grads(f, [x, w])
        _, (gx_g, gw_g) = run_grads(g, [x, w])
        _, (gx, gw) = run_grads(
            lambda: ad.add(ad.scale(f(), a), ad.scale(g(), b)), [x, w])
        npt.assert_allclose(gx, a * gx_f + b * gx_g, atol=1e-10)
        npt.assert_allclose(gw, a * gw_f + b * gw_g, atol=1e-10)

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(11)
        x = Parameter(rng.standard_normal((2, 4, 4, 3)))
        w = Parameter(rng.standard_normal((3, 3, 3, 4)))
        outs, grads = [], []
        for _ in range(2):
            x.zero_grad()
            w.zero_grad()
            with Tape() as tape:
                y = ad.conv2d(x, w)
                loss = ad.mean_all(ad.relu(y))
            tape.backward(loss)
            outs.append(y.data.copy())
            grads.append(w.grad.copy())
        npt.assert_array_equal(outs[0], outs[1])
        npt.assert_array_equal(grads[0], grads[1])

    def test_unreachable_parameter_grad_is_zero(self):
        x = Parameter(np.ones((2, 2)))
        unused = Parameter(np.ones(3))
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        npt.assert_array_equal(unused.grad, np.zeros(3))

    def test_reused_tensor_accumulates(self):
        x = Parameter(np.array([2.0]))
        with Tape() as tape:
            y = ad.mul(x, x)  # d/dx x^2 = 2x
            loss = ad.sum_all(y)
        tape.backward(loss)
        npt.assert_allclose(x.grad, [4.0])


class TestForward:
    def test_conv2d_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 5, 5, 3)))
        w = Tensor(np.eye(3).reshape(1, 1, 3, 3))
        npt.assert_array_equal(ad.conv2d(x, w).data, x.data)

    def test_relu_values(self):
        x = Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]))
        npt.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_conv3d_against_naive_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 5, 5, 5, 2))
        w = rng.standard_normal((3, 3, 3, 2, 3))
        out = ad.conv3d(Tensor(x), Tensor(w)).data
        ref = np.zeros((1, 5, 5, 5, 3))
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
        for z in range(5):
            for y in range(5):
                for xx in range(5):
                    for co in range(3):
                        acc = 0.0
                        for kz in range(3):
                            for ky in range(3):
                                for kx in range(3):
                                    acc += (xp[0, z + kz, y + ky, xx + kx]
                                            * w[kz, ky, kx, :, co]).sum()
                        ref[0, z, y, xx, co] = acc
        npt.assert_allclose(out, ref, atol=1e-12)

    def test_pooling_values(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        npt.assert_allclose(ad.avg_pool2d(x).data.ravel(), [2.5])
        npt.assert_allclose(ad.max_pool2d(x).data.ravel(), [4.0])

    def test_upsample_values(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        up = ad.nearest_upsample2d(x).data[0, :, :, 0]
        npt.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2],
                                    [3, 3, 4, 4], [3, 3, 4, 4]])


class TestBilinear:
    def oracle(self, plane, uv):
        R = plane.shape[0]
        g = np.clip(np.asarray(uv) * R - 0.5, 0, R - 1)
        i0 = np.minimum(g.astype(int), R - 2)
        f = g - i0
        r, c = i0
        fr, fc = f
        return (plane[r, c] * (1 - fr) * (1 - fc)
                + plane[r, c + 1] * (1 - fr) * fc
                + plane[r + 1, c] * fr * (1 - fc)
                + plane[r + 1, c + 1] * fr * fc)

    def test_pixel_center_exact(self):
        rng = np.random.default_rng(1)
        p = rng.standard_normal((1, 8, 8, 4))
        uv = np.array([[[(2 + 0.5) / 8, (5 + 0.5) / 8]]])
        out = ad.plane_sample(Tensor(p), uv).data[0, 0]
        npt.assert_array_equal(out, p[0, 2, 5])

    def test_four_pixel_midpoint_is_mean(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal((1, 8, 8, 3))
        uv = np.array([[[3.0 / 8, 6.0 / 8]]])  # between rows 2,3 and cols 5,6
        out = ad.plane_sample(Tensor(p), uv).data[0, 0]
        expect = p[0, 2:4, 5:7].mean(axis=(0, 1))
        npt.assert_allclose(out, expect, atol=1e-12)

    def test_random_uv_matches_oracle(self):
        rng = np.random.default_rng(3)
        p = rng.standard_normal((2, 6, 6, 5))
        uv = rng.uniform(0, 1, (2, 9, 2))
        out = ad.plane_sample(Tensor(p), uv).data
        for b in range(2):
            for m in range(9):
                npt.assert_allclose(out[b, m], self.oracle(p[b], uv[b, m]),
                                    atol=1e-12)

    def test_out_of_range_clamps_with_warning(self, caplog):
        p = Tensor(np.ones((1, 4, 4, 2)))
        with caplog.at_level("WARNING", logger="giga.autodiff"):
            out = ad.plane_sample(p, np.array([[[-0.2, 1.3]]]))
        assert "clamped" in caplog.text
        npt.assert_allclose(out.data, 1.0)


class TestErrors:
    def test_non_scalar_loss(self):
        x = Parameter(np.ones(3))
        with Tape() as tape:
            y = ad.relu(x)
        with pytest.raises(ad.ContractViolation):
            tape.backward(y)

    def test_shape_error_reports_both_shapes(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.ones((4, 5)))
        with pytest.raises(ad.ShapeError) as e:
            ad.add(a, b)
        assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)

    def test_tape_single_use(self):
        x = Parameter(np.ones(2))
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        with pytest.raises(ad.ContractViolation):
            tape.backward(loss)

    def test_nested_tape_rejected(self):
        with Tape():
            with pytest.raises(ad.ContractViolation):
                with Tape():
                    pass

    def test_finite_check_trips_on_nan(self):
        x = Tensor(np.array([0.0]))
        with pytest.raises(ad.ContractViolation):
            ad.log(x)  # log(0) = -inf


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = ad.Adam({"p": p}, lr=0.1)
        p.accumulate_grad(np.zeros(2))
        opt.step()
        npt.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_bounded_by_lr(self):
        rng = np.random.default_rng(0)
        p = Parameter(rng.standard_normal(5))
        before = p.data.copy()
        opt = ad.Adam({"p": p}, lr=2e-4)
        p.accumulate_grad(rng.standard_normal(5))
        opt.step()
        assert np.all(np.abs(p.data - before) <= 2e-4 * (1 + 1e-6))

    def test_converges_on_quadratic(self):
        p = Parameter(np.array(0.0))
        opt = ad.Adam({"p": p}, lr=0.1)
        for _ in range(200):
            p.accumulate_grad(np.asarray(2.0 * (p.data - 3.0)))
            opt.step()
        assert abs(float(p.data) - 3.0) < 0.05

    def test_frozen_parameter_skipped(self):
        p = Parameter(np.array([1.0]))
        p.requires_grad = False
        opt = ad.Adam({"p": p}, lr=0.1)
        p.accumulate_grad(np.array([5.0]))
        opt.step()
        npt.assert_array_equal(p.data, [1.0])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        params = {"enc.w": Parameter(rng.standard_normal((3, 3, 2, 4))),
                  "dec.b": Parameter(rng.standard_normal(7)),
                  "scalar": Parameter(np.asarray(2.5))}
        path = str(tmp_path / "m.ckpt")
        ad.save_checkpoint(path, params, meta={"mode": "joint", "epoch": 3})
        loaded, meta = ad.load_checkpoint(path)
        assert meta == {"mode": "joint", "epoch": 3}
        assert set(loaded) == set(params)
        for k in params:
            npt.assert_array_equal(loaded[k], params[k].data)

    def test_save_is_deterministic(self, tmp_path):
        params = {"b": Parameter(np.arange(3.0)), "a": Parameter(np.eye(2))}
        p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
        ad.save_checkpoint(p1, params)
        ad.save_checkpoint(p2, params)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOT-A-CKPT\n")
        with pytest.raises(ad.ContractViolation):
            ad.load_checkpoint(str(path))
