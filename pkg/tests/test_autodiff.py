import numpy as np
import pytest

from sepitch import autodiff as ad
from sepitch.checks import primitive_cases, stage1_objective_case
from sepitch.models import JointModel, ModelConfig


def params(**arrays):
    ps = ad.ParamStore()
    for k, v in arrays.items():
        ps.add(k, v)
    return ps


@pytest.mark.parametrize("case", primitive_cases(seed=0), ids=lambda c: c[0])
def test_primitive_grad_check(case):
    name, loss_fn, ps = case
    rep = ad.grad_check(loss_fn, ps, tol=1e-4)
    assert rep.passed, f"{name}: {rep.summary()}"


def test_composed_objective_grad_check():
    _, loss_fn, ps = stage1_objective_case(seed=3)
    assert ps.n_params() <= 10_000
    rep = ad.grad_check(loss_fn, ps, tol=1e-4, max_coords=200)
    assert rep.passed, rep.summary()
    assert any(k.startswith("dwm.") for k in rep.per_param)


class TestGradCheck:
    def test_linear_tight(self, rng):
        ps = params(w=rng.normal(size=(4, 3)), b=rng.normal(size=3))
        x = rng.normal(size=(5, 4))
        proj = rng.normal(size=(5, 3))
        rep = ad.grad_check(lambda: ad.tsum(ad.mul(ad.linear(x, ps["w"], ps["b"]), proj)), ps,
                            tol=1e-6)
        assert rep.passed, rep.summary()

    def test_sigmoid_tight(self, rng):
        ps = params(a=rng.normal(size=20))
        proj = rng.normal(size=20)
        rep = ad.grad_check(lambda: ad.tsum(ad.mul(ad.sigmoid(ps["a"]), proj)), ps, tol=1e-7)
        assert rep.passed, rep.summary()

    def test_relu_kink_excluded(self):
        ps = params(a=np.array([-1.0, 0.0, 2.0]))
        rep = ad.grad_check(lambda: ad.tsum(ad.relu(ps["a"])), ps)
        assert ("a", 1) in rep.excluded
        assert rep.n_checked == 2 and rep.passed

    def test_three_layer_net(self, rng):
        ps = params(w1=rng.normal(size=(6, 8)), b1=rng.normal(size=8),
                    w2=rng.normal(size=(8, 8)), b2=rng.normal(size=8),
                    w3=rng.normal(size=(8, 2)), b3=rng.normal(size=2))
        x, t = rng.normal(size=(10, 6)), rng.normal(size=(10, 2))

        def loss():
            h = ad.relu(ad.linear(x, ps["w1"], ps["b1"]))
            h = ad.sigmoid(ad.linear(h, ps["w2"], ps["b2"]))
            y = ad.linear(h, ps["w3"], ps["b3"])
            return ad.mean(ad.mul(y - t, y - t))
        assert ad.grad_check(loss, ps, h=1e-5).passed

    def test_failure_is_reported(self):
        # a vjp that is off by a factor of two must be caught
        ps = params(a=np.array([0.3, 0.7]))

        def wrong():
            a = ps["a"]
            return ad.tsum(ad._make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad"))
        rep = ad.grad_check(wrong, ps)
        assert not rep.passed
        assert "FAIL" in rep.summary()


class TestBackward:
    def test_quadratic_closed_form(self, rng):
        W, x, t = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=3)
        ps = params(W=W.T.copy())       # row-vector convention: x @ W.T
        r = ad.matmul(x, ps["W"]) - t
        ad.tsum(ad.mul(r, r)).backward()
        expected = 2 * np.outer(W @ x - t, x)
        np.testing.assert_allclose(ps["W"].grad.T, expected, rtol=1e-12)

    def test_zero_input_zero_output_grad(self, rng):
        ps = params(w1=rng.normal(size=(4, 5)), w2=rng.normal(size=(5, 2)))
        h = ad.relu(ad.matmul(np.zeros((3, 4)), ps["w1"]))
        y = ad.matmul(h, ps["w2"])
        ad.tsum(ad.mul(y, y)).backward()
        np.testing.assert_array_equal(ps["w2"].grad, 0.0)

    def test_non_scalar_loss(self):
        a = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.ContractError):
            ad.mul(a, 2.0).backward()

    def test_shape_errors_name_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(np.ones((2, 3)), np.ones((4, 2)))
        with pytest.raises(ad.ShapeError, match="conv2d"):
            ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))

    def test_batch_gradient_is_sum_of_items(self, rng):
        ps = params(w=rng.normal(size=(4, 3)))
        x = rng.normal(size=(5, 4))

        def grad(rows):
            ps.zero_grad()
            ad.tsum(ad.sigmoid(ad.matmul(x[rows], ps["w"]))).backward()
            return ps["w"].grad.copy()
        total = grad(slice(None))
        parts = sum(grad(slice(i, i + 1)) for i in range(5))
        np.testing.assert_allclose(total, parts, rtol=0, atol=1e-12)

    def test_shared_node_accumulates(self):
        a = ad.Tensor(np.array(3.0), requires_grad=True)
        ad.mul(a, a).backward()
        assert a.grad == pytest.approx(6.0)

    def test_no_grad(self):
        a = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(a, 2.0)
        assert not y.requires_grad

    def test_deep_chain_no_recursion_limit(self):
        a = ad.Tensor(np.array(1.0), requires_grad=True)
        y = a
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert a.grad == 1.0

    def test_bce_clip(self):
        p = ad.Tensor(np.array([0.0, 1.0]), requires_grad=True)
        v = ad.bce(p, np.array([1.0, 0.0]))
        np.testing.assert_allclose(v.data, -np.log(1e-7), rtol=1e-9)
        ad.tsum(v).backward()
        np.testing.assert_array_equal(p.grad, 0.0)


class TestAdam:
    def test_zero_grad_leaves_params(self, rng):
        ps = params(w=rng.normal(size=(3, 3)))
        before = ps["w"].data.copy()
        ps["w"].grad = np.zeros((3, 3))
        ad.Adam(ps).step()
        np.testing.assert_array_equal(ps["w"].data, before)

    def test_first_step_size(self):
        # bias-corrected first step moves each coordinate by lr * g/|g|
        ps = params(w=np.zeros(3))
        ps["w"].grad = np.array([2.0, -0.5, 1e-3])
        ad.Adam(ps, lr=0.01).step()
        np.testing.assert_allclose(ps["w"].data, -0.01 * np.sign([2.0, -0.5, 1e-3]), rtol=1e-4)

    def test_matches_reference_update(self, rng):
        ps = params(w=rng.normal(size=4))
        w = ps["w"].data.copy()
        opt = ad.Adam(ps, lr=1e-3)
        m = v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            ps["w"].grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(ps["w"].data, w, rtol=1e-12)

    @pytest.mark.parametrize("epoch,lr", [(0, 0.001), (9, 0.001), (10, 0.00098),
                                          (25, 0.0009604)])
    def test_schedule(self, epoch, lr):
        opt = ad.Adam(params(w=np.zeros(1)))
        opt.set_epoch(epoch)
        assert opt.lr == pytest.approx(lr, rel=1e-12)

    def test_nan_gradient_names_parameter(self):
        ps = params(good=np.zeros(2), bad=np.zeros(2))
        ps["good"].grad = np.zeros(2)
        ps["bad"].grad = np.array([0.0, np.nan])
        with pytest.raises(ad.NumericalError, match="bad"):
            ad.Adam(ps).step()

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"decay_factor": 0}, {"decay_factor": 1.5},
                                    {"decay_interval": 0}])
    def test_invalid_state(self, kw):
        with pytest.raises(ValueError):
            ad.Adam(params(w=np.zeros(1)), **kw)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = JointModel(ModelConfig(), rng)
        opt = ad.Adam(model.params)
        for _, t in model.params.items():
            t.grad = rng.normal(size=t.shape)
        opt.step()
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(path, model.params, opt, {"a": 1}, {"stage": 1})
        tensors, header = ad.load_checkpoint(path)
        assert header["config_hash"] == ad.config_hash({"a": 1})
        assert header["extra"] == {"stage": 1}
        other = JointModel(ModelConfig(), np.random.default_rng(99))
        opt2 = ad.Adam(other.params)
        ad.restore(other.params, tensors, opt2, header)
        for (k, a), (_, b) in zip(model.params.items(), other.params.items()):
            np.testing.assert_array_equal(a.data, b.data)
            np.testing.assert_array_equal(opt.m[k], opt2.m[k])
        assert opt2.step_count == 1

    def test_bytes_deterministic(self, tmp_path, rng):
        ps = params(a=rng.normal(size=(3, 2)), b=rng.normal(size=4))
        ad.save_checkpoint(tmp_path / "1.ckpt", ps, config={"x": 1})
        ad.save_checkpoint(tmp_path / "2.ckpt", ps, config={"x": 1})
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()
        assert (tmp_path / "1.ckpt").read_bytes()[:8] == ad.CHECKPOINT_MAGIC

    def test_shape_mismatch_and_garbage(self, tmp_path):
        ad.save_checkpoint(tmp_path / "a.ckpt", params(w=np.zeros(3)))
        tensors, _ = ad.load_checkpoint(tmp_path / "a.ckpt")
        with pytest.raises(ad.ShapeError):
            ad.restore(params(w=np.zeros(4)), tensors)
        (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(ValueError):
            ad.load_checkpoint(tmp_path / "junk")
