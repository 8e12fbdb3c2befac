import math

import numpy as np
import pytest

from helpers import nt_xent_reference, numeric_grad, rel_err
from samclr import contrastive as C
from samclr.data import Sample
from samclr.image_ops import JitterParams
from samclr.sampling import SamplerConfig
from samclr.synthetic import SceneSpec, generate_scenes
from samclr.tensor import Tape, Tensor, load_checkpoint


def unit_rows(rng, m, d):
    z = rng.normal(size=(m, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def loss_of(z, tau=0.07):
    return C.nt_xent(Tensor(z), tau).item()


def tiny_samples(n=8, size=40, seed=0):
    spec = SceneSpec(size=size, min_objects=1, max_objects=2, min_scale=10, max_scale=16, max_coverage=0.6)
    return [Sample(s.image_id, s.image, s.region_set(), s.label) for s in generate_scenes(spec, n, seed)]


TINY_ENC = C.EncoderConfig(widths=(4, 6), kernel=3, stride=2)
TINY_HEAD = C.HeadConfig(hidden=5, out_dim=4)


class TestNtXent:
    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
            tau = float(rng.choice([0.07, 0.5, 1.0]))
            z = unit_rows(rng, 2 * n, d)
            ref = nt_xent_reference(z, tau)
            assert abs(loss_of(z, tau) - ref) <= 1e-10 * max(1.0, abs(ref))

    def test_degenerate_identical_pair(self):
        z = np.array([[0.6, 0.8], [0.6, 0.8]])
        assert loss_of(z) == 0.0

    def test_orthonormal_example(self):
        e1, e2 = [1.0, 0.0], [0.0, 1.0]
        z = np.array([e1, e1, e2, e2])
        # each row: positive logit 1/tau, negatives 0 and 0
        expected = math.log(math.exp(1 / 0.07) + 2) - 1 / 0.07
        assert abs(loss_of(z) - expected) < 1e-12
        assert abs(loss_of(z) - nt_xent_reference(z, 0.07)) < 1e-10

    def test_high_temperature_limit(self):
        z = unit_rows(np.random.default_rng(1), 8, 5)
        assert abs(loss_of(z, 1e8) - math.log(7)) < 1e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        z = unit_rows(rng, 10, 6)
        perm = rng.permutation(5)
        rows = np.concatenate([[2 * p, 2 * p + 1] for p in perm])
        assert abs(loss_of(z) - loss_of(z[rows])) < 1e-12

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        z = unit_rows(rng, 8, 6)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert abs(loss_of(z) - loss_of(z @ q)) < 1e-10

    def test_nonnegative_when_positive_is_max(self):
        rng = np.random.default_rng(4)
        base = unit_rows(rng, 4, 8)
        z = np.repeat(base, 2, axis=0)
        assert loss_of(z) >= 0

    def test_errors(self):
        z = unit_rows(np.random.default_rng(5), 4, 3)
        with pytest.raises(ValueError):
            C.nt_xent(Tensor(z), 0.0)
        with pytest.raises(ValueError, match="normalized"):
            C.nt_xent(Tensor(z * 2), 0.1)
        with pytest.raises(ValueError):
            C.nt_xent(Tensor(z[:3]), 0.1)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(6, 4))
        x = Tensor(raw, requires_grad=True)
        from samclr import tensor as T
        with Tape() as tape:
            loss = C.nt_xent(T.l2_normalize(x), 0.2)
            tape.backward(loss)
        num = numeric_grad(lambda: C.nt_xent(T.l2_normalize(Tensor(raw)), 0.2).item(), [raw])[0]
        assert rel_err(x.grad, num) < 1e-6


class TestModel:
    def test_shapes_and_norms(self):
        m = C.Model(TINY_ENC, TINY_HEAD, 0)
        views = np.random.default_rng(0).random((6, 3, 16, 16))
        with Tape():
            z = C.encode_project(Tensor(views), m)
        assert z.shape == (6, 4)
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-9)

    def test_identical_views(self):
        m = C.Model(TINY_ENC, TINY_HEAD, 0)
        v = np.random.default_rng(1).random((1, 3, 16, 16))
        z = C.encode_project(Tensor(np.concatenate([v, v])), m).data
        np.testing.assert_array_equal(z[0], z[1])

    def test_bad_shapes(self):
        m = C.Model(TINY_ENC, TINY_HEAD, 0)
        with pytest.raises(ValueError):
            C.encode_project(Tensor(np.zeros((3, 3, 16, 16))), m)
        with pytest.raises(ValueError):
            C.encode_project(Tensor(np.zeros((2, 1, 16, 16))), m)
        with pytest.raises(ValueError):
            C.encode_project(Tensor(np.zeros((2, 3, 4, 4))), m)

    def test_init_deterministic(self):
        a = C.Model(TINY_ENC, TINY_HEAD, 3).named_arrays()
        b = C.Model(TINY_ENC, TINY_HEAD, 3).named_arrays()
        assert all(na == nb and np.array_equal(x, y) for (na, x), (nb, y) in zip(a, b))

    def test_full_step_gradient(self):
        samples = tiny_samples(2)
        sampler = SamplerConfig(view_size=16)
        views, _ = C.make_views(samples, [0, 1], 0, sampler, JitterParams(), 0)
        m = C.Model(TINY_ENC, TINY_HEAD, 0)
        C.loss_and_grads(m, views, 0.5)
        params = m.parameters()
        analytic = [p.grad.copy() for p in params]
        f = lambda: C.nt_xent(C.encode_project(Tensor(views), m), 0.5).item()  # noqa: E731
        numeric = numeric_grad(f, [p.data for p in params])
        assert max(rel_err(a, n) for a, n in zip(analytic, numeric)) <= 1e-4


class TestTraining:
    def test_initial_loss_near_uniform(self):
        samples = tiny_samples(32)
        res = C.train_loop(samples, C.TrainConfig(batch_size=16, epochs=0), SamplerConfig(view_size=16),
                           TINY_ENC, TINY_HEAD)
        assert abs(res.metrics[0].loss - math.log(31)) <= 0.5

    def test_zero_epochs(self, tmp_path):
        samples = tiny_samples(4)
        res = C.train_loop(samples, C.TrainConfig(batch_size=2, epochs=0), SamplerConfig(view_size=16),
                           TINY_ENC, TINY_HEAD, checkpoint=tmp_path / "m.ck")
        assert len(res.metrics) == 1 and res.losses == []
        init = dict(C.Model(TINY_ENC, TINY_HEAD, 0).named_arrays())
        saved = load_checkpoint(tmp_path / "m.ck")
        assert all(np.array_equal(saved[k], v) for k, v in init.items())

    def test_row_count_and_determinism(self):
        samples = tiny_samples(8)
        cfg = C.TrainConfig(batch_size=2, epochs=2, eval_every=3)
        run = lambda: C.train_loop(samples, cfg, SamplerConfig(view_size=16), TINY_ENC, TINY_HEAD,  # noqa: E731
                                   evaluate=lambda m: 0.5)
        a, b = run(), run()
        total = 2 * (8 // 2)
        assert len(a.metrics) == total // 3 + 1
        assert a.losses == b.losses
        assert C.metrics_csv(a.metrics) == C.metrics_csv(b.metrics)
        assert C.metrics_csv(a.metrics).splitlines()[0] == "step,epoch,loss,knn_acc"

    def test_thread_count_does_not_change_result(self, monkeypatch):
        samples = tiny_samples(8)
        cfg = C.TrainConfig(batch_size=4, epochs=1)
        monkeypatch.setenv("SAMCLR_THREADS", "1")
        a = C.train_loop(samples, cfg, SamplerConfig(view_size=16), TINY_ENC, TINY_HEAD)
        monkeypatch.setenv("SAMCLR_THREADS", "3")
        b = C.train_loop(samples, cfg, SamplerConfig(view_size=16), TINY_ENC, TINY_HEAD)
        assert a.losses == b.losses

    def test_simclr_without_regions(self):
        samples = [Sample(s.image_id, s.image, None, s.label) for s in tiny_samples(4)]
        C.train_loop(samples, C.TrainConfig(batch_size=2), SamplerConfig(mode="simclr", view_size=16),
                     TINY_ENC, TINY_HEAD)
        with pytest.raises(ValueError, match="region"):
            C.train_loop(samples, C.TrainConfig(batch_size=2), SamplerConfig(view_size=16), TINY_ENC, TINY_HEAD)

    def test_non_finite_aborts(self):
        samples = tiny_samples(4)
        state = C.TrainState(C.Model(TINY_ENC, TINY_HEAD, 0), C.AdamState())
        views = np.full((4, 3, 16, 16), np.nan)
        with pytest.raises(C.TrainingAborted, match="step 0"):
            C.train_step(state, views, C.TrainConfig(), [s.image_id for s in samples])

    def test_aborted_message(self):
        err = C.TrainingAborted(7, ["a", "b"], float("nan"))
        assert "step 7" in str(err) and "a, b" in str(err)
