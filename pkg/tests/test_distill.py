import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_grad, rel_error
from tpkd import distill as D
from tpkd import nn, training
from tpkd import tensor as T
from tpkd.data import Dataset, gen_synthetic
from tpkd.tensor import Tensor


def kl_direct(t, s, tau):
    """Row-averaged KL(softmax(t/tau) || softmax(s/tau)) by explicit summation."""
    total = 0.0
    for tr, sr in zip(t, s):
        pt = [math.exp(v / tau) for v in tr]
        ps = [math.exp(v / tau) for v in sr]
        zt, zs = sum(pt), sum(ps)
        total += sum(a / zt * math.log((a / zt) / (b / zs)) for a, b in zip(pt, ps))
    return total / len(t)


def test_defaults_match_reported_settings():
    cfg = D.DistillConfig()
    assert (cfg.tau, cfg.lam, cfg.alpha, cfg.k) == (4.0, 0.7, 0.7, 4)


def test_softened_probs():
    np.testing.assert_allclose(D.softened_probs(np.array([[0.0, 0.0]]), 3.0).data, [[0.5, 0.5]])
    p = D.softened_probs(np.array([[10.0, 0.0]]), 100.0).data
    assert np.all(np.abs(p - 0.5) < 0.03)
    np.testing.assert_allclose(p.sum(), 1.0)


def test_kd_loss_examples():
    t = np.array([[math.log(3), 0.0]])
    s = np.array([[0.0, 0.0]])
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert expected == pytest.approx(0.13081, abs=1e-5)
    assert D.kd_loss(t, s, 1.0).item() == pytest.approx(expected, rel=1e-12)
    assert D.kd_loss(t, t, 2.0).item() == pytest.approx(0.0, abs=1e-15)


def test_kd_loss_matches_direct_summation_and_scaling():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t, s = rng.normal(size=(2, 5, 4)) * 3
        tau = rng.uniform(1, 6)
        assert D.kd_loss(t, s, tau).item() == pytest.approx(tau ** 2 * kl_direct(t, s, tau),
                                                           rel=1e-10)
        # temperature-scaled logits at tau=1 equal the tau-softened loss up to tau^2
        assert D.kd_loss(t / tau, s / tau, 1.0).item() * tau ** 2 == pytest.approx(
            D.kd_loss(t, s, tau).item(), rel=1e-10)


def test_multi_teacher_reduces_to_single():
    rng = np.random.default_rng(1)
    for _ in range(200):
        t1, t2, s = rng.normal(size=(3, 6, 4)) * 2
        tau = float(rng.uniform(1.5, 5))
        assert D.multi_teacher_kd_loss(t1, t2, s, tau, 1.0).data.tobytes() == \
            D.kd_loss(t1, s, tau).data.tobytes()
        assert D.multi_teacher_kd_loss(t1, t2, s, tau, 0.0).data.tobytes() == \
            D.kd_loss(t2, s, tau).data.tobytes()
    a = 0.3
    mixed = D.multi_teacher_kd_loss(t1, t2, s, tau, a).item()
    assert mixed == pytest.approx(a * D.kd_loss(t1, s, tau).item()
                                  + (1 - a) * D.kd_loss(t2, s, tau).item(), rel=1e-12)


def test_similarity_map_examples():
    np.testing.assert_array_equal(D.similarity_map(np.array([[1.0, 0], [0, 2]])).data,
                                  [[1, 0], [0, 4]])
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    np.testing.assert_allclose(D.similarity_map(q).data, np.eye(5), atol=1e-12)
    a = np.random.default_rng(1).normal(size=(4, 2, 3))
    a[3] = a[1]
    g = D.similarity_map(a).data
    np.testing.assert_array_equal(g[1], g[3])
    with pytest.raises(ValueError):
        D.similarity_map(np.ones((1, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(1, 10), st.integers(0, 2 ** 16))
def test_similarity_map_symmetric_psd(b, f, seed):
    a = np.random.default_rng(seed).normal(size=(b, f))
    g = D.similarity_map(a).data
    np.testing.assert_allclose(g, g.T, atol=1e-6)
    assert np.linalg.eigvalsh(g).min() >= -1e-6 * max(1.0, np.abs(g).max())


def test_merge_maps():
    i = np.eye(3)
    np.testing.assert_array_equal(D.merge_maps(i, 2 * i, 1.0).data, i)
    np.testing.assert_array_equal(D.merge_maps(i, 2 * i, 0.5).data, 1.5 * i)
    with pytest.raises(ValueError):
        D.merge_maps(np.eye(2), np.eye(3), 0.5)
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.normal(size=(2, 6, 4))
        g = D.merge_maps(a @ a.T, b @ b.T, rng.uniform()).data
        assert np.linalg.eigvalsh(g).min() >= -1e-9


def test_patch_grams_hand_example():
    g = np.zeros((4, 4))
    g[0] = [1, 0, 0, 1]
    g[1:] = np.eye(4)[1:]
    pg = D.patch_grams(g, 2)
    assert pg.d == 2
    np.testing.assert_allclose(pg.grams.data[0], [[-0.5, 0], [0, -0.5]], atol=1e-12)


def test_patch_grams_zero_for_orthonormal_patches():
    # k = 1: the single patch column is the unit-norm row itself
    rng = np.random.default_rng(3)
    g = rng.normal(size=(6, 6))
    np.testing.assert_allclose(D.patch_grams(g, 1).grams.data, 0.0, atol=1e-12)
    # unnormalized rows whose contiguous segments are orthonormal
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    row = q[:, :2].T.reshape(-1)  # segments = orthonormal columns
    g = np.tile(row, (6, 1))
    np.testing.assert_allclose(D.patch_grams(g, 2, normalize="none").grams.data, 0.0,
                               atol=1e-12)


def test_patch_grams_symmetric_and_divisibility():
    g = np.random.default_rng(4).normal(size=(8, 8))
    grams = D.patch_grams(g, 4).grams.data
    np.testing.assert_allclose(grams, grams.transpose(0, 2, 1), atol=1e-12)
    with pytest.raises(ValueError, match="drop-last"):
        D.patch_grams(np.eye(6), 4)


def test_orth_loss_examples():
    rng = np.random.default_rng(5)
    g = D.patch_grams(rng.normal(size=(4, 4)), 2)
    assert D.orth_loss([g], [g]).item() == 0.0
    a = D.PatchGram(Tensor(np.eye(2)[None]), 1)
    z = D.PatchGram(Tensor(np.zeros((1, 2, 2))), 1)
    assert D.orth_loss([a], [z]).item() == 2.0
    h = D.patch_grams(rng.normal(size=(4, 4)), 2)
    one = D.orth_loss([g], [h]).item()
    assert D.orth_loss([g, g], [h, h]).item() == pytest.approx(one, rel=1e-15)
    with pytest.raises(ValueError, match="layer pair 0"):
        D.orth_loss([g], [D.patch_grams(np.eye(6), 2)])


def test_orth_loss_zero_iff_equal():
    rng = np.random.default_rng(6)
    for _ in range(200):
        a = D.patch_grams(rng.normal(size=(4, 4)), 2)
        b = D.patch_grams(rng.normal(size=(4, 4)), 2)
        assert D.orth_loss([a], [a]).item() == 0.0
        assert D.orth_loss([a], [b]).item() > 0.0


def test_total_loss_reduces_to_single_teacher_kd():
    rng = np.random.default_rng(7)
    for _ in range(200):
        s, t1, t2 = rng.normal(size=(3, 8, 4))
        y = rng.integers(0, 4, 8)
        lam = float(rng.uniform(0.1, 0.9))
        cfg = D.DistillConfig(lam=lam, alpha=1.0, beta=0.0, tau=3.0)
        got = D.total_loss(Tensor(s), y, cfg, t1, t2).total
        want = T.cross_entropy(Tensor(s), y) * (1 - lam) + D.kd_loss(t1, Tensor(s), 3.0) * lam
        assert got.data.tobytes() == want.data.tobytes()


def test_total_loss_pure_ce_when_lambda_zero():
    rng = np.random.default_rng(8)
    s, t1, t2 = rng.normal(size=(3, 8, 4))
    y = rng.integers(0, 4, 8)
    cfg = D.DistillConfig(lam=0.0, beta=0.0)
    assert D.total_loss(Tensor(s), y, cfg, t1, t2).total.item() == \
        T.cross_entropy(Tensor(s), y).item()


def _tiny(kind, seed, channels=2):
    spec = nn.ModelSpec(input_kind=kind, channels_in=channels, width=(2, 3, 2),
                        blocks_per_stage=1, classes=3, batch_norm=False)
    return nn.build_model(spec, seed=seed, dtype=np.float64)


def test_full_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    t1, t2, student = _tiny("series_1d", 1), _tiny("image_2d", 2), _tiny("series_1d", 3)
    xs = rng.normal(size=(4, 2, 8))
    xp = rng.random((4, 2, 4, 4))
    y = np.array([0, 1, 2, 1])
    cfg = D.DistillConfig(beta=5.0, k=2, lam=0.6, alpha=0.4, tau=2.0)

    def loss():
        return training.distill_batch_loss(student, xs, y, cfg, t1, t2, xp).total

    terms = loss()
    student.zero_grad()
    terms.backward()
    for name, p in student.named_parameters():
        num = finite_difference_grad(lambda: loss().item(), p.data, eps=1e-5)
        assert rel_error(p.grad, num) < 1e-3, name


# -- training drivers ---------------------------------------------------------

SMALL = nn.ModelSpec(channels_in=2, width=(4, 4, 4), blocks_per_stage=1, classes=2)
PI_SMALL = nn.ModelSpec(input_kind="image_2d", channels_in=2, width=(4, 4, 4),
                        blocks_per_stage=1, classes=2)
SCHED = nn.LrSchedule(0.05, ((3, 0.5),))


@pytest.fixture(scope="module")
def toy():
    tr = gen_synthetic(2, 16, channels=2, length=48, seed=0, split="train")
    va = gen_synthetic(2, 8, channels=2, length=48, seed=1, split="val")
    pi = Dataset(np.random.default_rng(0).random((len(tr), 2, 6, 6)), tr.y, 2, "train")
    t1 = training.train_teacher(tr, va, SMALL, SCHED, 2, seed=1).best_model()
    t2 = training.train_teacher(pi, Dataset(np.random.default_rng(1).random((16, 2, 6, 6)),
                                            va.y, 2, "val"), PI_SMALL, SCHED, 2,
                                seed=2).best_model()
    scratch = training.train_teacher(tr, va, SMALL, SCHED, 2, seed=3)
    return tr, va, pi, t1, t2, scratch


def test_teacher_zero_epochs_returns_init():
    tr = gen_synthetic(2, 4, channels=2, length=48, seed=0)
    r = training.train_teacher(tr, tr, SMALL, SCHED, 0, seed=5)
    init = nn.build_model(SMALL, seed=5).state_dict()
    assert nn.state_hash(r.best_state) == nn.state_hash(r.final_state) == nn.state_hash(init)
    assert r.history == []


def test_teacher_learns_separable_set():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 32)
    x = rng.normal(0, 0.3, (64, 2, 32)) + np.where(y == 0, -1.0, 1.0)[:, None, None]
    ds = Dataset(x, y, 2, "train")
    r = training.train_teacher(ds, ds, SMALL, nn.LrSchedule(0.05), 30, seed=0, batch_size=16)
    assert max(h["val_acc"] for h in r.history) >= 0.95
    assert r.history[r.best_epoch]["val_acc"] == max(h["val_acc"] for h in r.history)


def test_anneal_init_copies_scratch_exactly(toy):
    tr, *_, scratch = toy
    src = scratch.final_model()
    m = training.anneal_init(SMALL, src)
    for k, v in src.state_dict().items():
        assert m.state_dict()[k].tobytes() == v.tobytes(), k
    rng = np.random.default_rng(0)
    src.eval(), m.eval()
    for _ in range(10):
        xb = rng.normal(size=(5, 2, 48)).astype(np.float32)
        assert m(xb)[0].data.tobytes() == src(xb)[0].data.tobytes()


def test_anneal_init_reports_mismatch(toy):
    *_, scratch = toy
    wider = nn.ModelSpec(channels_in=2, width=(4, 8, 4), blocks_per_stage=1, classes=2)
    with pytest.raises(ValueError, match="does not match"):
        training.anneal_init(wider, scratch.final_state)


def test_self_distillation_kd_is_zero(toy):
    tr, *_ = toy
    m = nn.build_model(SMALL, seed=0)
    m.eval()
    logits = m(tr.x[:8])[0].data
    assert D.kd_loss(logits, logits, 4.0).item() == pytest.approx(0.0, abs=1e-6)


def test_lambda_zero_trajectory_equals_plain_training(toy):
    tr, va, pi, t1, t2, _ = toy
    cfg = D.DistillConfig(lam=0.0, beta=0.0, anneal=False)
    a = training.train_student(tr, pi, va, SMALL, cfg, SCHED, 3, 11, t1, t2)
    b = training.train_teacher(tr, va, SMALL, SCHED, 3, seed=11)
    assert nn.state_hash(a.final_state) == nn.state_hash(b.final_state)


def test_alpha_one_matches_single_teacher_kd(toy):
    tr, va, pi, t1, t2, scratch = toy
    cfg = D.DistillConfig(alpha=1.0, beta=0.0, anneal=False)
    a = training.train_student(tr, pi, va, SMALL, cfg, SCHED, 3, 4, t1, t2, mode="tpkd")
    b = training.train_student(tr, None, va, SMALL, cfg, SCHED, 3, 4, t1, mode="kd")
    assert nn.state_hash(a.final_state) == nn.state_hash(b.final_state)


def test_teachers_unchanged_and_feature_run(toy):
    tr, va, pi, t1, t2, scratch = toy
    h1, h2 = nn.state_hash(t1.state_dict()), nn.state_hash(t2.state_dict())
    cfg = D.DistillConfig(beta=1.0, k=4)
    r = training.train_student(tr, pi, va, SMALL, cfg, SCHED, 2, 0, t1, t2,
                               scratch.final_state, batch_size=12)
    assert (nn.state_hash(t1.state_dict()), nn.state_hash(t2.state_dict())) == (h1, h2)
    assert all(h["train_orth"] > 0 for h in r.history)


def test_misaligned_pi_rejected(toy):
    tr, va, pi, t1, t2, scratch = toy
    with pytest.raises(ValueError, match="aligned"):
        training.train_student(tr, pi.subset(np.arange(10)), va, SMALL, D.DistillConfig(),
                               SCHED, 1, 0, t1, t2, scratch.final_state)
