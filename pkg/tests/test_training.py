import numpy as np
import pytest

from dinspoof.errors import ConfigError, DataError
from dinspoof.layers import GradientTape, Param, ParameterStore
from dinspoof.losses import BONAFIDE, TTS, VC, CenterState, LossWeights
from dinspoof.network import DinConfig, DinModel
from dinspoof import losses
from dinspoof.training import (
    Adam,
    BonafideGaussian,
    TrainConfig,
    TrainingSet,
    adam_step,
    balanced_batches,
    fit_gaussian,
    refresh_center,
    train_stage1,
    train_stage2,
)

TINY = DinConfig(input_height=12, input_width=10, stem_channels=4, block_channels=[8, 8, 12, 16],
                 block_strides=[2, 1, 2, 1], softmax_head_hidden=6, n_classes_stage1=3, contrastive_dim=5)


def toy_set(n_per_class=4, seed=0, noise=0.3):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((3, 3, 12, 10))
    feats, groups = [], []
    for g in (BONAFIDE, TTS, VC):
        for _ in range(n_per_class):
            feats.append(protos[g] + noise * rng.standard_normal((3, 12, 10)))
            groups.append(g)
    n = len(feats)
    return TrainingSet(np.stack(feats).astype(np.float32), np.array(groups), np.array(groups),
                       [f"u{i}" for i in range(n)], np.zeros(n, int))


def cfg(**kw):
    base = dict(epochs_stage1=1, epochs_stage2=1, batch_size=6, lr_stage1=1e-3, min_bonafide_per_batch=2)
    base.update(kw)
    return TrainConfig(**base)


def trainable(model):
    return {n: p.value.copy() for n, p in model.store.items() if p.trainable}


# --- sampler --------------------------------------------------------------

def test_balanced_batches_floor_and_coverage():
    is_b = np.arange(128) % 2 == 0
    batches = balanced_batches(is_b, 64, 8, np.random.default_rng(0))
    assert all(len(b) == 64 and is_b[b].sum() >= 8 for b in batches)
    assert set(np.concatenate(batches)) == set(range(128))


def test_balanced_batches_deterministic_and_rare_bonafide():
    is_b = np.zeros(100, bool)
    is_b[[3, 50, 77]] = True
    a = balanced_batches(is_b, 16, 2, np.random.default_rng(4))
    b = balanced_batches(is_b, 16, 2, np.random.default_rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(is_b[x].sum() >= 2 for x in a)
    assert set(np.concatenate(a)) == set(range(100))
    with pytest.raises(DataError):
        balanced_batches(np.zeros(10, bool), 4, 1, np.random.default_rng(0))


# --- Adam -------------------------------------------------------------------

def store_of(**arrays):
    s = ParameterStore()
    for k, v in arrays.items():
        s.add(k, Param(np.asarray(v, dtype=np.float64), group="head" if k.startswith("h") else "backbone"))
    return s


def test_adam_first_step_hand_trace():
    s = store_of(w=[1.0, -2.0])
    t = GradientTape()
    g = np.array([0.5, -3e-9])
    t.add(s["w"], g)
    Adam().step(s, t, 0.1)
    m_hat = g  # (1-b1) g / (1-b1)
    v_hat = g * g
    np.testing.assert_allclose(s["w"].value, [1.0, -2.0] - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-15)


def test_adam_zero_gradient_and_group_rates():
    s = store_of(h=[1.0], b=[2.0])
    t = GradientTape()
    t.add(s["h"], np.array([0.0]))
    t.add(s["b"], np.array([0.0]))
    Adam().step(s, t, 0.1)
    assert s["h"].value[0] == 1.0 and s["b"].value[0] == 2.0

    t = GradientTape()
    t.add(s["h"], np.array([1.0]))
    t.add(s["b"], np.array([1.0]))
    opt = Adam()
    adam_step(s, t, opt, {"head": 0.1, "backbone": 0.0})
    assert s["b"].value[0] == 2.0 and s["h"].value[0] != 1.0
    assert opt.t == 1 and opt.m["b"][0] != 0  # moments still advance


# --- stage 1 ---------------------------------------------------------------

def test_zero_epochs_and_zero_lr_leave_parameters():
    data = toy_set()
    for c in (cfg(epochs_stage1=0), cfg(epochs_stage1=2, lr_stage1=0.0)):
        model = DinModel(TINY, seed=0)
        before = trainable(model)
        train_stage1(model, data, c)
        for n, v in trainable(model).items():
            assert v.tobytes() == before[n].tobytes(), n


# frozen from the implementation's own first run (float64, seed 0)
TOY_FIRST_L, TOY_LAST_L = 173.186846, 26.028007


def test_one_epoch_on_four_samples_reduces_loss():
    data = toy_set(n_per_class=2)
    keep = [0, 1, 2, 4]
    four = TrainingSet(data.features[keep], data.labels[keep], data.groups[keep],
                       [data.utt_ids[i] for i in keep], data.segment_index[keep])
    recs = []
    train_stage1(DinModel(TINY, seed=0, dtype=np.float64), four,
                 cfg(batch_size=2, min_bonafide_per_batch=1, lr_stage1=1e-3), on_record=recs.append)
    assert len(recs) == 4
    assert recs[-1].loss < recs[0].loss
    assert recs[0].loss == pytest.approx(TOY_FIRST_L, rel=1e-6)
    assert recs[-1].loss == pytest.approx(TOY_LAST_L, rel=1e-6)


def test_stage1_loss_decreases_over_epochs():
    data = toy_set(n_per_class=6)
    recs = []
    train_stage1(DinModel(TINY, seed=1), data, cfg(epochs_stage1=6, batch_size=9, min_bonafide_per_batch=3),
                 on_record=recs.append)
    first = np.mean([r.loss for r in recs if r.epoch == 1])
    last = np.mean([r.loss for r in recs if r.epoch == 6])
    assert last < first


def test_center_schedule_trace_and_isolation():
    data = toy_set(n_per_class=4)
    c = cfg(epochs_stage1=11, batch_size=6, min_bonafide_per_batch=2)
    steps = []

    def on_step(info):
        assert info["center_before"].tobytes() == info["center_after_backward"].tobytes()
        assert not any("center" in k for k in info["tape"])
        steps.append(info["epoch"])

    center, _ = train_stage1(DinModel(TINY, seed=0), data, c, on_step=on_step)
    expected = [("global", 0)]
    for e in range(1, 12):
        expected += [("batch", e)] * steps.count(e)
        if e % 5 == 0:
            expected.append(("global", e))
    assert center.events == expected
    assert center.last_refresh_epoch == 10


def test_global_only_center_mode():
    data = toy_set()
    center, _ = train_stage1(DinModel(TINY, seed=0), data, cfg(epochs_stage1=5, center_mode="global"))
    assert center.events == [("global", 0), ("global", 5)]


class _IdentityModel:
    class cfg:
        embedding_dim = 2

    @staticmethod
    def embed_many(x, batch_size=32):
        return np.asarray(x, dtype=np.float64).reshape(len(x), -1)


def test_refresh_center_examples():
    feats = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]])
    data = TrainingSet(feats, [0, 0, 1], [BONAFIDE, BONAFIDE, TTS], ["a", "b", "c"], [0, 0, 0])
    st = refresh_center(_IdentityModel(), data, None, 0)
    np.testing.assert_array_equal(st.c, [1.0, 1.0])
    one = TrainingSet(feats, [0, 1, 1], [BONAFIDE, TTS, VC], ["a", "b", "c"], [0, 0, 0])
    np.testing.assert_array_equal(refresh_center(_IdentityModel(), one, None, 0).c, [0.0, 0.0])
    # off-schedule epochs leave the center alone
    st.c = np.array([7.0, 7.0])
    refresh_center(_IdentityModel(), data, st, 3)
    np.testing.assert_array_equal(st.c, [7.0, 7.0])
    refresh_center(_IdentityModel(), data, st, 3, batch_X=np.array([[1.0, 3.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(st.c, [2.0, 4.0])


def test_stage1_requires_stage1_heads():
    with pytest.raises(ConfigError):
        train_stage1(DinModel(TINY, heads="entropy"), toy_set(), cfg())


# --- stage 2 ---------------------------------------------------------------

def test_stage2_swaps_heads_and_freezes_backbone_at_lr0():
    data = toy_set()
    model = DinModel(TINY, seed=0)
    backbone = {n: v for n, v in trainable(model).items() if n.startswith("backbone")}
    train_stage2(model, data, cfg(epochs_stage2=2, lr_stage2_backbone=0.0))
    assert model.heads == "entropy"
    assert not any(n.startswith(("softmax_head", "contrastive_head")) for n in model.store.names())
    for n, v in backbone.items():
        assert model.store[n].value.tobytes() == v.tobytes()


def test_stage2_head_fits_separable_toy_set():
    data = toy_set(n_per_class=2, noise=0.05)
    keep = [0, 1, 2, 4]
    four = TrainingSet(data.features[keep], data.labels[keep], data.groups[keep],
                       [data.utt_ids[i] for i in keep], data.segment_index[keep])
    model = DinModel(TINY, seed=0, dtype=np.float64)
    c = cfg(epochs_stage2=200, batch_size=4, min_bonafide_per_batch=2, lr_stage2_backbone=0.0,
            lr_stage2_head=1e-2)
    hit = None

    def on_epoch(epoch, _):
        nonlocal hit
        logits = model.forward_heads(model.embed(four.features))
        if hit is None and np.all(logits.argmax(axis=1) == (~four.bonafide).astype(int)):
            hit = epoch

    train_stage2(model, four, c, on_epoch=on_epoch)
    assert hit is not None and hit <= 200


# --- Gaussian -----------------------------------------------------------------

def test_gaussian_hand_example():
    g = fit_gaussian(np.array([[0.0, 0], [2, 0], [0, 2], [2, 2]]), eps=0.0)
    np.testing.assert_allclose(g.mu, [1, 1])
    np.testing.assert_allclose(g.sigma, [[4 / 3, 0], [0, 4 / 3]])


def test_gaussian_repeated_embedding():
    g = fit_gaussian(np.tile([[1.0, 2.0, 3.0]], (5, 1)), eps=0.5)
    assert not np.any(g.sigma)
    np.testing.assert_allclose(g.precision, 2 * np.eye(3))


def test_gaussian_precision_residual_and_default_eps():
    x = np.random.default_rng(0).standard_normal((100, 8))
    g = fit_gaussian(x)
    assert g.eps == pytest.approx(1e-3 * np.trace(g.sigma) / 8)
    np.testing.assert_allclose(g.precision @ (g.sigma + g.eps * np.eye(8)), np.eye(8), atol=1e-6)
    np.testing.assert_allclose(g.sigma, g.sigma.T, atol=1e-8)


def test_gaussian_rejects_indefinite():
    with pytest.raises(Exception):
        BonafideGaussian.from_moments(np.zeros(2), np.array([[1.0, 0], [0, -1.0]]), 0.0)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(center_mode="sometimes")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict({"weights": {"alpha": 1, "beta": 0, "gamma": 0}}).weights == LossWeights(1, 0, 0)
