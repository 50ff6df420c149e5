import math

import numpy as np
import pytest

from swinmamba import tensor as T
from swinmamba.data import Sample, VesselGenParams, generate_vessels, make_split
from swinmamba.metrics import count_components
from swinmamba.network import ModelConfig, build_model, segmentation_loss
from swinmamba.tensor import NonFiniteError, Tensor
from swinmamba.trainer import (AdamState, TrainConfig, adam_step, epoch_order, evaluate, load_checkpoint,
                               load_training_state, predict_mask, train)

TINY = dict(stages=2, base_channels=4, L=3, s=4, input_size=16)


def params_of(*values):
    return {f"p{i}": Tensor(np.array(v, dtype=float), requires_grad=True) for i, v in enumerate(values)}


def textbook_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


# ---------------------------------------------------------------- Adam

def test_adam_first_step_closed_form():
    p = params_of(0.5)
    state = AdamState(lr=1e-4)
    adam_step(p, {"p0": np.array(1.0)}, state)
    # m_hat = v_hat = 1 after bias correction
    assert p["p0"].data == pytest.approx(0.5 - 1e-4 / (1 + 1e-8), abs=1e-18)
    assert state.t == 1


def test_adam_matches_textbook_scalar_trajectory(rng):
    grads = rng.normal(size=12)
    p = params_of(0.3)
    state = AdamState(lr=1e-2)
    for g, want in zip(grads, textbook_adam(0.3, grads, 1e-2)):
        adam_step(p, {"p0": np.array(g)}, state)
        assert p["p0"].data == pytest.approx(want, abs=1e-15)


def test_adam_zero_gradient_keeps_parameters():
    p = params_of([1.0, -2.0])
    state = AdamState()
    adam_step(p, {"p0": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["p0"].data, [1.0, -2.0])
    assert state.t == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adam_refuses_nonfinite_gradient(bad):
    p = params_of([1.0, 2.0], [3.0])
    state = AdamState()
    adam_step(p, {"p0": np.ones(2), "p1": np.ones(1)}, state)
    before = {k: v.data.copy() for k, v in p.items()}
    m_before = {k: v.copy() for k, v in state.m.items()}
    with pytest.raises(NonFiniteError, match="p1.*step refused"):
        adam_step(p, {"p0": np.ones(2), "p1": np.array([bad])}, state)
    assert state.t == 1
    for k in p:
        np.testing.assert_array_equal(p[k].data, before[k])
        np.testing.assert_array_equal(state.m[k], m_before[k])


# ---------------------------------------------------------------- evaluation

class OracleModel:
    """Returns +-10 logits from a lookup of the true masks."""

    def __init__(self, samples):
        self.masks = {s.image.tobytes(): s.mask for s in samples}

    def __call__(self, image):
        m = self.masks[image.data[0].tobytes()]
        return Tensor(np.where(m, 10.0, -10.0)[None])


def test_oracle_model_scores_perfectly():
    _, test = make_split(0, 4, seed=2, params=VesselGenParams(size=32))
    rep = evaluate(OracleModel(test), test)
    assert rep.means() == {"dice": 1.0, "cldice": 1.0, "betti0_error": 0.0}


def test_background_model_scores_zero_dice():
    _, test = make_split(0, 3, seed=2, params=VesselGenParams(size=32))
    rep = evaluate(lambda img: Tensor(np.full((1, 32, 32), -5.0)), test)
    assert rep.dice == [0.0, 0.0, 0.0]
    assert rep.betti0_error == [float(count_components(s.mask)) for s in test]


def test_report_means_are_hand_averages():
    _, test = make_split(0, 3, seed=4, params=VesselGenParams(size=32))
    model = build_model(ModelConfig.from_preset("m1", **{**TINY, "input_size": 32}))
    rep = evaluate(model, test)
    assert rep.means()["dice"] == pytest.approx(sum(rep.dice) / 3, abs=1e-15)
    assert rep.means()["cldice"] == pytest.approx(sum(rep.cldice) / 3, abs=1e-15)


def test_predict_mask_thresholds_at_half():
    logits = np.array([[-1e-9, 0.0, 1e-9]])
    assert predict_mask(lambda img: Tensor(logits[None]), np.zeros((1, 3))).tolist() == [[0, 0, 1]]


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ValueError):
        evaluate(lambda img: img, [])


# ---------------------------------------------------------------- training loop

def tiny_data(n_train=2, n_test=2):
    return make_split(n_train, n_test, seed=5, params=VesselGenParams(size=16, trees=1, steps=12))


def cfg(tmp_path=None, **kw):
    base = dict(epochs=2, eval_interval=1, dtype="float64")
    if tmp_path is not None:
        base.update(checkpoint_path=str(tmp_path / "m.ckpt"), log_path=str(tmp_path / "log.txt"))
    return TrainConfig(**{**base, **kw})


def test_epoch_order_is_a_seeded_permutation():
    a = epoch_order(0, 3, 10)
    np.testing.assert_array_equal(a, epoch_order(0, 3, 10))
    assert sorted(a) == list(range(10))
    assert not np.array_equal(a, epoch_order(0, 4, 10))


def test_one_epoch_on_two_samples_takes_two_steps():
    tr, te = tiny_data()
    res = train(cfg(epochs=1), ModelConfig.from_preset("m2", **TINY), tr, te)
    assert len(res.losses) == 2 and res.adam.t == 2
    assert res.evals[0][0] == 1


def test_training_is_deterministic_in_float64(tmp_path):
    tr, te = tiny_data()
    mc = ModelConfig.from_preset("full", **TINY)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = train(cfg(tmp_path / "a"), mc, tr, te)
    b = train(cfg(tmp_path / "b"), mc, tr, te)
    assert a.losses == b.losses
    assert (tmp_path / "a" / "log.txt").read_text() == (tmp_path / "b" / "log.txt").read_text()


def test_log_records_steps_and_epochs(tmp_path):
    tr, te = tiny_data()
    res = train(cfg(tmp_path), ModelConfig.from_preset("m1", **TINY), tr, te)
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert lines[0] == f"step 1 {res.losses[0]!r}"
    epochs = [l.split() for l in lines if l.startswith("epoch")]
    assert [e[1] for e in epochs] == ["1", "2"]
    assert float(epochs[0][2]) == res.evals[0][1]["dice"]
    assert len(lines) == 4 + 2


def test_best_and_last_checkpoints(tmp_path):
    tr, te = tiny_data()
    res = train(cfg(tmp_path), ModelConfig.from_preset("m2", **TINY), tr, te)
    _, adam, meta = load_training_state(tmp_path / "m.ckpt.last")
    assert adam.t == 4 and meta["train.epoch"] == "2"
    best = max(e[1]["cldice"] for e in res.evals)
    assert float(meta["train.best_cldice"]) == best == res.best_cldice
    model = load_checkpoint(tmp_path / "m.ckpt")
    assert model.config == ModelConfig.from_preset("m2", **TINY)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    tr, te = tiny_data(3, 1)
    mc = ModelConfig.from_preset("full", **TINY)
    (tmp_path / "full").mkdir()
    (tmp_path / "part").mkdir()
    whole = train(cfg(tmp_path / "full", epochs=3, crop=8), mc, tr, te)
    train(cfg(tmp_path / "part", epochs=1, crop=8), mc, tr, te)
    rest = train(cfg(tmp_path / "part", epochs=3, crop=8), mc, tr, te,
                 resume=str(tmp_path / "part" / "m.ckpt.last"))
    assert rest.losses == whole.losses[3:]
    for k, p in whole.model.params.items():
        np.testing.assert_array_equal(rest.model.params[k].data, p.data)


def test_resume_needs_optimizer_state(tmp_path):
    from swinmamba.trainer import save_checkpoint

    tr, _ = tiny_data()
    mc = ModelConfig.from_preset("m1", **TINY)
    save_checkpoint(build_model(mc), tmp_path / "bare.ckpt")
    with pytest.raises(ValueError, match="optimizer"):
        train(cfg(), mc, tr, resume=str(tmp_path / "bare.ckpt"))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_divergence_aborts_with_step_index():
    tr, _ = tiny_data()
    poisoned = Sample(image=np.full((16, 16), 1e300), mask=tr[0].mask, id="bad")
    order = epoch_order(0, 0, 2)
    data = [tr[0], poisoned] if order[0] == 0 else [poisoned, tr[0]]
    with pytest.raises(NonFiniteError, match="loss diverged at step 2"):
        train(cfg(epochs=1), ModelConfig.from_preset("m1", **TINY), data)


def test_training_rejects_empty_set():
    with pytest.raises(ValueError):
        train(cfg(), ModelConfig.from_preset("m1", **TINY), [])


def test_float32_training_keeps_float32_params():
    tr, _ = tiny_data()
    res = train(cfg(epochs=1, dtype="float32"), ModelConfig.from_preset("m2", **TINY), tr)
    assert all(p.dtype == np.float32 for p in res.model.params.values())
    assert all(np.isfinite(res.losses))


def test_full_model_loss_decreases_on_a_toy_batch():
    smp = generate_vessels(VesselGenParams(size=32, seed=2))
    model = build_model(ModelConfig.from_preset("full", stages=2, base_channels=8, input_size=32))
    adam = AdamState(lr=1e-4)
    losses = []
    for _ in range(21):
        model.zero_grad()
        loss = segmentation_loss(model(Tensor(smp.image[None])), smp.mask[None])
        loss.backward()
        losses.append(loss.item())
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, adam)
    assert all(b < a for a, b in zip(losses, losses[1:]))
