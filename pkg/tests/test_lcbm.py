import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcbm import tape
from vcbm.encoder import VideoClip
from vcbm.lcbm import (
    VCBM,
    BottleneckParams,
    ModelConfig,
    explanation_logits,
    forward,
    maneuver_logits,
    pooled_explanation_logits,
)
from vcbm.schema import N_EXPLANATIONS, N_MANEUVERS
from vcbm.tape import Tensor


def bottleneck(rng, dim=5):
    return BottleneckParams.init(rng, dim)


def test_identical_tokens_give_single_token_logits(rng):
    p = bottleneck(rng)
    z = rng.normal(size=5)
    _, mean = explanation_logits(Tensor(np.tile(z, (4, 1))), p)
    _, single = explanation_logits(Tensor(z[None]), p)
    np.testing.assert_allclose(mean.data, single.data, atol=1e-15)


def test_zero_weights_give_bias(rng):
    p = bottleneck(rng)
    p.head_weight.data[:] = 0
    p.head_bias.data[:] = np.arange(N_EXPLANATIONS)
    _, mean = explanation_logits(Tensor(rng.normal(size=(3, 5))), p)
    np.testing.assert_array_equal(mean.data, np.arange(N_EXPLANATIONS))


def test_late_average_of_two_logits(rng):
    p = bottleneck(rng, dim=1)
    p.head_weight.data[:] = 1.0
    p.head_bias.data[:] = 0.0
    per_token, mean = explanation_logits(Tensor([[1.0], [3.0]]), p)
    assert per_token.shape == (2, N_EXPLANATIONS)
    assert mean.data[4] == 2.0


def test_maneuver_zero_input_is_bias(rng):
    p = bottleneck(rng)
    p.final_bias.data[:] = rng.normal(size=N_MANEUVERS)
    np.testing.assert_array_equal(maneuver_logits(np.zeros(N_EXPLANATIONS), p).data, p.final_bias.data)


def test_selection_matrix_copies_explanations(rng):
    p = bottleneck(rng)
    chosen = [0, 3, 5, 8, 9, 12, 16]
    p.final_weight.data[:] = np.eye(N_EXPLANATIONS)[chosen]
    p.final_bias.data[:] = 0
    e = rng.normal(size=N_EXPLANATIONS)
    np.testing.assert_array_equal(maneuver_logits(e, p).data, e[chosen])


def test_contribution_decomposition(rng):
    p = bottleneck(rng)
    p.final_bias.data[:] = rng.normal(size=N_MANEUVERS)
    e = rng.normal(size=N_EXPLANATIONS)
    out = maneuver_logits(e, p).data
    for c in range(N_MANEUVERS):
        ref = sum(p.final_weight.data[c, j] * e[j] for j in range(N_EXPLANATIONS))
        assert abs(out[c] - p.final_bias.data[c] - ref) < 1e-12


def test_wrong_explanation_width(rng):
    with pytest.raises(ValueError):
        maneuver_logits(np.zeros(16), bottleneck(rng))


def test_l1_penalty(rng):
    p = bottleneck(rng)
    assert abs(p.l1_penalty().item() - 1e-3 * np.abs(p.final_weight.data).sum()) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 6))
def test_late_averaging_commutes_with_pooling(seed, k, d):
    r = np.random.default_rng(seed)
    p = BottleneckParams.init(r, d)
    p.head_bias.data[:] = r.normal(size=N_EXPLANATIONS)
    z = Tensor(r.normal(size=(2, k, d)))
    _, late = explanation_logits(z, p)
    early = pooled_explanation_logits(z, p)
    np.testing.assert_allclose(late.data, early.data[:, 0], atol=1e-9)


def clip_pair(rng, t=16, hw=24):
    frames = rng.uniform(size=(t, hw, hw, 3))
    return VideoClip("gaze", frames * 0.5), VideoClip("front", frames)


def test_forward_is_deterministic_and_well_formed(rng, small_model):
    g, f = clip_pair(rng)
    a, b = forward(g, f, small_model), forward(g, f, small_model)
    for field in ("expl_logits", "maneuver_logits", "maneuver_probs"):
        np.testing.assert_array_equal(getattr(a, field).data, getattr(b, field).data)
    assert a.per_token_expl.shape == (1, 3, N_EXPLANATIONS)
    np.testing.assert_allclose(a.maneuver_probs.data.sum(), 1.0, atol=1e-9)
    assert ((a.expl_probs.data > 0) & (a.expl_probs.data < 1)).all()
    np.testing.assert_allclose(a.expl_logits.data, a.per_token_expl.data.mean(axis=1), atol=0)


def test_forward_rejects_mismatched_views(rng, small_model):
    g, _ = clip_pair(rng)
    _, f = clip_pair(rng, t=8)
    with pytest.raises(ValueError):
        forward(g, f, small_model)


@pytest.mark.parametrize("ltm_on,lcbm_on", [(False, False), (True, False), (False, True), (True, True)])
def test_component_switches_run(rng, ltm_on, lcbm_on):
    cfg = ModelConfig(frames=16, height=24, width=24, dim=4, k=3, ltm_on=ltm_on, lcbm_on=lcbm_on)
    model = VCBM.init(cfg, 0)
    g, f = clip_pair(rng)
    pred = forward(g, f, model)
    assert pred.maneuver_probs.shape == (1, N_MANEUVERS)
    loss = tape.sum(pred.maneuver_logits)
    tape.backward(loss)
    assert model.bottleneck.head_weight.grad is not None
    assert (model.clusters.centers.grad is not None) == ltm_on


def test_no_lcbm_equals_lcbm_without_ltm_on_pooled_features(rng):
    # without merging, head-of-mean and mean-of-heads see the same tokens
    a = VCBM.init(ModelConfig(frames=16, height=24, width=24, dim=4, k=3, ltm_on=False, lcbm_on=True), 0)
    b = VCBM.init(ModelConfig(frames=16, height=24, width=24, dim=4, k=3, ltm_on=False, lcbm_on=False), 0)
    g, f = clip_pair(rng)
    np.testing.assert_allclose(forward(g, f, a).expl_logits.data, forward(g, f, b).expl_logits.data, atol=1e-12)


def test_state_dict_roundtrip(small_model):
    other = VCBM.init(small_model.config, seed=99)
    other.load_state_dict(small_model.state_dict())
    for k, v in small_model.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[k], v)
    bad = small_model.state_dict()
    bad.pop("ltm.centers")
    with pytest.raises(KeyError):
        other.load_state_dict(bad)


def test_init_rejects_non_compact_k():
    with pytest.raises(ValueError):
        VCBM.init(ModelConfig(frames=4, height=8, width=16, dim=2, k=2), 0)


def test_init_is_seeded():
    cfg = ModelConfig(frames=16, height=24, width=24, dim=4, k=3)
    a, b, c = VCBM.init(cfg, 1), VCBM.init(cfg, 1), VCBM.init(cfg, 2)
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    assert not np.array_equal(a.state_dict()["ltm.centers"], c.state_dict()["ltm.centers"])
