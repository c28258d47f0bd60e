import math

import numpy as np
import pytest
import torch

from segalign import datakit, preference
from segalign.errors import (
    InvalidRecordError,
    MissingDirectionError,
    TrainingFailureError,
)
from segalign.preference import (
    ImagePair,
    LossVariant,
    PreferenceTrainConfig,
    _nll,
    build_pair_tensors,
    preference_loss,
    score,
    score_segments,
    train_preference_model,
)
from segalign.segmentation import RawPrompt

LONG = "A red circle in the top left. A blue square in the center."
SHORT = "A red circle in the top left."


def make_pair(pref_model, rng):
    win = datakit.render_scene(datakit.random_scene(rng, 2), 24)
    lose = datakit.render_scene(datakit.random_scene(rng, 2), 24)
    return ImagePair(RawPrompt(LONG, short_text=SHORT), win, lose)


def test_nll_closed_forms():
    one = torch.tensor(1.0, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    # Equal scores force probability 1/2.
    assert float(_nll(one, one, tau=10.0)) == pytest.approx(math.log(2), rel=1e-12)
    # tau=1, delta=1: -ln sigmoid(1) = ln(1 + e^-1).
    assert float(_nll(one, zero, tau=1.0)) == pytest.approx(
        math.log(1 + math.exp(-1)), rel=1e-12
    )


def test_nll_strictly_decreasing_in_delta():
    deltas = torch.linspace(-2, 2, 41, dtype=torch.float64)
    vals = [_nll(d, torch.zeros((), dtype=torch.float64), tau=3.0) for d in deltas]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_antisymmetry_probabilities_sum_to_one():
    s1 = torch.tensor(0.37, dtype=torch.float64)
    s2 = torch.tensor(-0.12, dtype=torch.float64)
    p_fwd = math.exp(-float(_nll(s1, s2, tau=10.0)))
    p_rev = math.exp(-float(_nll(s2, s1, tau=10.0)))
    assert p_fwd + p_rev == pytest.approx(1.0, abs=1e-12)


def test_segment_avg_equals_mean_of_segment_scores(pref_model, rng):
    img = datakit.render_scene(datakit.random_scene(rng, 3), 24)
    p = RawPrompt(LONG)
    per_seg = score_segments(img, p, pref_model)
    assert len(per_seg) == 2
    assert score(img, p, pref_model, "segment_avg") == pytest.approx(
        float(np.mean(per_seg)), abs=1e-7
    )


def test_single_segment_prompt_single_equals_segment_avg(pref_model, rng):
    img = datakit.render_scene(datakit.random_scene(rng, 1), 24)
    p = RawPrompt(SHORT)
    per_seg = score_segments(img, p, pref_model)
    assert len(per_seg) == 1
    assert per_seg[0] == pytest.approx(score(img, p, pref_model, "single"), abs=1e-12)


def test_seg_loss_at_k1_equals_single_loss(pref_model, rng):
    # A one-sentence prompt within the cap: Eq at K=1 reduces exactly.
    win = datakit.render_scene(datakit.random_scene(rng, 1), 24)
    lose = datakit.render_scene(datakit.random_scene(rng, 1), 24)
    pair = ImagePair(RawPrompt(SHORT, short_text=SHORT), win, lose)
    a = preference_loss(pair, pref_model, LossVariant.SEG)
    b = preference_loss(pair, pref_model, LossVariant.SINGLE)
    assert float(a.detach()) == float(b.detach())


def test_seg_o_requires_direction_and_short_text(pref_model, rng):
    pair = make_pair(pref_model, rng)
    with pytest.raises(MissingDirectionError):
        preference_loss(pair, pref_model, LossVariant.SEG_O, V=None)
    no_short = ImagePair(RawPrompt(LONG), pair.image_win, pair.image_lose)
    V = torch.zeros(16, dtype=torch.float64)
    V[0] = 1.0
    with pytest.raises(InvalidRecordError):
        preference_loss(no_short, pref_model, LossVariant.SEG_O, V=V)
    with pytest.raises(InvalidRecordError):
        preference_loss(no_short, pref_model, LossVariant.SEG_A)


def test_identical_images_rejected(rng):
    img = datakit.render_scene(datakit.random_scene(rng, 2), 24)
    with pytest.raises(InvalidRecordError):
        ImagePair(RawPrompt(LONG), img, img.copy())


def test_seg_o_term_invariant_to_common_direction_shift():
    # The orthogonalized score is unchanged by adding any multiple of V
    # to the text embedding.
    gen = torch.Generator().manual_seed(0)
    V = torch.randn(16, dtype=torch.float64, generator=gen)
    V = V / V.norm()
    c_seg = torch.randn(16, dtype=torch.float64, generator=gen)
    c_win = torch.randn(16, dtype=torch.float64, generator=gen)
    c_lose = torch.randn(16, dtype=torch.float64, generator=gen)

    def seg_term(c):
        c_perp = c - (c @ V) * V
        return _nll(c_win @ c_perp, c_lose @ c_perp, tau=10.0)

    base = seg_term(c_seg)
    for a in (-3.7, 0.25, 11.0):
        assert float(seg_term(c_seg + a * V)) == pytest.approx(float(base), abs=1e-10)


def test_gradient_matches_finite_differences(tiny_pref_model, rng):
    m = tiny_pref_model
    win = datakit.render_scene(datakit.random_scene(rng, 2), m.image.image_size)
    lose = datakit.render_scene(datakit.random_scene(rng, 2), m.image.image_size)
    pair = ImagePair(RawPrompt(SHORT, short_text=SHORT), win, lose)

    params = [m.text.projection.weight, m.image.head[-1].weight]
    loss = preference_loss(pair, m, LossVariant.SEG)
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    eps = 1e-6
    checked = 0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for k in range(0, flat.numel(), max(1, flat.numel() // 5)):
            orig = float(flat[k])
            with torch.no_grad():
                flat[k] = orig + eps
                up = float(preference_loss(pair, m, LossVariant.SEG))
                flat[k] = orig - eps
                down = float(preference_loss(pair, m, LossVariant.SEG))
                flat[k] = orig
            fd = (up - down) / (2 * eps)
            an = float(g.view(-1)[k])
            assert an == pytest.approx(fd, rel=1e-3, abs=1e-9)
            checked += 1
    assert checked >= 10


@pytest.fixture(scope="module")
def small_pairs():
    train, _, _ = datakit.generate_dataset(60, seed=11, min_objects=2)
    pairs, _ = datakit.derive_preference_pairs(train, seed=3, corruption="attribute-swap")
    return pairs


def test_zero_steps_returns_initialization(small_pairs, vocab):
    cfg = PreferenceTrainConfig(seed=5, steps=0)
    result = train_preference_model(small_pairs, cfg, vocab)
    fresh = preference.new_preference_model(cfg, vocab)
    for a, b in zip(result.model.text.parameters(), fresh.text.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(result.model.image.parameters(), fresh.image.parameters()):
        assert torch.equal(a, b)


def test_training_deterministic_given_seed(small_pairs, vocab):
    cfg = PreferenceTrainConfig(seed=5, steps=20, batch_size=16, holdout_fraction=0.0)
    r1 = train_preference_model(small_pairs, cfg, vocab)
    r2 = train_preference_model(small_pairs, cfg, vocab)
    for a, b in zip(r1.model.text.parameters(), r2.model.text.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(r1.model.image.parameters(), r2.model.image.parameters()):
        assert torch.equal(a, b)
    assert r1.losses == r2.losses


def test_empty_dataset_rejected(vocab):
    with pytest.raises(ValueError):
        train_preference_model([], PreferenceTrainConfig(), vocab)


def test_batch_loss_variants_finite(small_pairs, vocab, pref_model):
    data = build_pair_tensors(small_pairs[:16], vocab, pref_model.policy, 24)
    idx = torch.arange(8)
    V = torch.zeros(16, dtype=torch.float64)
    V[0] = 1.0
    for variant in LossVariant:
        loss, mean = preference.batch_loss(pref_model, data, idx, variant, V)
        assert torch.isfinite(loss)
        assert mean.shape == (16,)
