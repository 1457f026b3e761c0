import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrmcap import autodiff as ad
from ctrmcap.decoder import PAD
from ctrmcap.losses import (CausalAnnotation, InvalidInputError, LossWeights, batch_caption_cross_entropy,
                            batch_causal_alignment_loss, batch_temporal_consistency_loss,
                            caption_cross_entropy, causal_alignment_loss, contrastive_loss, finetune_loss,
                            temporal_consistency_loss)


def test_caption_ce_matches_manual_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
    targets = [1, 2]
    lsm = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expected = -(lsm[0, 1] + lsm[1, 2]) / 2
    assert caption_cross_entropy(ad.constant(logits), targets).item() == pytest.approx(expected, abs=1e-15)


def test_caption_ce_skips_pad_positions():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    full = caption_cross_entropy(ad.constant(logits[:2]), [1, 3]).item()
    padded = caption_cross_entropy(ad.constant(logits), [1, 3, PAD]).item()
    assert padded == full
    with pytest.raises(ValueError):
        caption_cross_entropy(ad.constant(logits), [PAD, PAD, PAD])
    with pytest.raises(ad.ShapeError):
        caption_cross_entropy(ad.constant(logits), [1, 2])


def test_contrastive_single_pair_is_exactly_zero():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v, t = ad.constant(rng.normal(size=(1, 6))), ad.constant(rng.normal(size=(1, 6)))
        assert contrastive_loss(v, t, LossWeights()).item() == 0.0


def test_contrastive_matches_manual_value():
    rng = np.random.default_rng(2)
    v, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = vn @ tn.T / 0.5
    expected = -np.mean([s[i, i] - np.log(np.exp(s[i]).sum()) for i in range(3)])
    got = contrastive_loss(ad.constant(v), ad.constant(t), LossWeights(tau=0.5)).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_contrastive_rejects_zero_rows_and_shape_mismatch():
    with pytest.raises(InvalidInputError):
        contrastive_loss(ad.constant(np.zeros((2, 3))), ad.constant(np.ones((2, 3))), LossWeights())
    with pytest.raises(ad.ShapeError):
        contrastive_loss(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 3))), LossWeights())


def test_finetune_with_zero_lambdas_is_bit_equal_to_caption_loss():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cap = caption_cross_entropy(ad.constant(rng.normal(size=(4, 5))), list(rng.integers(1, 5, size=4)))
        total = finetune_loss(cap, ad.constant(rng.uniform(0, 3)), ad.constant(rng.uniform(0, 3)),
                              LossWeights(lambda1=0.0, lambda2=0.0))
        assert total.item() == cap.item()


def test_causal_kl_zero_when_attention_equals_annotation():
    annotation = CausalAnnotation.from_edges(4, [(0, 2), (1, 2), (0, 3)])
    target = annotation.cause_distribution()
    rows = np.eye(4)
    attention = np.where(annotation.annotated_rows[:, None], target, rows)
    att = ad.constant(np.stack([attention, attention]))
    assert abs(causal_alignment_loss(att, annotation).item()) <= 1e-9


def test_causal_kl_manual_value_and_skipped_rows():
    annotation = CausalAnnotation.from_edges(3, [(0, 2), (1, 2)])
    att = np.array([[[1.0, 0, 0], [0.5, 0.5, 0], [0.2, 0.3, 0.5]]])
    expected = 0.5 * np.log(0.5 / 0.2) + 0.5 * np.log(0.5 / 0.3)
    assert causal_alignment_loss(ad.constant(att), annotation).item() == pytest.approx(expected, abs=1e-14)


def test_causal_kl_no_annotation_is_zero_and_errors():
    annotation = CausalAnnotation(np.zeros((2, 2)))
    att = ad.constant(np.array([[[1.0, 0.0], [0.5, 0.5]]]))
    assert causal_alignment_loss(att, annotation).item() == 0.0
    with pytest.raises(ad.ShapeError):
        causal_alignment_loss(ad.constant(np.ones((1, 3, 3)) / 3), annotation)
    zero_mass = CausalAnnotation.from_edges(2, [(1, 0)])
    with pytest.raises(InvalidInputError):
        causal_alignment_loss(ad.constant(np.array([[[1.0, 0.0], [0.5, 0.5]]])), zero_mass)


def test_annotation_validation():
    with pytest.raises(InvalidInputError):
        CausalAnnotation(np.ones((2, 3)))
    with pytest.raises(InvalidInputError):
        CausalAnnotation(np.eye(2))
    with pytest.raises(InvalidInputError):
        CausalAnnotation(np.array([[0, 0.5], [0, 0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.floats(-10, 10))
def test_temporal_loss_zero_for_constant_rows(t, d, value):
    h = ad.constant(np.full((t, d), value))
    assert temporal_consistency_loss(h).item() == 0.0


def test_temporal_loss_manual_value():
    h = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 3.0]])
    expected = ((1 + 1) + (0 + 4)) / (2 * 2)
    assert temporal_consistency_loss(ad.constant(h)).item() == pytest.approx(expected)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(InvalidInputError):
        finetune_loss(ad.constant(1.0), ad.constant(np.nan), ad.constant(0.0), LossWeights())


def test_batched_losses_average_per_sample_losses():
    rng = np.random.default_rng(4)
    n_heads, t_max, n_max, v = 2, 4, 5, 6
    lengths = [4, 2, 3]
    caps = [list(rng.integers(1, v, size=n)) for n in (5, 3, 4)]
    logits = rng.normal(size=(3 * n_max, v))
    att = np.zeros((3 * n_heads, t_max, t_max))
    for b, t in enumerate(lengths):
        for h in range(n_heads):
            att[b * n_heads + h, :, :t] = rng.dirichlet(np.ones(t), size=t_max)
    h_t = rng.normal(size=(3 * t_max, 5))
    anns = [CausalAnnotation.from_edges(4, [(0, 2), (1, 3)]), CausalAnnotation.from_edges(2, [(0, 1)]),
            CausalAnnotation(np.zeros((3, 3)))]
    ce = np.mean([caption_cross_entropy(ad.constant(logits[b * n_max:b * n_max + len(c)]), c).item()
                  for b, c in enumerate(caps)])
    kl = np.mean([causal_alignment_loss(ad.constant(att[b * 2:b * 2 + 2, :t, :t]), anns[b]).item()
                  for b, t in enumerate(lengths)])
    tl = np.mean([temporal_consistency_loss(ad.constant(h_t[b * t_max:b * t_max + t])).item()
                  for b, t in enumerate(lengths)])
    assert batch_caption_cross_entropy(ad.constant(logits), caps).item() == pytest.approx(ce, abs=1e-13)
    assert batch_causal_alignment_loss(ad.constant(att), anns, n_heads).item() == pytest.approx(kl, abs=1e-13)
    assert batch_temporal_consistency_loss(ad.constant(h_t), lengths).item() == pytest.approx(tl, abs=1e-13)
