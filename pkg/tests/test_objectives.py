import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_direct, central_diff, contrastive_direct, max_rel_err
from robust_embed.encoder import CLS_ID, collate
from robust_embed.objectives import (
    Discriminator,
    RtdInstance,
    UnigramGenerator,
    batch_contrastive_loss,
    contrastive_loss,
    cosine_sim,
    n_to_mask,
    rtd_batch,
    rtd_bce,
    rtd_edit,
    rtd_loss,
    total_loss,
)
from robust_embed.perturbation import HyperParams

T = lambda *x: torch.tensor(x, dtype=torch.float64)  # noqa: E731


class TestContrastive:
    def test_unit_orthogonal_closed_form(self):
        loss = contrastive_loss(T(1.0, 0.0), [T(1.0, 0.0)], [T(0.0, 1.0)], tau=1.0)
        assert abs(float(loss) - math.log(1 + math.exp(-1))) <= 1e-9
        assert float(loss) == pytest.approx(0.31326, abs=1e-5)

    def test_no_negatives_is_zero(self):
        assert float(contrastive_loss(T(1.0, 2.0), [T(0.5, 0.1)], [], tau=0.05)) == pytest.approx(0.0, abs=1e-12)

    def test_random_batch_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        B, D, tau = 8, 6, 0.05
        z, zp, za = (torch.from_numpy(rng.normal(size=(B, D))) for _ in range(3))
        got = batch_contrastive_loss(z, [zp, za], z, zp, tau)
        ref = np.mean([
            contrastive_direct(z[i].tolist(), [zp[i].tolist(), za[i].tolist()],
                               [z[j].tolist() for j in range(B) if j != i] + [zp[j].tolist() for j in range(B) if j != i],
                               tau)
            for i in range(B)
        ])
        assert abs(float(got) - ref) <= 1e-10

    def test_single_anchor_matches_direct(self):
        rng = np.random.default_rng(1)
        z, pos, neg = rng.normal(size=4), rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
        got = contrastive_loss(torch.from_numpy(z), torch.from_numpy(pos), torch.from_numpy(neg), 0.3)
        assert abs(float(got) - contrastive_direct(z, pos, neg, 0.3)) <= 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        z, pos, neg = (torch.from_numpy(rng.normal(size=s)) for s in [(4,), (2, 4), (3, 4)])
        a = contrastive_loss(z, pos, neg, 0.1)
        b = contrastive_loss(c * z, c * pos, c * neg, 0.1)
        assert float(a) == pytest.approx(float(b), abs=1e-9)
        assert float(a) >= 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_extra_negative_never_decreases(self, seed):
        rng = np.random.default_rng(seed)
        z, pos, neg = (torch.from_numpy(rng.normal(size=s)) for s in [(4,), (2, 4), (3, 4)])
        extra = torch.from_numpy(rng.normal(size=(1, 4)))
        assert contrastive_loss(z, pos, torch.cat([neg, extra]), 0.1) >= contrastive_loss(z, pos, neg, 0.1) - 1e-12

    def test_monotone_in_positive_similarity(self):
        z = T(1.0, 0.0)
        neg = [T(0.0, 1.0)]
        losses = [float(contrastive_loss(z, [T(math.cos(a), math.sin(a))], neg, 0.5)) for a in np.linspace(0, 1.5, 8)]
        assert all(x < y for x, y in zip(losses, losses[1:]))

    def test_zero_vector_and_bad_tau(self):
        with pytest.raises(ValueError):
            contrastive_loss(T(0.0, 0.0), [T(1.0, 0.0)], [], 0.1)
        with pytest.raises(ValueError):
            contrastive_loss(T(1.0, 0.0), [T(1.0, 0.0)], [], 0.0)
        with pytest.raises(ValueError):
            contrastive_loss(T(1.0, 0.0), [], [T(1.0, 0.0)], 0.1)
        with pytest.raises(ValueError):
            cosine_sim(T(0.0, 0.0), T(1.0, 0.0))

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(4)
        z0 = rng.normal(size=5)
        pos, neg = torch.from_numpy(rng.normal(size=(2, 5))), torch.from_numpy(rng.normal(size=(3, 5)))
        z = torch.tensor(z0, requires_grad=True)
        (g,) = torch.autograd.grad(contrastive_loss(z, pos, neg, 0.2), [z])
        fd = central_diff(lambda v: float(contrastive_loss(torch.from_numpy(v), pos, neg, 0.2)), z0)
        assert max_rel_err(g.numpy(), fd) <= 1e-4


class TestRtd:
    def test_half_probability_closed_form(self):
        loss = rtd_bce(torch.full((4,), 0.5), [1, 0, 1, 1])
        assert abs(float(loss) - 4 * math.log(2)) <= 1e-9

    def test_perfect_discriminator_zero(self):
        assert float(rtd_bce(T(1.0, 0.0, 1.0), T(1.0, 0.0, 1.0))) == 0.0

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, size=12)
        y = rng.integers(0, 2, size=12)
        assert abs(float(rtd_bce(p, y)) - bce_direct(p, y)) <= 1e-10

    def test_out_of_range_probability(self):
        with pytest.raises(ValueError):
            rtd_bce(T(1.2, 0.5), T(1.0, 0.0))
        with pytest.raises(ValueError):
            rtd_bce(T(float("nan")), T(1.0))

    def test_n_to_mask_rounding(self):
        assert n_to_mask(0.15, 1) == 1
        assert n_to_mask(0.15, 10) == 2  # 1.5 rounds up
        assert n_to_mask(0.15, 20) == 3
        assert n_to_mask(0.25, 2) == 1  # 0.5 rounds up, not to even

    def test_edit_masks_expected_count(self, tiny_vocab):
        gen = UnigramGenerator(tiny_vocab.unigram_probs())
        seq = tiny_vocab.encode("good music and great acting the movie was good", 16)
        inst = rtd_edit(seq, 0.15, np.random.default_rng(0), gen)
        words = len(seq) - 1
        assert inst.labels.count(0) == n_to_mask(0.15, words)
        assert inst.edited_ids[0] == CLS_ID and inst.labels[0] == 1

    def test_edit_deterministic(self, tiny_vocab):
        gen = UnigramGenerator(tiny_vocab.unigram_probs())
        seq = tiny_vocab.encode("the movie was good", 8)
        a = rtd_edit(seq, 0.5, np.random.default_rng(3), gen)
        b = rtd_edit(seq, 0.5, np.random.default_rng(3), gen)
        assert a == b

    def test_labels_validated(self):
        with pytest.raises(ValueError):
            RtdInstance([2, 5], [2, 6], [1, 1])

    def test_generator_never_returns_original(self):
        gen = UnigramGenerator(np.array([0, 0, 0, 0.5, 0.5]))
        rng = np.random.default_rng(0)
        assert all(gen.sample(3, rng) == 4 for _ in range(50))
        with pytest.raises(ValueError):
            UnigramGenerator(np.array([0, 0, 0, 1.0])).sample(3, rng)

    def test_batch_weight_excludes_cls_and_padding(self, tiny_vocab):
        batch = collate([tiny_vocab.encode(t, 8) for t in ("the movie was good", "a great plot")])
        rb = rtd_batch(batch, 0.15, np.random.default_rng(0), UnigramGenerator(tiny_vocab.unigram_probs()))
        assert rb.weight[:, 0].sum() == 0
        assert rb.weight[1, 4] == 0
        assert rb.weight.sum() == 4 + 3

    def test_single_instance_loss(self):
        torch.manual_seed(0)
        disc = Discriminator(4).double()
        X = torch.randn(3, 4, dtype=torch.float64)
        h = torch.randn(4, dtype=torch.float64)
        inst = RtdInstance([2, 7, 8], [2, 9, 8], [1, 0, 1], X_adv=X)
        p = disc.probs(X, h).detach().numpy()
        assert abs(rtd_loss(inst, h, disc).item() - bce_direct(p[1:], [0, 1])) <= 1e-10


def _loss_inputs(tiny_vocab, tiny_encoder, seed=0):
    texts = ("the movie was good", "a great plot", "dull acting overall")
    batch = collate([tiny_vocab.encode(t, 8) for t in texts])
    X = tiny_encoder.embed(batch, 11).detach()
    X_pos = tiny_encoder.embed(batch, 12).detach()
    g = torch.Generator().manual_seed(seed)
    m = batch.mask.double()[..., None]
    delta = (torch.rand(X.shape, generator=g, dtype=torch.float64) - 0.5) * 0.02 * m
    eta = (torch.rand(X.shape, generator=g, dtype=torch.float64) - 0.5) * 0.02 * m
    rb = rtd_batch(batch, 0.3, np.random.default_rng(seed), UnigramGenerator(tiny_vocab.unigram_probs()))
    X_edit = tiny_encoder.embed(rb.edited, 11).detach()
    return batch, X, X_pos, delta, eta, X_edit, rb


class TestTotalLoss:
    # Frozen from the direct-formula evaluation in test_total_matches_direct_formula.
    GOLDEN_TOTAL = 0.823269581310869

    def _disc(self):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(5)
            return Discriminator(8).double()

    def test_total_matches_direct_formula(self, tiny_vocab, tiny_encoder):
        h = HyperParams()
        batch, X, X_pos, delta, eta, X_edit, rb = _loss_inputs(tiny_vocab, tiny_encoder)
        disc = self._disc()
        parts = total_loss(tiny_encoder, disc, batch.mask, X, X_pos, delta, eta, X_edit, rb, h)
        with torch.no_grad():
            z = tiny_encoder.encode_from_embeddings(X, batch.mask).numpy()
            zp = tiny_encoder.encode_from_embeddings(X_pos, batch.mask).numpy()
            za = tiny_encoder.encode_from_embeddings(X + delta, batch.mask).numpy()
            p = disc.probs(X_edit + eta, torch.from_numpy(z)).numpy()
        B = len(z)

        def neg(i):
            return [z[j] for j in range(B) if j != i] + [zp[j] for j in range(B) if j != i]

        con = np.mean([contrastive_direct(z[i], [zp[i], za[i]], neg(i), h.tau) for i in range(B)])
        reg = np.mean([contrastive_direct(za[i], [zp[i]], neg(i), h.tau) for i in range(B)])
        w = rb.weight.bool().numpy()
        rtd = bce_direct(p[w], rb.labels.numpy()[w])
        ref = con + h.lambda1 * reg + h.lambda2 * rtd
        assert abs(parts.con.item() - con) <= 1e-10
        assert abs(parts.reg.item() - reg) <= 1e-10
        assert abs(parts.rtd.item() - rtd) <= 1e-9
        assert abs(parts.total.item() - ref) <= 1e-9
        assert parts.total.item() == pytest.approx(self.GOLDEN_TOTAL, abs=1e-9)

    def test_baseline_drops_adversarial_terms(self, tiny_vocab, tiny_encoder):
        h = HyperParams(epsilon=0.0, lambda1=0.0, lambda2=0.0)
        batch, X, X_pos, delta, eta, X_edit, rb = _loss_inputs(tiny_vocab, tiny_encoder)
        parts = total_loss(tiny_encoder, self._disc(), batch.mask, X, X_pos, delta, eta, X_edit, rb, h)
        z = tiny_encoder.encode_from_embeddings(X, batch.mask)
        zp = tiny_encoder.encode_from_embeddings(X_pos, batch.mask)
        assert torch.equal(parts.total, batch_contrastive_loss(z, [zp], z, zp, h.tau))
        assert parts.reg.item() == 0 and parts.rtd.item() == 0

    def test_non_finite_raises(self, tiny_vocab, tiny_encoder):
        h = HyperParams()
        batch, X, X_pos, delta, eta, X_edit, rb = _loss_inputs(tiny_vocab, tiny_encoder)
        disc = self._disc()
        with torch.no_grad():
            disc.net[2].bias.fill_(float("inf"))
        with pytest.raises((FloatingPointError, ValueError)):
            total_loss(tiny_encoder, disc, batch.mask, X, X_pos, delta, eta, X_edit, rb, h)
