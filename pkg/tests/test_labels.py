"""Label codec: forward oracles, the label loss, and its invariances."""

import numpy as np
import pytest
import torch

from aulatent.editing import AUConditions, ShapeMismatchError
from aulatent.labels import (BroadcastCodec, LabelCodec, LevelConditions,
                             decode_labels, encode_labels, label_loss,
                             label_loss_terms)

from conftest import fd_param_grad_check

N, M = 3, 2


def make_codec(seed=0, n=N, m=M, randomize=False):
    torch.manual_seed(seed)
    codec = LabelCodec(n, m, hidden=24).double()
    if randomize:  # undo the zero-init refinement for oracle coverage
        torch.nn.init.normal_(codec.enc[-1].weight, std=0.2)
        torch.nn.init.normal_(codec.enc[-1].bias, std=0.1)
    return codec


def random_cond(rng, n=N):
    intens = torch.as_tensor(rng.integers(0, 6, size=n).astype(float))
    return AUConditions((intens != 0).double(), intens)


def silu(x):
    return x / (1.0 + np.exp(-x))


def oracle_encode(codec, gates, intens):
    x = np.concatenate([gates, intens])
    w1, b1 = codec.enc[0].weight.detach().numpy(), codec.enc[0].bias.detach().numpy()
    w2, b2 = codec.enc[2].weight.detach().numpy(), codec.enc[2].bias.detach().numpy()
    out = w2 @ silu(w1 @ x + b1) + b2
    out = out.reshape(codec.levels, 2 * codec.n_attrs)
    raw_g, da = out[:, :codec.n_attrs], out[:, codec.n_attrs:]
    logits = 4.0 * (gates[None, :] - 0.5) + raw_g
    return 1.0 / (1.0 + np.exp(-logits)), intens[None, :] + da


def oracle_decode(codec, level_gates, level_intens):
    x = np.concatenate([level_gates, level_intens], axis=1).reshape(-1)
    w1, b1 = codec.dec[0].weight.detach().numpy(), codec.dec[0].bias.detach().numpy()
    w2, b2 = codec.dec[2].weight.detach().numpy(), codec.dec[2].bias.detach().numpy()
    out = w2 @ silu(w1 @ x + b1) + b2
    return out[:codec.n_attrs], out[codec.n_attrs:]


class TestEncodeLabels:
    def test_deterministic(self, rng):
        codec = make_codec()
        cond = random_cond(rng)
        a = encode_labels(codec, cond)
        b = encode_labels(codec, cond)
        assert torch.equal(a.gates, b.gates) and torch.equal(a.intensities, b.intensities)

    def test_distinct_conditions_differ(self, rng):
        codec = make_codec(seed=2)
        a = encode_labels(codec, AUConditions(torch.tensor([1.0, 0.0, 0.0]).double(),
                                              torch.tensor([3.0, 0.0, 0.0]).double()))
        b = encode_labels(codec, AUConditions(torch.tensor([0.0, 1.0, 0.0]).double(),
                                              torch.tensor([0.0, 2.0, 0.0]).double()))
        assert not torch.allclose(a.intensities, b.intensities)

    def test_forward_oracle(self, rng):
        codec = make_codec(seed=3, randomize=True)
        for _ in range(5):
            cond = random_cond(rng)
            lc = encode_labels(codec, cond)
            g, a = oracle_encode(codec, cond.existence.numpy(), cond.intensity.numpy())
            np.testing.assert_allclose(lc.gates.detach().numpy(), g, atol=1e-12)
            np.testing.assert_allclose(lc.intensities.detach().numpy(), a, atol=1e-12)

    def test_gates_squashed(self, rng):
        codec = make_codec(seed=4)
        lc = encode_labels(codec, random_cond(rng))
        assert torch.all(lc.gates >= 0) and torch.all(lc.gates <= 1)

    def test_shape_mismatch(self, rng):
        codec = make_codec()
        bad = AUConditions(torch.rand(N + 1).double(), torch.rand(N + 1).double())
        with pytest.raises(ShapeMismatchError):
            encode_labels(codec, bad)


class TestDecodeLabels:
    def test_deterministic(self, rng):
        codec = make_codec()
        lc = LevelConditions(torch.rand(M, N).double(), torch.rand(M, N).double())
        a = decode_labels(codec, lc)
        b = decode_labels(codec, lc)
        assert torch.equal(a.gates, b.gates) and torch.equal(a.intensities, b.intensities)

    def test_zero_initialized_final_layer(self, rng):
        codec = make_codec()
        torch.nn.init.zeros_(codec.dec[-1].weight)
        torch.nn.init.zeros_(codec.dec[-1].bias)
        lc = LevelConditions(torch.rand(M, N).double(), torch.rand(M, N).double())
        out = decode_labels(codec, lc)
        assert torch.all(out.gates == 0.0) and torch.all(out.intensities == 0.0)

    def test_forward_oracle(self, rng):
        codec = make_codec(seed=5)
        for _ in range(5):
            g = rng.uniform(size=(M, N))
            a = rng.normal(size=(M, N))
            out = decode_labels(codec, LevelConditions(torch.as_tensor(g), torch.as_tensor(a)))
            og, oa = oracle_decode(codec, g, a)
            np.testing.assert_allclose(out.gates.detach().numpy(), og, atol=1e-12)
            np.testing.assert_allclose(out.intensities.detach().numpy(), oa, atol=1e-12)

    def test_shape_mismatch(self):
        codec = make_codec()
        with pytest.raises(ShapeMismatchError):
            decode_labels(codec, LevelConditions(torch.rand(M + 1, N).double(),
                                                 torch.rand(M + 1, N).double()))


class TestLabelLoss:
    def test_zero_when_fully_consistent(self, rng):
        # feed the encoder's own output as the estimate and patch the decoder
        # to reproduce the source labels: both terms vanish
        codec = make_codec(seed=6)
        cond = random_cond(rng)
        est = encode_labels(codec, cond)
        est = LevelConditions(est.gates.detach(), est.intensities.detach())
        decoded_term, level_term = label_loss_terms(codec, est, cond)
        assert float(level_term.detach()) == 0.0
        assert float(decoded_term.detach()) > 0.0  # decoder is random, not consistent

    def test_quadratic_perturbation_of_level_term(self, rng):
        codec = make_codec(seed=7)
        cond = random_cond(rng)
        enc = encode_labels(codec, cond)
        base = LevelConditions(enc.gates.detach().clone(), enc.intensities.detach().clone())
        eps = 0.25
        perturbed_int = base.intensities.clone()
        perturbed_int[1, 2] += eps
        perturbed = LevelConditions(base.gates, perturbed_int)
        _, level_before = label_loss_terms(codec, base, cond)
        _, level_after = label_loss_terms(codec, perturbed, cond)
        level_before, level_after = level_before.detach(), level_after.detach()
        expected_delta = eps ** 2 / (N * M)
        assert float(level_before) == 0.0
        assert float(level_after) == pytest.approx(expected_delta, rel=1e-9)

    def test_double_loop_oracle(self, rng):
        codec = make_codec(seed=8)
        cond = random_cond(rng)
        est = LevelConditions(torch.as_tensor(rng.uniform(size=(M, N))),
                              torch.as_tensor(rng.normal(size=(M, N))))
        got = float(label_loss(codec, est, cond).detach())

        enc = encode_labels(codec, cond)
        dec = decode_labels(codec, est)
        total = 0.0
        for xi_hat, xi, lvl_hat, lvl in (
            (dec.gates, cond.existence, est.gates, enc.gates),
            (dec.intensities, cond.intensity, est.intensities, enc.intensities),
        ):
            for i in range(N):
                total += float(xi_hat[i] - xi[i]) ** 2 / N
                for j in range(M):
                    total += float(lvl_hat[j, i] - lvl[j, i]) ** 2 / (N * M)
        assert got == pytest.approx(total, rel=1e-10)

    def test_nonnegative(self, rng):
        codec = make_codec(seed=9)
        for _ in range(10):
            est = LevelConditions(torch.as_tensor(rng.uniform(size=(M, N))),
                                  torch.as_tensor(rng.normal(size=(M, N)) * 3))
            assert float(label_loss(codec, est, random_cond(rng)).detach()) >= 0.0

    def test_permutation_invariance(self, rng):
        # permuting attribute indices everywhere, including the codec's weight
        # slices, leaves the loss unchanged
        codec = make_codec(seed=10)
        cond = random_cond(rng)
        est = LevelConditions(torch.as_tensor(rng.uniform(size=(M, N))),
                              torch.as_tensor(rng.normal(size=(M, N))))
        base = float(label_loss(codec, est, cond).detach())

        perm = torch.as_tensor(rng.permutation(N))
        permuted = make_codec(seed=10)
        in_perm = torch.cat([perm, perm + N])
        with torch.no_grad():
            permuted.enc[0].weight[:] = codec.enc[0].weight[:, in_perm]
            out_w = codec.enc[2].weight.reshape(M, 2 * N, -1)
            out_b = codec.enc[2].bias.reshape(M, 2 * N)
            permuted.enc[2].weight[:] = out_w[:, in_perm, :].reshape(M * 2 * N, -1)
            permuted.enc[2].bias[:] = out_b[:, in_perm].reshape(-1)
            dec_in = codec.dec[0].weight.reshape(-1, M, 2 * N)
            permuted.dec[0].weight[:] = dec_in[:, :, in_perm].reshape(-1, M * 2 * N)
            permuted.dec[2].weight[:] = codec.dec[2].weight[in_perm, :]
            permuted.dec[2].bias[:] = codec.dec[2].bias[in_perm]

        cond_p = AUConditions(cond.existence[perm], cond.intensity[perm])
        est_p = LevelConditions(est.gates[:, perm], est.intensities[:, perm])
        assert float(label_loss(permuted, est_p, cond_p).detach()) == pytest.approx(base, rel=1e-10)

    def test_gradients_match_finite_differences(self, rng):
        codec = make_codec(seed=11)
        cond = random_cond(rng)
        est_g = torch.as_tensor(rng.uniform(size=(M, N)))
        est_a = torch.as_tensor(rng.normal(size=(M, N)))

        def loss_fn():
            return label_loss(codec, LevelConditions(est_g, est_a), cond)


        worst = fd_param_grad_check(loss_fn, [codec], rng, n_probes=20)
        assert worst <= 1e-4


class TestBroadcastCodec:
    def test_roundtrip_and_shapes(self, rng):
        codec = BroadcastCodec(N, M)
        cond = random_cond(rng)
        lc = encode_labels(codec, cond)
        assert lc.gates.shape == (M, N)
        assert torch.equal(lc.gates[0], cond.existence)
        assert torch.equal(lc.intensities[1], cond.intensity)
        dec = decode_labels(codec, lc)
        assert torch.allclose(dec.intensities, cond.intensity)
        assert float(label_loss(codec, lc, cond).detach()) == pytest.approx(0.0, abs=1e-12)
