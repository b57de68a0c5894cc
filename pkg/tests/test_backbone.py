import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentbank import backbone as B
from latentbank import tensor as T
from latentbank.tensor import Tape, Tensor


def test_init_is_deterministic_and_seeded(tiny_config):
    a, b = B.init_frozen(tiny_config), B.init_frozen(tiny_config)
    assert a.weight_hash() == b.weight_hash()
    other = B.init_frozen(B.BackboneConfig(**{**tiny_config.to_dict(), "seed": 4}))
    assert other.weight_hash() != a.weight_hash()


def test_weights_are_read_only(tiny_bb):
    with pytest.raises(ValueError):
        tiny_bb.weights["embed"][0, 0] = 1.0
    with pytest.raises(TypeError):
        tiny_bb.weights["embed"] = None


def test_config_validation():
    with pytest.raises(ValueError):
        B.BackboneConfig(d=10, n_heads=3)
    with pytest.raises(ValueError):
        B.BackboneConfig(vocab_size=3)


def test_sinusoidal_first_rows():
    pe = B.sinusoidal_positions(2, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
    np.testing.assert_allclose(pe[1], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)])


def test_teacher_forcing_layout():
    dec_in, targets, w = B.teacher_forcing_batch([[5, B.END], [7]])
    assert dec_in.tolist() == [[B.START, 5], [B.START, 7]]
    assert targets.tolist() == [[5, B.END], [7, B.PAD]]
    assert w.tolist() == [[0.5, 0.5], [1.0, 0.0]]


@pytest.mark.parametrize("ids", [[], [99], [-1], list(range(3)) * 10])
def test_bad_token_sequences(tiny_bb, ids):
    with pytest.raises(B.BackboneInputError):
        B.encode(tiny_bb, ids)


def test_padding_does_not_leak(tiny_bb):
    ids = np.array([[3, 4, 5, 0, 0], [3, 4, 5, 9, 9]])
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 0, 0]], dtype=bool)
    z = B.encode_batch(tiny_bb, ids, mask).data
    np.testing.assert_allclose(z[0], z[1], atol=1e-6)
    assert not z[0, 3:].any()
    alone = B.encode(tiny_bb, [3, 4, 5]).z.data
    np.testing.assert_allclose(z[0, :3], alone, atol=1e-6)


def test_zero_extension_is_exactly_neutral(tiny_bb, rng):
    enc = B.encode_batch(tiny_bb, rng.integers(3, 16, size=(4, 5)))
    dec = rng.integers(3, 16, size=(4, 3))
    plain = B.decode_batch(tiny_bb, enc, None, None, None, dec).data
    zeros = Tensor(np.zeros((4, 7, 8), dtype=np.float32))
    ext = B.decode_batch(tiny_bb, enc, None, zeros, None, dec).data
    assert np.abs(plain - ext).max() <= 1e-6


def test_decoder_is_causal(tiny_bb):
    enc = B.encode_batch(tiny_bb, np.array([[4, 5, 6]]))
    a = B.decode_batch(tiny_bb, enc, None, None, None, np.array([[0, 7, 8]])).data
    b = B.decode_batch(tiny_bb, enc, None, None, None, np.array([[0, 7, 12]])).data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])
    assert not np.array_equal(a[0, 2], b[0, 2])


def test_greedy_is_deterministic_and_bounded(tiny_bb):
    z = B.encode(tiny_bb, [4, 5, 6]).z
    out = B.greedy_decode(tiny_bb, z, max_steps=5)
    assert out == B.greedy_decode(tiny_bb, z, max_steps=5)
    assert len(out) <= 5 and B.END not in out


def test_min_len_forbids_early_end(tiny_bb):
    enc = B.encode_batch(tiny_bb, np.array([[4, 5, 6], [7, 8, 9]]))
    out = B.greedy_decode_batch(tiny_bb, enc, None, None, None, max_steps=3, min_len=2)
    assert all(len(o) >= 2 for o in out)
    with pytest.raises(ValueError):
        B.greedy_decode_batch(tiny_bb, enc, None, None, None, max_steps=2, min_len=3)
    with pytest.raises(ValueError):
        B.greedy_decode_batch(tiny_bb, enc, None, None, None, max_steps=0)


def test_empty_gold_rejected(tiny_bb):
    with pytest.raises(ValueError):
        B.teacher_forced_loss(tiny_bb, B.encode(tiny_bb, [4]).z, [])


def test_loss_gradient_wrt_encoder_rows(tiny_bb, rng):
    bb = tiny_bb.astype(np.float64)
    pos = rng.normal(size=(4, 8))
    with T.precision(np.float64):
        err = T.grad_check(lambda p: B.teacher_forced_loss(bb, p, [5, 6, B.END], n_extra=1), [pos], h=1e-6)
    assert err <= 1e-4


def test_overfit_copy_target(tiny_bb):
    # a free encoder block trained by gradient descent must make the frozen
    # decoder reproduce the target
    target = [9, 11, 4]
    p = np.random.default_rng(7).normal(size=(3, 8)).astype(np.float32)
    losses = []
    for _ in range(400):
        x = Tensor(p, trainable=True)
        with Tape() as tape:
            loss = B.teacher_forced_loss(tiny_bb, x, target + [B.END])
        (g,) = tape.gradient(loss, [x])
        p = p - 3.0 * g
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
    assert B.greedy_decode(tiny_bb, Tensor(p), max_steps=6) == target


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(3, 15), min_size=1, max_size=8))
def test_encoder_rows_unit_rms(ids):
    bb = B.init_frozen(B.BackboneConfig(vocab_size=16, d=8, n_layers_enc=1, n_layers_dec=1, max_len=16, seed=3))
    z = B.encode(bb, ids).z.data
    np.testing.assert_allclose(np.sqrt((z * z).mean(axis=-1)), 1.0, atol=1e-3)
