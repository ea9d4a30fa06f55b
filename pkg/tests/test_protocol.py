import json

import numpy as np
import pytest

from vflsim import crypto, model, protocol
from vflsim.crypto import CodecOverflowError, FixedPointCodec
from vflsim.data import SplitSpec, synth_continuous
from vflsim.model import ApproxScheme
from vflsim.protocol import DpConfig, Party, ProtocolContext, ProtocolError, Transcript


@pytest.fixture(scope="module")
def ctx():
    return ProtocolContext.create(512, seed=0)


@pytest.fixture(scope="module")
def small():
    ds = synth_continuous(16, 6, SplitSpec((4, 2)), seed=0)
    return ds.features(0), ds.features(1), ds.y


def _parties(XA, XB, y, theta):
    return Party("A", XA, theta[: XA.shape[1]].copy(), y), Party("B", XB, theta[XA.shape[1]:].copy())


def test_zero_parameter_single_sample(ctx, small):
    XA, XB, y = small
    i = int(np.flatnonzero(y == 1)[0])
    A, B = _parties(XA, XB, y, np.zeros(6))
    grad, _ = protocol.run_protocol1_step(ctx, A, B, [i])
    np.testing.assert_allclose(grad, -0.5 * XA[i], atol=2.0 ** -20)


@pytest.mark.parametrize("step", [protocol.run_protocol1_step, protocol.run_protocol1_step_B])
def test_step_matches_plaintext(ctx, small, step):
    XA, XB, y = small
    theta = np.random.default_rng(1).uniform(-1, 1, 6)
    A, B = _parties(XA, XB, y, theta)
    batch = np.arange(4, 12)
    grad, fields = step(ctx, A, B, batch)
    full = model.minibatch_gradient(ApproxScheme.TAYLOR1, theta, np.hstack([XA, XB]), y, batch)
    expect = full[:4] if step is protocol.run_protocol1_step else full[4:]
    assert np.max(np.abs(grad - expect)) <= 2.0 ** (-ctx.codec.frac_bits + 4)
    # The masked decryption plus the mask is exactly the unmasked aggregate.
    owner = "B" if step is protocol.run_protocol1_step else "A"
    recv = "A" if owner == "B" else "B"
    n = (ctx.keys_B if owner == "B" else ctx.keys_A).public.n
    dec = fields[f"msg:{owner}>{recv}:decrypted"]
    assert [(d + r) % n for d, r in zip(dec, fields[f"{recv}:mask"])] == fields[f"{recv}:H"]


def test_homomorphic_chain_exact(ctx, small):
    XA, XB, y = small
    theta = np.random.default_rng(2).uniform(-1, 1, 6)
    A, B = _parties(XA, XB, y, theta)
    batch = np.arange(8)
    _, fields = protocol.run_protocol1_step(ctx, A, B, batch)
    codec, n = ctx.codec, ctx.keys_B.public.n
    gB = XB[batch] @ B.theta
    exact = protocol.plain_dot(codec, gB, XA[batch])
    assert [h % n for h in fields["A:H"]] == [e % n for e in exact]


def test_mask_cancels(small):
    XA, XB, y = small
    theta = np.random.default_rng(3).uniform(-1, 1, 6)
    batch = np.arange(8)
    grads = []
    for seed in (0, 1):
        c = ProtocolContext.create(512, seed=0)
        c.rng.seed(f"other-{seed}")
        A, B = _parties(XA, XB, y, theta)
        grads.append(protocol.run_protocol1_step(c, A, B, batch)[0])
    np.testing.assert_array_equal(grads[0], grads[1])


def test_overflow_detected(small):
    XA, XB, y = small
    c = ProtocolContext.create(512, 0, FixedPointCodec(64, 28))
    A, B = _parties(XA, XB, y, 50 * np.ones(6))
    with pytest.raises(CodecOverflowError):
        protocol.run_protocol1_step(c, A, B, np.arange(16))


def test_key_mismatch_surfaces():
    c = ProtocolContext.create(512, 0)
    wrong = ProtocolContext.create(512, 1)
    with pytest.raises(crypto.KeyMismatchError):
        protocol.masked_decrypt(wrong.keys_B, [crypto.encrypt(c.keys_B.public, 1, c.rng)])


def test_context_rejects_small_kappa():
    with pytest.raises(ProtocolError):
        ProtocolContext.create(64, 0)


def test_channel_order():
    ch = protocol.Channel("A", "B")
    ch.send("x", 1)
    with pytest.raises(ProtocolError, match="expected 'y'"):
        ch.recv("y")
    with pytest.raises(ProtocolError, match="empty"):
        ch.recv("x")


def test_dp_config_validation():
    with pytest.raises(ProtocolError):
        DpConfig(sigma_A=-1.0)


def _run(small, ctx, **kw):
    XA, XB, y = small
    sch = model.make_schedule(16, 4, 2, 0)
    theta0 = np.random.default_rng(4).uniform(-0.5, 0.5, 6)
    return protocol.train_encrypted(XA, XB, y, sch, 0.5, theta0, ctx=ctx, **kw), sch, theta0


def test_encrypted_trajectory_matches_plaintext(small, ctx):
    (traj, tr), sch, theta0 = _run(small, ctx)
    XA, XB, y = small
    ref = model.train_plaintext(ApproxScheme.TAYLOR1, np.hstack([XA, XB]), y, sch, 0.5, theta0)
    dev = np.max(np.abs(traj.thetas - ref.thetas), axis=1)
    assert np.all(dev <= 2.0 ** (-ctx.codec.frac_bits + 6) * np.arange(sch.T + 1) + 1e-15)
    assert len(tr) == sch.T


def test_zero_noise_dp_equals_plain_run(small):
    (a, _), _, _ = _run(small, ProtocolContext.create(512, 5))
    (b, tr), _, _ = _run(small, ProtocolContext.create(512, 5), dp=DpConfig(0.0, 0.0, True))
    np.testing.assert_array_equal(a.thetas, b.thetas)
    assert "A:sec" in tr.record(1)


def test_dp_noise_reconstruction(small):
    XA, XB, y = small
    sch = model.make_schedule(16, 4, 3, 0)
    dp = DpConfig(0.7, 0.4, True)
    traj, tr = protocol.simulate_protocol(XA, XB, y, sch, 0.3, np.zeros(6), dp=dp, noise_seed=9)
    clean, _ = protocol.simulate_protocol(XA, XB, y, sch, 0.3, np.zeros(6))
    e = protocol.noise_error(tr, XA, XB)
    X = np.hstack([XA, XB])
    theta = np.zeros(6)
    for t in range(1, sch.T + 1):
        g = model.minibatch_gradient(ApproxScheme.TAYLOR1, theta, X, y, sch.batches[t - 1])
        theta = theta - 0.3 * (g + e[t - 1])
        np.testing.assert_allclose(traj.thetas[t], theta, atol=1e-13)
    for t in range(1, sch.T + 1):
        rec = tr.record(t)
        assert np.all(rec["B:sec"] != rec["side:gB"])
        np.testing.assert_allclose(rec["B:sec"], rec["side:gB"] + rec["side:ZB"])
    assert not np.allclose(traj.thetas, clean.thetas)


def test_other_schemes_need_plain_backend(small, ctx):
    with pytest.raises(ProtocolError):
        _run(small, ctx, scheme=ApproxScheme.MINIMAX3)
    (traj, _), sch, theta0 = _run(small, None, scheme=ApproxScheme.MINIMAX3, backend="plain")
    XA, XB, y = small
    ref = model.train_plaintext(ApproxScheme.MINIMAX3, np.hstack([XA, XB]), y, sch, 0.5, theta0)
    np.testing.assert_allclose(traj.thetas, ref.thetas, atol=1e-14)


def test_transcript_round_trip(small, ctx):
    (_, tr), _, _ = _run(small, ctx)
    raw = tr.to_bytes()
    back = Transcript.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.meta == tr.meta
    assert back.record(2)["msg:B>A:enc"] == tr.record(2)["msg:B>A:enc"]
    doc = json.loads(tr.to_json())
    assert doc["meta"]["backend"] == "paillier"
    with pytest.raises(ProtocolError):
        Transcript.from_bytes(b"nope" + raw[4:])


def test_production_transcript_drops_side_channel(small):
    XA, XB, y = small
    _, tr = protocol.simulate_protocol(XA, XB, y, model.make_schedule(16, 4, 1, 0), 0.1, np.zeros(6))
    prod = tr.without_side_channel()
    assert tr.side_channel and not prod.side_channel
    assert not any(k.startswith("side:") for rec in prod.records for k in rec)
    with pytest.raises(ProtocolError):
        prod.side("f")


def test_checkpoint_visibility(small, ctx):
    (_, tr), _, _ = _run(small, ctx)
    va = protocol.transcript_checkpoint(tr, 1, "A")
    vb = protocol.transcript_checkpoint(tr, 1, "B")
    assert set(va.own) >= {"grad", "theta"} and all(not k.startswith("side") for k in va.own)
    assert not any(k.startswith("B:") or k.startswith("side") for k in va.own)
    assert "labels" not in vb.own and "y" not in vb.public
    assert "B>A:enc" in va.received and "A>B:masked" in va.received
    assert va.public["s"] == 4
    with pytest.raises(ProtocolError):
        protocol.transcript_checkpoint(tr, 0, "A")
    with pytest.raises(ProtocolError):
        protocol.transcript_checkpoint(tr, len(tr) + 1, "A")


def test_views_replay_identically(small):
    (_, t1), _, _ = _run(small, ProtocolContext.create(512, 3))
    (_, t2), _, _ = _run(small, ProtocolContext.create(512, 3))
    assert t1.to_bytes() == t2.to_bytes()


def test_multiparty_degenerate_party_reduces_to_two_party():
    ds = synth_continuous(16, 6, SplitSpec((3, 3)), seed=2)
    sch = model.make_schedule(16, 4, 2, 1)
    theta0 = np.random.default_rng(0).uniform(-1, 1, 6)
    traj, _ = protocol.run_multiparty([ds.features(0), ds.features(1), np.zeros((16, 0))], ds.y, sch, 0.4, theta0)
    ref, _ = protocol.simulate_protocol(ds.features(0), ds.features(1), ds.y, sch, 0.4, theta0)
    np.testing.assert_allclose(traj.thetas, ref.thetas, atol=1e-14)


def test_multiparty_encrypted_matches_plaintext():
    ds = synth_continuous(12, 6, SplitSpec((2, 2, 2)), seed=3)
    sch = model.make_schedule(12, 4, 1, 0)
    theta0 = np.random.default_rng(1).uniform(-1, 1, 6)
    feats = [ds.features(k) for k in range(3)]
    traj, tr = protocol.run_multiparty(feats, ds.y, sch, 0.4, theta0, ctx=ProtocolContext.create(512, 0))
    ref = model.train_plaintext(ApproxScheme.TAYLOR1, ds.X, ds.y, sch, 0.4, theta0)
    np.testing.assert_allclose(traj.thetas, ref.thetas, atol=1e-6)
    for t in range(1, sch.T + 1):
        rec = tr.record(t)
        np.testing.assert_allclose(rec["U1:aggregate"], rec["side:g2"] + rec["side:g3"], atol=1e-6)


def test_multiparty_label_view_identity():
    ds = synth_continuous(12, 6, SplitSpec((2, 2, 2)), seed=4)
    sch = model.make_schedule(12, 3, 2, 0)
    theta0 = np.random.default_rng(2).uniform(-1, 1, 6)
    traj, tr = protocol.run_multiparty([ds.features(k) for k in range(3)], ds.y, sch, 0.4, theta0)
    for t in range(1, sch.T + 1):
        rec = tr.record(t)
        b = rec["batch"]
        full = ds.X[b] @ traj.thetas[t - 1]
        own = ds.features(0)[b] @ rec["U1:theta"]
        np.testing.assert_allclose(rec["U1:aggregate"], full - own, atol=1e-14)
    with pytest.raises(ProtocolError):
        protocol.run_multiparty([ds.features(0), ds.features(1)], ds.y, sch, 0.4, theta0[:4])
