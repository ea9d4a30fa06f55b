"""Encrypted gradient exchange between vertically partitioned parties.

Party A holds labels and features ``x^A``; party B holds ``x^B``. Each step of
the two-party exchange runs twice: once under B's Paillier key so that A learns
``grad^A``, once under A's key so that B learns ``grad^B``. Every quantity
crossing a party boundary goes through an in-memory :class:`Channel` and is
recorded in the :class:`Transcript`.

Transcript field names encode visibility:

* ``A:*`` / ``B:*`` / ``U<k>:*`` are private to that party;
* ``msg:<src>><dst>:*`` is seen by sender and receiver;
* ``side:*`` is ground truth for evaluation only and never appears in a view.
"""
from __future__ import annotations

import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import crypto
from .crypto import Ciphertext, FixedPointCodec, KeyPair
from .model import GRADIENT_SCALE, ApproxScheme, BatchSchedule, Trajectory, coefficient_from_inner, learning_rates

TRANSCRIPT_MAGIC = b"VFLSIMTR"
TRANSCRIPT_VERSION = 1


class ProtocolError(ValueError):
    pass


@dataclass
class Party:
    name: str
    features: np.ndarray
    theta: np.ndarray
    labels: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class DpConfig:
    sigma_A: float = 0.0
    sigma_B: float = 0.0
    enabled: bool = False

    def __post_init__(self):
        if self.sigma_A < 0 or self.sigma_B < 0:
            raise ProtocolError("noise standard deviations must be non-negative")


class Channel:
    """Ordered in-memory message queue for one direction."""

    def __init__(self, src: str, dst: str):
        self.src, self.dst = src, dst
        self._queue: deque = deque()

    def send(self, kind: str, payload) -> None:
        self._queue.append((kind, payload))

    def recv(self, kind: str):
        if not self._queue:
            raise ProtocolError(f"{self.dst} expected {kind!r} from {self.src}, queue empty")
        got, payload = self._queue.popleft()
        if got != kind:
            raise ProtocolError(f"{self.dst} expected {kind!r} from {self.src}, got {got!r}")
        return payload


@dataclass
class ProtocolContext:
    """Key material, codec and randomness for one run.

    ``keys_B`` is the system owned by B (A learns ``grad^A`` through it) and
    ``keys_A`` the one owned by A.
    """

    keys_B: KeyPair
    keys_A: KeyPair
    codec: FixedPointCodec
    rng: random.Random

    @classmethod
    def create(cls, kappa: int = 512, seed: int = 0, codec: FixedPointCodec | None = None) -> "ProtocolContext":
        codec = codec or FixedPointCodec()
        if 2 * codec.iota + 16 > kappa:
            raise ProtocolError("kappa too small for the codec word size")
        return cls(
            keys_B=crypto.keygen(kappa, f"paillier-{seed}-B"),
            keys_A=crypto.keygen(kappa, f"paillier-{seed}-A"),
            codec=codec,
            rng=random.Random(f"nonce-{seed}"),
        )


# Protocol building blocks -------------------------------------------------

def encrypt_values(codec: FixedPointCodec, pk: crypto.PublicKey, values, rng: random.Random) -> list[Ciphertext]:
    return [crypto.encrypt(pk, codec.to_residue(codec.encode(v), pk.n), rng) for v in values]


def feature_scalars(codec: FixedPointCodec, n: int, features: np.ndarray) -> list[list[int]]:
    """Non-negative Paillier scalars for a ``s x d`` feature block (column-major lists)."""
    return [[codec.to_residue(codec.encode(v), n) for v in col] for col in features.T]


def masked_decrypt(keys: KeyPair, masked: Sequence[Ciphertext]) -> list[int]:
    """The key owner's only duty: decrypt whatever it is sent."""
    return [crypto.decrypt(keys, c) for c in masked]


def plain_dot(codec: FixedPointCodec, values, features: np.ndarray) -> list[int]:
    """Exact integer ``sum_i q(v_i) q(x_ij)`` at scale ``2**(2*frac_bits)``."""
    q = [codec.quantize(v) for v in values]
    return [sum(a * codec.quantize(x) for a, x in zip(q, col)) for col in features.T]


def _check_accumulation(codec: FixedPointCodec, values, features: np.ndarray) -> None:
    bound = float(np.max(np.abs(values), initial=0.0)) * float(np.sum(np.max(np.abs(features), axis=1, initial=0.0)))
    if bound * codec.scale * codec.scale >= codec.half:
        raise crypto.CodecOverflowError(
            f"aggregate magnitude bound {bound:.3g} exceeds the {codec.iota}-bit word with {codec.frac_bits} fractional bits"
        )


def _exchange(
    ctx: ProtocolContext,
    owner_keys: KeyPair,
    sender_values,
    receiver_features: np.ndarray,
    receiver_plain,
    s: int,
    names: tuple[str, str],
) -> tuple[np.ndarray, dict[str, Any]]:
    """One direction of the exchange.

    The key owner encrypts ``sender_values``; the receiver aggregates them
    against its features, masks, has the owner decrypt, unmasks and adds its own
    plaintext term ``receiver_plain``. Returns the receiver's gradient at scale
    ``1/(4s)`` and the transcript fields.
    """
    owner, receiver = names
    codec, pk = ctx.codec, owner_keys.public
    n = pk.n
    to_recv, to_owner = Channel(owner, receiver), Channel(receiver, owner)
    _check_accumulation(codec, sender_values, receiver_features)
    _check_accumulation(codec, receiver_plain, receiver_features)

    to_recv.send("enc", encrypt_values(codec, pk, sender_values, ctx.rng))

    cts = to_recv.recv("enc")
    scalars = feature_scalars(codec, n, receiver_features)
    sums = [crypto.hom_dot(cts, col, pk) for col in scalars]
    masks = [ctx.rng.randrange(n) for _ in sums]
    masked = [crypto.hom_add(c, crypto.encrypt(pk, (-r) % n, ctx.rng)) for c, r in zip(sums, masks)]
    to_owner.send("masked", masked)

    to_recv.send("decrypted", masked_decrypt(owner_keys, to_owner.recv("masked")))

    dec = to_recv.recv("decrypted")
    H = [(d + r) % n for d, r in zip(dec, masks)]
    own = plain_dot(codec, receiver_plain, receiver_features)
    words = [codec.from_residue((h + o) % n, n) for h, o in zip(H, own)]
    grad = np.array([codec.decode_product(w) for w in words]) / (4 * s)
    tag = f"{owner}>{receiver}"
    back = f"{receiver}>{owner}"
    fields = {
        f"msg:{tag}:enc": [c.value for c in cts],
        f"msg:{back}:masked": [c.value for c in masked],
        f"msg:{tag}:decrypted": list(dec),
        f"{receiver}:mask": masks,
        f"{receiver}:H": H,
    }
    return grad, fields


def run_protocol1_step(ctx: ProtocolContext, A: Party, B: Party, batch, dp_noise_B=None):
    """A's gradient for one batch; B optionally perturbs its sensitive vector."""
    batch = np.asarray(batch)
    s = batch.size
    gB = B.features[batch] @ B.theta
    svA = A.features[batch] @ A.theta - 2.0 * A.labels[batch]
    sent = gB if dp_noise_B is None else gB + dp_noise_B
    grad, fields = _exchange(ctx, ctx.keys_B, sent, A.features[batch], svA, s, (B.name, A.name))
    return grad, fields


def run_protocol1_step_B(ctx: ProtocolContext, A: Party, B: Party, batch, dp_noise_A=None):
    """Mirror of :func:`run_protocol1_step`: B learns its gradient under A's key."""
    batch = np.asarray(batch)
    s = batch.size
    gB = B.features[batch] @ B.theta
    svA = A.features[batch] @ A.theta - 2.0 * A.labels[batch]
    sent = svA if dp_noise_A is None else svA + dp_noise_A
    grad, fields = _exchange(ctx, ctx.keys_A, sent, B.features[batch], gB, s, (A.name, B.name))
    return grad, fields


# Transcript -----------------------------------------------------------------

@dataclass
class Transcript:
    meta: dict
    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, t: int) -> dict:
        if not 1 <= t <= len(self.records):
            raise ProtocolError(f"iteration {t} outside recorded range 1..{len(self.records)}")
        return self.records[t - 1]

    @property
    def side_channel(self) -> bool:
        return bool(self.meta.get("side_channel"))

    def without_side_channel(self) -> "Transcript":
        recs = [{k: v for k, v in r.items() if not k.startswith("side:")} for r in self.records]
        return Transcript(dict(self.meta, side_channel=False), recs)

    def side(self, name: str) -> np.ndarray:
        """Stack a ground-truth field over all iterations (``T x s``)."""
        if not self.side_channel:
            raise ProtocolError("transcript carries no ground-truth side channel")
        return np.stack([r[f"side:{name}"] for r in self.records])

    def to_bytes(self) -> bytes:
        head = json.dumps(self.meta, sort_keys=True).encode()
        out = [TRANSCRIPT_MAGIC, struct.pack("<HI", TRANSCRIPT_VERSION, len(head)), head]
        for rec in self.records:
            body = _encode_record(rec)
            out.append(struct.pack("<I", len(body)))
            out.append(body)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transcript":
        if raw[:8] != TRANSCRIPT_MAGIC:
            raise ProtocolError("not a transcript file")
        version, hlen = struct.unpack("<HI", raw[8:14])
        if version != TRANSCRIPT_VERSION:
            raise ProtocolError(f"unsupported transcript version {version}")
        meta = json.loads(raw[14 : 14 + hlen])
        pos = 14 + hlen
        records = []
        while pos < len(raw):
            if pos + 4 > len(raw):
                raise ProtocolError("truncated record length")
            (size,) = struct.unpack("<I", raw[pos : pos + 4])
            pos += 4
            if pos + size > len(raw):
                raise ProtocolError("truncated record body")
            records.append(_decode_record(raw[pos : pos + size]))
            pos += size
        return cls(meta, records)

    def to_json(self) -> str:
        """Inspection export; ciphertexts are summarized by bit length."""

        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return {"count": len(v), "max_bits": max((int(x).bit_length() for x in v), default=0)}
            return v

        recs = [{k: conv(v) for k, v in r.items()} for r in self.records]
        return json.dumps({"meta": self.meta, "records": recs})


def _encode_record(rec: dict) -> bytes:
    parts = [struct.pack("<H", len(rec))]
    for key in sorted(rec):
        val = rec[key]
        name = key.encode()
        parts.append(struct.pack("<B", len(name)) + name)
        if isinstance(val, (int, np.integer)):
            parts.append(b"I" + struct.pack("<q", int(val)))
        elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
            parts.append(b"F" + struct.pack("<I", val.size) + np.ascontiguousarray(val, dtype="<f8").tobytes())
        elif isinstance(val, np.ndarray) and val.dtype.kind in "iu":
            parts.append(b"N" + struct.pack("<I", val.size) + np.ascontiguousarray(val, dtype="<i8").tobytes())
        elif isinstance(val, list):
            parts.append(b"Z" + struct.pack("<I", len(val)))
            for x in val:
                x = int(x)
                if x < 0:
                    raise ProtocolError("big-integer fields must be non-negative")
                b = x.to_bytes((x.bit_length() + 7) // 8, "big")
                parts.append(struct.pack("<H", len(b)) + b)
        else:
            raise ProtocolError(f"cannot serialize field {key!r} of type {type(val).__name__}")
    return b"".join(parts)


def _decode_record(body: bytes) -> dict:
    (count,) = struct.unpack_from("<H", body, 0)
    pos = 2
    rec = {}
    for _ in range(count):
        nlen = body[pos]
        key = body[pos + 1 : pos + 1 + nlen].decode()
        pos += 1 + nlen
        kind = body[pos : pos + 1]
        pos += 1
        if kind == b"I":
            (rec[key],) = struct.unpack_from("<q", body, pos)
            pos += 8
        elif kind in (b"F", b"N"):
            (size,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dtype = "<f8" if kind == b"F" else "<i8"
            rec[key] = np.frombuffer(body, dtype=dtype, count=size, offset=pos).copy()
            pos += 8 * size
        elif kind == b"Z":
            (size,) = struct.unpack_from("<I", body, pos)
            pos += 4
            vals = []
            for _ in range(size):
                (blen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                vals.append(int.from_bytes(body[pos : pos + blen], "big"))
                pos += blen
            rec[key] = vals
        else:
            raise ProtocolError(f"unknown field type {kind!r}")
    return rec


@dataclass(frozen=True)
class TranscriptView:
    """What one party legitimately knows about iteration ``t``."""

    party: str
    t: int
    batch: np.ndarray
    own: dict
    received: dict
    public: dict


PUBLIC_META = ("scheme", "s", "eta", "n", "dims", "kappa", "iota", "frac_bits", "parties", "label_party")


def transcript_checkpoint(transcript: Transcript, t: int, party: str) -> TranscriptView:
    rec = transcript.record(t)
    own, received = {}, {}
    for key, val in rec.items():
        if key.startswith(f"{party}:"):
            own[key[len(party) + 1 :]] = val
        elif key.startswith("msg:"):
            route, _, kind = key[4:].partition(":")
            src, _, dst = route.partition(">")
            if party in (src, dst):
                received[f"{route}:{kind}"] = val
    public = {k: transcript.meta[k] for k in PUBLIC_META if k in transcript.meta}
    return TranscriptView(party=party, t=t, batch=np.asarray(rec["batch"]), own=own, received=received, public=public)


# Training loops -------------------------------------------------------------

def _two_party_meta(scheme, n, dims, s, eta, dp: DpConfig, backend, ctx, side_channel) -> dict:
    meta = {
        "kind": "two-party",
        "scheme": ApproxScheme(scheme).value,
        "n": n,
        "dims": list(dims),
        "parties": ["A", "B"],
        "label_party": "A",
        "s": s,
        "eta": float(np.asarray(eta).flat[0]) if np.ndim(eta) == 0 else list(map(float, np.asarray(eta))),
        "backend": backend,
        "dp": {"enabled": dp.enabled, "sigma_A": dp.sigma_A, "sigma_B": dp.sigma_B},
        "side_channel": side_channel,
    }
    if ctx is not None:
        meta.update(kappa=ctx.keys_B.public.kappa, iota=ctx.codec.iota, frac_bits=ctx.codec.frac_bits)
    return meta


def train_encrypted(
    XA,
    XB,
    y,
    schedule: BatchSchedule,
    eta,
    theta0,
    dp: DpConfig | None = None,
    ctx: ProtocolContext | None = None,
    scheme: ApproxScheme = ApproxScheme.TAYLOR1,
    backend: str = "paillier",
    noise_seed: int = 0,
    side_channel: bool = True,
) -> tuple[Trajectory, Transcript]:
    """Run the two-party exchange for every iteration of ``schedule``.

    ``backend="paillier"`` performs real encryption; ``backend="plain"`` computes
    the same messages in floating point (no encryption, no quantization) for
    runs where Paillier would be too slow, and also accepts the other
    approximation schemes. With ``dp.enabled`` each party adds
    Gaussian noise to the sensitive vector it sends, so the update becomes
    ``theta - eta * (grad + e_t)``. ``side_channel`` records ground truth for
    evaluation; production transcripts should leave it off.
    """
    scheme = ApproxScheme(scheme)
    if backend not in ("paillier", "plain"):
        raise ProtocolError(f"unknown backend {backend!r}")
    dp = dp or DpConfig()
    if scheme is not ApproxScheme.TAYLOR1 and (backend == "paillier" or dp.enabled):
        raise ProtocolError("encryption and noise are defined for the first-order Taylor scheme only")
    XA, XB, y = np.asarray(XA, float), np.asarray(XB, float), np.asarray(y, float)
    n, dA = XA.shape
    dB = XB.shape[1]
    if XB.shape[0] != n or y.shape[0] != n or schedule.n != n:
        raise ProtocolError("party row counts, labels and schedule disagree")
    s = schedule.s
    if backend == "paillier":
        ctx = ctx or ProtocolContext.create()
        if not ctx.codec.accumulation_ok(s):
            raise crypto.CodecOverflowError(
                f"batch size {s} violates s * 2**(2*{ctx.codec.frac_bits}+2) < 2**({ctx.codec.iota}-1)"
            )
    else:
        ctx = None
    rates = learning_rates(eta, schedule.T)
    theta = np.array(theta0, dtype=float)
    A = Party("A", XA, theta[:dA].copy(), y)
    B = Party("B", XB, theta[dA:].copy())
    rng_A = np.random.default_rng([noise_seed, 0xA])
    rng_B = np.random.default_rng([noise_seed, 0xB])
    transcript = Transcript(_two_party_meta(scheme, n, (dA, dB), s, eta, dp, backend, ctx, side_channel))
    thetas = np.empty((schedule.T + 1, dA + dB))
    thetas[0] = theta
    coeffs = np.empty((schedule.T, s))
    for t in range(1, schedule.T + 1):
        batch = schedule.batches[t - 1]
        gA = XA[batch] @ A.theta
        gB = XB[batch] @ B.theta
        f = coefficient_from_inner(scheme, gA + gB, y[batch])
        zA = rng_A.normal(0.0, dp.sigma_A, s) if dp.enabled else np.zeros(s)
        zB = rng_B.normal(0.0, dp.sigma_B, s) if dp.enabled else np.zeros(s)
        rec: dict[str, Any] = {"t": t, "batch": np.asarray(batch, dtype=np.int64)}
        if backend == "paillier":
            grad_A, fa = run_protocol1_step(ctx, A, B, batch, zB if dp.enabled else None)
            grad_B, fb = run_protocol1_step_B(ctx, A, B, batch, zA if dp.enabled else None)
            rec.update(fa)
            rec.update(fb)
        else:
            scale = GRADIENT_SCALE[scheme]
            grad_A = scale / s * (XA[batch].T @ (f + zB))
            grad_B = scale / s * (XB[batch].T @ (f + zA))
        rec.update({
            "A:theta": A.theta.copy(),
            "B:theta": B.theta.copy(),
            "A:grad": grad_A,
            "B:grad": grad_B,
        })
        if dp.enabled:
            rec["A:sec"] = gA - 2.0 * y[batch] + zA
            rec["B:sec"] = gB + zB
        if side_channel:
            rec.update({"side:f": f, "side:gA": gA, "side:gB": gB, "side:ZA": zA, "side:ZB": zB})
        transcript.records.append(rec)
        coeffs[t - 1] = f
        A.theta = A.theta - rates[t - 1] * grad_A
        B.theta = B.theta - rates[t - 1] * grad_B
        thetas[t] = np.concatenate([A.theta, B.theta])
    return Trajectory(thetas=thetas, coefficients=coeffs), transcript


def simulate_protocol(XA, XB, y, schedule, eta, theta0, dp=None, noise_seed=0, side_channel=True):
    """Plaintext-simulated transcript with the same message semantics."""
    return train_encrypted(XA, XB, y, schedule, eta, theta0, dp=dp, backend="plain",
                           noise_seed=noise_seed, side_channel=side_channel)


def noise_error(transcript: Transcript, XA, XB) -> np.ndarray:
    """Reconstruct ``e_t = (1/4s)(X^A Z^B ; X^B Z^A)`` for every iteration."""
    out = []
    for rec in transcript.records:
        b = rec["batch"]
        s = b.size
        out.append(np.concatenate([XA[b].T @ rec["side:ZB"], XB[b].T @ rec["side:ZA"]]) / (4 * s))
    return np.array(out)


# Multi-party ----------------------------------------------------------------

def run_multiparty(
    features: Sequence[np.ndarray],
    y,
    schedule: BatchSchedule,
    eta,
    theta0,
    scheme: ApproxScheme = ApproxScheme.TAYLOR1,
    ctx: ProtocolContext | None = None,
    side_channel: bool = True,
) -> tuple[Trajectory, Transcript]:
    """``p >= 3`` parties; U1 holds labels and is the first feature block.

    Non-label parties send their partial inner products to U1 only through an
    aggregate, so U1 observes ``sum_{k>=2} g^{U_k}``. U1 then forms the scheme
    coefficients and every party receives ``scale/s * sum_i f_i x_i^{U_k}``.
    With ``ctx`` the aggregation and the return leg use U1's Paillier key
    (``ctx.keys_A``); without it the messages are exchanged in plaintext.
    """
    scheme = ApproxScheme(scheme)
    p = len(features)
    if p < 3:
        raise ProtocolError("multi-party runs need at least three parties")
    feats = [np.asarray(F, dtype=float) for F in features]
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if any(F.shape[0] != n for F in feats) or schedule.n != n:
        raise ProtocolError("party row counts and schedule disagree")
    dims = [F.shape[1] for F in feats]
    bounds = np.cumsum([0, *dims])
    theta = np.array(theta0, dtype=float)
    shares = [theta[bounds[k] : bounds[k + 1]].copy() for k in range(p)]
    names = [f"U{k + 1}" for k in range(p)]
    scale = GRADIENT_SCALE[scheme]
    rates = learning_rates(eta, schedule.T)
    s = schedule.s
    meta = {
        "kind": "multi-party",
        "scheme": scheme.value,
        "n": n,
        "dims": dims,
        "parties": names,
        "label_party": names[0],
        "s": s,
        "eta": float(rates[0]) if np.all(rates == rates[0]) else rates.tolist(),
        "backend": "paillier" if ctx is not None else "plain",
        "side_channel": side_channel,
    }
    if ctx is not None:
        meta.update(kappa=ctx.keys_A.public.kappa, iota=ctx.codec.iota, frac_bits=ctx.codec.frac_bits)
    transcript = Transcript(meta)
    thetas = np.empty((schedule.T + 1, theta.size))
    thetas[0] = theta
    coeffs = np.empty((schedule.T, s))
    for t in range(1, schedule.T + 1):
        batch = schedule.batches[t - 1]
        inner = [feats[k][batch] @ shares[k] for k in range(p)]
        rec: dict[str, Any] = {"t": t, "batch": np.asarray(batch, dtype=np.int64)}
        if ctx is None:
            agg = np.zeros(s)
            for k in range(1, p):
                agg = agg + inner[k]
        else:
            agg = _encrypted_aggregate(ctx, inner[1:], rec, names)
        rec[f"{names[0]}:aggregate"] = agg
        f = coefficient_from_inner(scheme, inner[0] + agg, y[batch])
        grads = []
        for k in range(p):
            if k == 0 or ctx is None:
                grads.append(scale / s * (feats[k][batch].T @ f))
            else:
                grads.append(_encrypted_return(ctx, f, feats[k][batch], scale, rec, (names[0], names[k])))
        for k in range(p):
            rec[f"{names[k]}:theta"] = shares[k].copy()
            rec[f"{names[k]}:grad"] = grads[k]
        if side_channel:
            rec["side:f"] = f
            for k in range(p):
                rec[f"side:g{k + 1}"] = inner[k]
        transcript.records.append(rec)
        coeffs[t - 1] = f
        for k in range(p):
            shares[k] = shares[k] - rates[t - 1] * grads[k]
        thetas[t] = np.concatenate(shares)
    return Trajectory(thetas=thetas, coefficients=coeffs), transcript


def _encrypted_aggregate(ctx: ProtocolContext, inners, rec, names) -> np.ndarray:
    codec, keys = ctx.codec, ctx.keys_A
    pk = keys.public
    total = None
    for k, g in enumerate(inners, start=1):
        cts = encrypt_values(codec, pk, g, ctx.rng)
        total = cts if total is None else [crypto.hom_add(a, b) for a, b in zip(total, cts)]
        # Each non-label party forwards the running ciphertext sum to the next.
        dst = names[k + 1] if k + 1 < len(names) else names[0]
        rec[f"msg:{names[k]}>{dst}:partial"] = [c.value for c in total]
    words = [codec.from_residue(m, pk.n) for m in masked_decrypt(keys, total)]
    return np.array([codec.decode(w) for w in words])


def _encrypted_return(ctx, f, block, scale, rec, route) -> np.ndarray:
    owner, receiver = route
    codec, keys = ctx.codec, ctx.keys_A
    pk = keys.public
    n = pk.n
    s = block.shape[0]
    cts = encrypt_values(codec, pk, f, ctx.rng)
    sums = [crypto.hom_dot(cts, col, pk) for col in feature_scalars(codec, n, block)]
    masks = [ctx.rng.randrange(n) for _ in sums]
    masked = [crypto.hom_add(c, crypto.encrypt(pk, (-r) % n, ctx.rng)) for c, r in zip(sums, masks)]
    dec = masked_decrypt(keys, masked)
    words = [codec.from_residue((d + r) % n, n) for d, r in zip(dec, masks)]
    rec[f"msg:{owner}>{receiver}:enc"] = [c.value for c in cts]
    rec[f"msg:{receiver}>{owner}:masked"] = [c.value for c in masked]
    rec[f"msg:{owner}>{receiver}:decrypted"] = dec
    return scale / s * np.array([codec.decode_product(w) for w in words])
