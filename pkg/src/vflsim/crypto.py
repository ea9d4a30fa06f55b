"""Paillier cryptosystem, signed fixed-point codec and power-of-two packing.

The Paillier variant uses generator ``g = N + 1`` so that ``lambda = phi(N)``.
Key generation and encryption nonces are drawn from caller-supplied seeded
generators; toy key sizes exist for tests and carry no security claim.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import gmpy2

SUPPORTED_KAPPA = (512, 1024, 2048, 3072)
KEYFILE_HEADER = "vflsim-paillier-keypair v1"


class CryptoError(ValueError):
    pass


class KeyMismatchError(CryptoError):
    pass


class CodecOverflowError(CryptoError):
    pass


class PackingError(CryptoError):
    pass


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    nsquare: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nsquare", self.n * self.n)

    @property
    def kappa(self) -> int:
        return self.n.bit_length()

    @property
    def tag(self) -> str:
        return hashlib.sha256(format(self.n, "x").encode()).hexdigest()[:16]


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    p: int
    q: int
    lam: int
    mu: int


@dataclass(frozen=True)
class Ciphertext:
    value: int
    key: PublicKey

    def __post_init__(self):
        if not 0 <= self.value < self.key.nsquare:
            raise CryptoError("ciphertext residue outside [0, N^2)")


def _prime_of_bits(rng: random.Random, bits: int) -> int:
    # Top two bits set so the product of two such primes has exactly 2*bits bits.
    candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
    prime = int(gmpy2.next_prime(candidate))
    if prime.bit_length() != bits:
        return _prime_of_bits(rng, bits)
    return prime


def keygen(kappa: int, rng_seed) -> KeyPair:
    if kappa not in SUPPORTED_KAPPA:
        raise CryptoError(f"unsupported key size {kappa}; choose one of {SUPPORTED_KAPPA}")
    rng = random.Random(rng_seed)
    half = kappa // 2
    while True:
        p = _prime_of_bits(rng, half)
        q = _prime_of_bits(rng, half)
        n = p * q
        if p != q and n.bit_length() == kappa:
            break
    phi = (p - 1) * (q - 1)
    mu = int(gmpy2.invert(phi, n))
    return KeyPair(public=PublicKey(n=n, g=n + 1), p=p, q=q, lam=phi, mu=mu)


def encrypt(pk: PublicKey, m: int, rng: random.Random) -> Ciphertext:
    m = int(m)
    if not 0 <= m < pk.n:
        raise CryptoError("plaintext must satisfy 0 <= m < N")
    while True:
        r = rng.randrange(1, pk.n)
        if gmpy2.gcd(r, pk.n) == 1:
            break
    nsq = pk.nsquare
    value = (1 + m * pk.n) % nsq * gmpy2.powmod(r, pk.n, nsq) % nsq
    return Ciphertext(int(value), pk)


def decrypt(keys: KeyPair, c: Ciphertext) -> int:
    pk = keys.public
    if c.key.n != pk.n:
        raise KeyMismatchError("ciphertext was produced under a different key")
    u = gmpy2.powmod(c.value, keys.lam, pk.nsquare)
    return int((u - 1) // pk.n * keys.mu % pk.n)


def hom_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.key.n != c2.key.n:
        raise KeyMismatchError("cannot add ciphertexts from different keys")
    return Ciphertext(c1.value * c2.value % c1.key.nsquare, c1.key)


def hom_scale(c: Ciphertext, k: int) -> Ciphertext:
    k = int(k)
    if k < 0:
        raise CryptoError("scalar must be non-negative; encode signed operands first")
    pk = c.key
    if k > pk.n // 2:
        # Same plaintext k*m mod N with a much shorter exponent.
        inv = gmpy2.invert(c.value, pk.nsquare)
        return Ciphertext(int(gmpy2.powmod(inv, pk.n - k % pk.n, pk.nsquare)), pk)
    return Ciphertext(int(gmpy2.powmod(c.value, k, pk.nsquare)), pk)


def hom_sum(cts: Iterable[Ciphertext], pk: PublicKey) -> Ciphertext:
    total = Ciphertext(1, pk)  # 1 is a valid encryption of zero with r = 1
    for c in cts:
        total = hom_add(total, c)
    return total


def hom_dot(cts: Sequence[Ciphertext], scalars: Sequence[int], pk: PublicKey) -> Ciphertext:
    """Encrypt ``sum_i k_i * m_i`` from ciphertexts of ``m_i`` and plain ``k_i``."""
    if len(cts) != len(scalars):
        raise CryptoError("ciphertext and scalar counts differ")
    return hom_sum((hom_scale(c, k) for c, k in zip(cts, scalars)), pk)


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point words of ``iota`` bits with ``frac_bits`` fractional bits.

    ``encode`` yields the two's-complement word in ``[0, 2**iota)``. For use as
    a Paillier plaintext a word is sign-extended into ``Z_N`` with
    ``to_residue``; sums of products then live at scale ``2**(2*frac_bits)``
    and are read back with ``from_residue`` plus ``decode_product``.
    """

    iota: int = 64
    frac_bits: int = 24

    def __post_init__(self):
        if self.frac_bits < 0 or self.iota < self.frac_bits + 8:
            raise CryptoError("codec requires iota >= frac_bits + 8 and frac_bits >= 0")

    @property
    def half(self) -> int:
        return 1 << (self.iota - 1)

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def to_word(self, v: int) -> int:
        if not -self.half <= v < self.half:
            raise CodecOverflowError(f"value {v} outside signed {self.iota}-bit range")
        return v % (1 << self.iota)

    def to_signed(self, word: int) -> int:
        if not 0 <= word < (1 << self.iota):
            raise CodecOverflowError("word outside [0, 2**iota)")
        return word - (1 << self.iota) if word >= self.half else word

    def quantize(self, r: float) -> int:
        v = int(round(float(r) * self.scale))
        if not -self.half <= v < self.half:
            raise CodecOverflowError(f"{r!r} overflows the signed {self.iota}-bit range")
        return v

    def encode(self, r: float) -> int:
        return self.to_word(self.quantize(r))

    def decode(self, word: int) -> float:
        return self.to_signed(word) / self.scale

    def decode_product(self, word: int) -> float:
        return self.to_signed(word) / (self.scale * self.scale)

    def to_residue(self, word: int, n: int) -> int:
        return self.to_signed(word) % n

    def from_residue(self, residue: int, n: int) -> int:
        v = residue - n if residue > n // 2 else residue
        return self.to_word(v)

    def accumulation_ok(self, s: int, value_bound: float = 4.0) -> bool:
        """Whether ``s`` products of magnitude ``value_bound`` stay in range.

        The default bound of 4 reproduces ``s * 2**(2*frac_bits + 2) < 2**(iota-1)``.
        """
        return s * value_bound * self.scale * self.scale < self.half


def max_pack_factor(kappa: int, iota: int) -> int:
    if iota < 1 or kappa <= iota:
        raise PackingError("need iota >= 1 and kappa > iota")
    return (kappa - 1) // iota


def pack(values: Sequence[int], d_a: int, u: int, iota: int, kappa: int | None = None) -> list[int]:
    """Lane ``s`` of slot ``i`` holds ``values[i + s*d_a]`` at bit offset ``s*iota``."""
    if len(values) != u * d_a:
        raise PackingError(f"expected {u * d_a} values, got {len(values)}")
    if kappa is not None and u * iota > kappa - 1:
        raise PackingError(f"capacity exceeded: u*iota = {u * iota} > kappa - 1 = {kappa - 1}")
    limit = 1 << iota
    out = []
    for i in range(d_a):
        acc = 0
        for s in range(u):
            v = int(values[i + s * d_a])
            if not 0 <= v < limit:
                raise PackingError(f"lane value {v} outside [0, 2**{iota})")
            acc += v << (s * iota)
        out.append(acc)
    return out


def unpack(packed: Sequence[int], d_a: int, u: int, iota: int) -> list[int]:
    if len(packed) != d_a:
        raise PackingError(f"expected {d_a} packed integers, got {len(packed)}")
    mask = (1 << iota) - 1
    out = [0] * (u * d_a)
    for i, word in enumerate(packed):
        word = int(word)
        if not 0 <= word < (1 << (u * iota)):
            raise PackingError("packed integer exceeds u*iota bits (lane overflow)")
        for s in range(u):
            out[i + s * d_a] = (word >> (s * iota)) & mask
    return out


def pack_ciphertexts(cts: Sequence[Ciphertext], d_a: int, u: int, iota: int) -> list[Ciphertext]:
    """Homomorphic counterpart of :func:`pack` (plaintexts must already be lanes)."""
    if len(cts) != u * d_a:
        raise PackingError(f"expected {u * d_a} ciphertexts, got {len(cts)}")
    pk = cts[0].key
    if u * iota > pk.kappa - 1:
        raise PackingError(f"capacity exceeded: u*iota = {u * iota} > kappa - 1 = {pk.kappa - 1}")
    return [
        hom_sum((hom_scale(cts[i + s * d_a], 1 << (s * iota)) for s in range(u)), pk)
        for i in range(d_a)
    ]


def dump_keypair(keys: KeyPair) -> str:
    pk = keys.public
    lines = [
        KEYFILE_HEADER,
        f"kappa {pk.kappa}",
        f"n {pk.n:x}",
        f"g {pk.g:x}",
        f"p {keys.p:x}",
        f"q {keys.q:x}",
        f"lambda {keys.lam:x}",
        f"mu {keys.mu:x}",
    ]
    return "\n".join(lines) + "\n"


def load_keypair(text: str) -> KeyPair:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != KEYFILE_HEADER:
        raise CryptoError("unrecognized keypair header")
    fields = {}
    for ln in lines[1:]:
        name, _, value = ln.partition(" ")
        fields[name] = value.strip()
    try:
        n, g = int(fields["n"], 16), int(fields["g"], 16)
        p, q = int(fields["p"], 16), int(fields["q"], 16)
        lam, mu = int(fields["lambda"], 16), int(fields["mu"], 16)
    except KeyError as exc:
        raise CryptoError(f"keypair text missing field {exc.args[0]}") from None
    if p * q != n or lam != (p - 1) * (q - 1) or mu * lam % n != 1:
        raise CryptoError("keypair components are inconsistent")
    if int(fields.get("kappa", n.bit_length())) != n.bit_length():
        raise CryptoError("declared kappa does not match the modulus")
    return KeyPair(public=PublicKey(n=n, g=g), p=p, q=q, lam=lam, mu=mu)
