"""Digital branch: quantizer, parity-only coding, modem, and the DSC decoder.

The code is a memory-2 systematic recursive convolutional code with octal
generators (1, 5/7). A 16-bit CRC (CCITT polynomial 0x1021, init 0xFFFF,
no reflection, no final xor) is appended to the info bits, the trellis is
driven back to the zero state with 2 tail bits, and only a punctured
fraction of the parity stream ever reaches the modulator: the receiver
supplies the systematic evidence itself (analog-side LLRs, or an outdated
copy of the data). Bit arrays are uint8 0/1; LLRs are positive when bit 0
is the more likely value and are clipped to +/-30.

All hot-path functions accept a leading batch axis so Monte-Carlo sweeps
can decode thousands of frames per call; single-frame calls use the same
entry points.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import ndtr

from .channel import ChannelState
from .errors import ParameterError

LLR_CLIP = 30.0

CRC_POLY = 0x1021
CRC_INIT = 0xFFFF
CRC_BITS = 16
TAIL_BITS = 2

PATTERN_FRACTIONS = {
    "R12": Fraction(1, 1),
    "R23": Fraction(1, 2),
    "R34": Fraction(1, 3),
}

# Trellis of the (1, 5/7) RSC, state = (d1 << 1) | d2. For state s and input
# u the register input is a = u ^ d1 ^ d2, the parity bit a ^ d2, and the
# next state (a << 1) | d1. Tables below are indexed [state, input].
_NEXT = np.array([[0, 2], [2, 0], [3, 1], [1, 3]], dtype=np.uint8)
_PARITY = np.array([[0, 1], [0, 1], [1, 0], [1, 0]], dtype=np.uint8)
_TAIL_INPUT = np.array([0, 1, 1, 0], dtype=np.uint8)  # u = d1 ^ d2

# Incoming transitions per next-state: (prev_state, input, parity) pairs.
_INCOMING = {
    0: ((0, 0, 0), (1, 1, 1)),
    1: ((2, 1, 0), (3, 0, 1)),
    2: ((0, 1, 1), (1, 0, 0)),
    3: ((2, 0, 1), (3, 1, 0)),
}
_IN_STATE = np.array([[a[0] for a in _INCOMING[ns]] for ns in range(4)], dtype=np.int64)
_IN_U = np.array([[a[1] for a in _INCOMING[ns]] for ns in range(4)], dtype=np.uint8)
_IN_P = np.array([[a[2] for a in _INCOMING[ns]] for ns in range(4)], dtype=np.float64)


def llr_clip(llrs: np.ndarray) -> np.ndarray:
    return np.clip(llrs, -LLR_CLIP, LLR_CLIP)


# ---------------------------------------------------------------------------
# quantizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizerSpec:
    """Midrise uniform quantizer: 2^bits cells over [-clip_i, clip_i]."""

    bits: int
    clips: np.ndarray  # (n,) per-index clip range c_i

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ParameterError(f"quantizer depth must be 1..8, got {self.bits}")
        if np.any(np.asarray(self.clips) <= 0):
            raise ParameterError("clip ranges must be positive")

    @classmethod
    def from_prior_vars(cls, prior_vars: np.ndarray, bits: int) -> "QuantizerSpec":
        return cls(bits=bits, clips=4.0 * np.sqrt(np.asarray(prior_vars, dtype=np.float64)))

    @property
    def levels(self) -> int:
        return 1 << self.bits

    @property
    def deltas(self) -> np.ndarray:
        return 2.0 * self.clips / self.levels


def quantize_cells(coeffs: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Cell index per coefficient; out-of-range values clip to the end cells."""
    x = np.asarray(coeffs, dtype=np.float64)
    idx = np.floor((x + spec.clips) / spec.deltas)
    return np.clip(idx, 0, spec.levels - 1).astype(np.int64)


def cells_to_bits(cells: np.ndarray, bits: int) -> np.ndarray:
    """Natural binary, most-significant bit first, flattened per coefficient."""
    c = np.asarray(cells, dtype=np.int64)
    shifts = np.arange(bits - 1, -1, -1)
    out = (c[..., None] >> shifts) & 1
    return out.reshape(*c.shape[:-1], c.shape[-1] * bits).astype(np.uint8)


def bits_to_cells(bitstream: np.ndarray, bits: int) -> np.ndarray:
    b = np.asarray(bitstream, dtype=np.int64)
    if b.shape[-1] % bits:
        raise ParameterError("bitstream length is not a multiple of the depth")
    grouped = b.reshape(*b.shape[:-1], b.shape[-1] // bits, bits)
    weights = 1 << np.arange(bits - 1, -1, -1)
    return np.sum(grouped * weights, axis=-1)


def dequantize_cells(cells: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    return -spec.clips + (np.asarray(cells) + 0.5) * spec.deltas


def quantize(coeffs: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    return cells_to_bits(quantize_cells(coeffs, spec), spec.bits)


def dequantize(bitstream: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    return dequantize_cells(bits_to_cells(bitstream, spec.bits), spec)


def cell_bounds(cells: np.ndarray, spec: QuantizerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Value range a cell decision pins down; end cells absorb the tails."""
    c = np.asarray(cells)
    lo = -spec.clips + c * spec.deltas
    hi = -spec.clips + (c + 1) * spec.deltas
    lo = np.where(c == 0, -np.inf, lo)
    hi = np.where(c == spec.levels - 1, np.inf, hi)
    return lo, hi


# ---------------------------------------------------------------------------
# CRC-16 and the convolutional code
# ---------------------------------------------------------------------------

def crc16(bits: np.ndarray) -> np.ndarray:
    """CRC-16-CCITT over a bit array; returns 16 bits, MSB first.

    A leading batch axis is carried through ((T, L) -> (T, 16)).
    """
    b = np.atleast_2d(np.asarray(bits, dtype=np.uint16))
    reg = np.full(b.shape[0], CRC_INIT, dtype=np.uint16)
    for t in range(b.shape[1]):
        fb = ((reg >> 15) & 1) ^ b[:, t]
        reg = (reg << 1) ^ np.where(fb.astype(bool), CRC_POLY, 0).astype(np.uint16)
    shifts = np.arange(15, -1, -1)
    out = ((reg[:, None] >> shifts) & 1).astype(np.uint8)
    return out[0] if np.ndim(bits) == 1 else out


def rsc_encode(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the RSC over the input and terminate to the zero state.

    Returns (sys_bits, parity_bits), each input length + 2 tail positions.
    """
    b = np.atleast_2d(np.asarray(bits, dtype=np.uint8))
    batch, length = b.shape
    sys_out = np.empty((batch, length + TAIL_BITS), dtype=np.uint8)
    par_out = np.empty((batch, length + TAIL_BITS), dtype=np.uint8)
    d1 = np.zeros(batch, dtype=np.uint8)
    d2 = np.zeros(batch, dtype=np.uint8)
    for t in range(length):
        u = b[:, t]
        a = u ^ d1 ^ d2
        sys_out[:, t] = u
        par_out[:, t] = a ^ d2
        d2, d1 = d1, a
    for t in range(length, length + TAIL_BITS):
        u = d1 ^ d2  # forces the register input to zero
        sys_out[:, t] = u
        par_out[:, t] = 0 ^ d2
        d2, d1 = d1, np.zeros_like(d1)
    if np.ndim(bits) == 1:
        return sys_out[0], par_out[0]
    return sys_out, par_out


def parity_length(info_len: int, pattern: str) -> int:
    """Punctured parity bit count: round(fraction * (info + CRC + tail))."""
    frac = PATTERN_FRACTIONS[pattern]
    return int(round(Fraction(info_len + CRC_BITS + TAIL_BITS) * frac))


def puncture_keep_indices(encoded_len: int, pattern: str) -> np.ndarray:
    """Surviving parity positions; exactly round(fraction * encoded_len) bits.

    The CRC and tail steps carry no receiver-side systematic evidence, so
    their parity is never punctured: the last CRC_BITS + TAIL_BITS positions
    survive first and the remaining budget spreads evenly over the info
    region. (Without this, a punctured trellis tail is under-determined and
    even noiseless frames fail their CRC check.)
    """
    frac = PATTERN_FRACTIONS[pattern]
    m = int(round(Fraction(encoded_len) * frac))
    if m >= encoded_len:
        return np.arange(encoded_len)
    protected = min(CRC_BITS + TAIL_BITS, encoded_len)
    head = encoded_len - protected
    if m <= protected:
        return head + (np.arange(m) * protected) // m
    m_head = m - protected
    head_keep = (np.arange(m_head) * head) // m_head
    return np.concatenate([head_keep, np.arange(head, encoded_len)])


@dataclass(frozen=True)
class CodeSpec:
    """Pattern id selecting the parity fraction of the fixed RSC+CRC chain."""

    pattern: str = "R12"

    def __post_init__(self):
        if self.pattern not in PATTERN_FRACTIONS:
            raise ParameterError(f"unknown code pattern {self.pattern!r}")

    def encoded_len(self, info_len: int) -> int:
        return info_len + CRC_BITS + TAIL_BITS

    def parity_len(self, info_len: int) -> int:
        return parity_length(info_len, self.pattern)


@dataclass(frozen=True)
class ParityFrame:
    """What the DSC encoder hands to the modulator: parity bits only."""

    parity_bits: np.ndarray
    pattern: str
    info_len: int
    modulation: str = "qpsk"


def dsc_encode(info_bits: np.ndarray, code: CodeSpec, modulation: str = "qpsk") -> ParityFrame:
    """Append CRC and tail, run the RSC, puncture, and drop the systematic bits."""
    info = np.atleast_2d(np.asarray(info_bits, dtype=np.uint8))
    stream = np.concatenate([info, crc16(info)], axis=1)
    _, parity = rsc_encode(stream)
    keep = puncture_keep_indices(parity.shape[1], code.pattern)
    punctured = parity[:, keep]
    if np.ndim(info_bits) == 1:
        punctured = punctured[0]
    return ParityFrame(
        parity_bits=punctured,
        pattern=code.pattern,
        info_len=info.shape[1],
        modulation=modulation,
    )


# ---------------------------------------------------------------------------
# modem
# ---------------------------------------------------------------------------

def modulate(bits: np.ndarray, scheme: str, amplitude: float = 1.0) -> np.ndarray:
    """BPSK maps 0 -> +a; QPSK Gray-maps bit pairs to a*(+/-1 +/- 1j)/sqrt(2).

    An odd QPSK bit count is padded with one zero bit (the receiver trims it).
    """
    b = np.asarray(bits, dtype=np.float64)
    if scheme == "bpsk":
        return amplitude * (1.0 - 2.0 * b) + 0.0j
    if scheme == "qpsk":
        if b.shape[-1] % 2:
            b = np.concatenate([b, np.zeros(b.shape[:-1] + (1,))], axis=-1)
        i = 1.0 - 2.0 * b[..., 0::2]
        q = 1.0 - 2.0 * b[..., 1::2]
        return amplitude * (i + 1j * q) / np.sqrt(2.0)
    raise ParameterError(f"unknown modulation {scheme!r}")


def bits_per_symbol(scheme: str) -> int:
    if scheme == "bpsk":
        return 1
    if scheme == "qpsk":
        return 2
    raise ParameterError(f"unknown modulation {scheme!r}")


def symbol_count(n_bits: int, scheme: str) -> int:
    bps = bits_per_symbol(scheme)
    return -(-n_bits // bps)


def demodulate(
    received: np.ndarray,
    state: ChannelState,
    scheme: str,
    amplitude: float = 1.0,
    n_bits: int | None = None,
    h=None,
) -> np.ndarray:
    """Per-bit LLRs after matched filtering with the known channel gain.

    BPSK: 4 * a * Re(conj(h) y) / noise_var; QPSK applies the same per real
    dimension with amplitude a / sqrt(2). h defaults to state.h; a batch of
    gains (one per frame row) may be supplied for vectorized sweeps.
    """
    y = np.asarray(received, dtype=np.complex128)
    hh = state.h if h is None else h
    matched = np.conj(hh) * y
    if scheme == "bpsk":
        llrs = 4.0 * amplitude * matched.real / state.noise_var
    elif scheme == "qpsk":
        scale = 4.0 * (amplitude / np.sqrt(2.0)) / state.noise_var
        llrs = np.empty(y.shape[:-1] + (2 * y.shape[-1],))
        llrs[..., 0::2] = scale * matched.real
        llrs[..., 1::2] = scale * matched.imag
    else:
        raise ParameterError(f"unknown modulation {scheme!r}")
    if n_bits is not None:
        llrs = llrs[..., :n_bits]
    return llr_clip(llrs)


# ---------------------------------------------------------------------------
# side-information LLRs
# ---------------------------------------------------------------------------

def side_info_llrs(est: np.ndarray, err_var: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Systematic-position LLRs from Gaussian coefficient beliefs.

    Each coefficient is modelled as Normal(est, err_var); cell probabilities
    are CDF differences over the quantizer cells with the end cells absorbing
    the tails, and each bit's LLR aggregates the cells where that bit is 0
    versus 1. Output is flattened MSB-first per coefficient, shaped like the
    quantized bitstream. CRC and tail positions are not covered here: the
    decoder gives them zero prior on its own.
    """
    mu = np.asarray(est, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(err_var, dtype=np.float64), 1e-300))
    levels = spec.levels
    edges = -spec.clips[..., None] + np.arange(1, levels) * spec.deltas[..., None]
    z = (edges - mu[..., None]) / sigma[..., None]
    cdf = ndtr(z)
    probs = np.empty(mu.shape + (levels,))
    probs[..., 0] = cdf[..., 0]
    probs[..., 1:-1] = np.diff(cdf, axis=-1)
    probs[..., -1] = 1.0 - cdf[..., -1]

    shifts = np.arange(spec.bits - 1, -1, -1)
    cell_bits = ((np.arange(levels)[:, None] >> shifts) & 1).astype(bool)  # (levels, B)
    with np.errstate(divide="ignore"):
        p1 = probs @ cell_bits            # (..., B)
        p0 = probs @ (~cell_bits)
        llrs = np.log(p0) - np.log(p1)
    llrs = np.nan_to_num(llrs, nan=0.0, posinf=LLR_CLIP, neginf=-LLR_CLIP)
    out = llr_clip(llrs)
    return out.reshape(*mu.shape[:-1], mu.shape[-1] * spec.bits)


# ---------------------------------------------------------------------------
# Viterbi decoding
# ---------------------------------------------------------------------------

def viterbi_decode(sys_llrs: np.ndarray, parity_llrs: np.ndarray, n_tail: int = TAIL_BITS) -> np.ndarray:
    """Max-likelihood sequence decision on the terminated RSC trellis.

    sys_llrs and parity_llrs cover every trellis step (punctured parity
    positions carry 0). The path starts and ends in state 0; the last n_tail
    steps only admit the termination input. Returns the decided input bits,
    tail included. Accepts (L,) or batched (T, L) arrays.
    """
    sys_l = np.atleast_2d(np.asarray(sys_llrs, dtype=np.float64))
    par_l = np.atleast_2d(np.asarray(parity_llrs, dtype=np.float64))
    if sys_l.shape != par_l.shape:
        raise ParameterError("systematic/parity LLR shapes differ")
    batch, length = sys_l.shape
    if length < n_tail:
        raise ParameterError("trellis shorter than its tail")

    neg_inf = -1e18
    pm = np.full((batch, 4), neg_inf)
    pm[:, 0] = 0.0
    decisions = np.empty((length, batch, 4), dtype=np.uint8)
    sign_u = 1.0 - 2.0 * _IN_U          # (4, 2)
    sign_p = 1.0 - 2.0 * _IN_P

    for t in range(length):
        s_llr = sys_l[:, t][:, None, None]     # (T, 1, 1)
        p_llr = par_l[:, t][:, None, None]
        # candidate metric for both incoming transitions of each next state
        cand = pm[:, _IN_STATE] + s_llr * sign_u + p_llr * sign_p  # (T, 4, 2)
        choice = np.argmax(cand, axis=2).astype(np.uint8)
        decisions[t] = choice
        pm = np.take_along_axis(cand, choice[..., None].astype(np.int64), axis=2)[..., 0]
        if t >= length - n_tail:
            pm[:, 2:] = neg_inf  # termination admits only states reachable via a=0

    bits = np.empty((batch, length), dtype=np.uint8)
    state = np.zeros(batch, dtype=np.int64)
    rows = np.arange(batch)
    for t in range(length - 1, -1, -1):
        choice = decisions[t][rows, state]
        bits[:, t] = _IN_U[state, choice]
        state = _IN_STATE[state, choice]
    return bits[0] if np.ndim(sys_llrs) == 1 else bits


def viterbi_decode_list(
    sys_llrs: np.ndarray,
    parity_llrs: np.ndarray,
    list_size: int,
    n_tail: int = TAIL_BITS,
) -> np.ndarray:
    """Top-list_size trellis paths for one frame, best metric first.

    Parallel list Viterbi: each state keeps its list_size best partial paths.
    Returns an array (list_size, length) of decided input bits; rows beyond
    the number of distinct survivors repeat the worst one (metric -inf paths
    never carry valid CRCs, so callers simply see failed candidates).
    """
    sys_l = np.asarray(sys_llrs, dtype=np.float64)
    par_l = np.asarray(parity_llrs, dtype=np.float64)
    if sys_l.ndim != 1 or sys_l.shape != par_l.shape:
        raise ParameterError("list decoding expects one frame of matched LLRs")
    length = sys_l.shape[0]
    ell = int(list_size)
    if ell < 1:
        raise ParameterError("list size must be >= 1")

    neg_inf = -1e18
    pm = np.full((4, ell), neg_inf)
    pm[0, 0] = 0.0
    # per step and next state: which (incoming transition, source rank) won
    choices = np.empty((length, 4, ell), dtype=np.uint8)

    sign_u = 1.0 - 2.0 * _IN_U
    sign_p = 1.0 - 2.0 * _IN_P
    for t in range(length):
        bm = sys_l[t] * sign_u + par_l[t] * sign_p          # (4, 2)
        cand = pm[_IN_STATE] + bm[..., None]                # (4, 2, ell)
        flat = cand.reshape(4, 2 * ell)
        order = np.argsort(-flat, axis=1, kind="stable")[:, :ell]
        choices[t] = order.astype(np.uint8)
        pm = np.take_along_axis(flat, order, axis=1)
        if t >= length - n_tail:
            pm[2:, :] = neg_inf

    bits = np.empty((ell, length), dtype=np.uint8)
    for rank in range(ell):
        state, r = 0, rank
        for t in range(length - 1, -1, -1):
            pick = int(choices[t, state, r])
            trans, r = divmod(pick, ell)
            bits[rank, t] = _IN_U[state, trans]
            state = int(_IN_STATE[state, trans])
    return bits


def assemble_parity_llrs(parity_llrs: np.ndarray, encoded_len: int, pattern: str) -> np.ndarray:
    """Spread punctured-parity LLRs over the full trellis (zeros elsewhere)."""
    keep = puncture_keep_indices(encoded_len, pattern)
    p = np.asarray(parity_llrs, dtype=np.float64)
    if p.shape[-1] != len(keep):
        raise ParameterError(
            f"expected {len(keep)} parity LLRs for pattern {pattern}, got {p.shape[-1]}"
        )
    full = np.zeros(p.shape[:-1] + (encoded_len,))
    full[..., keep] = p
    return full


def dsc_decode(
    side_llrs: np.ndarray,
    parity_llrs: np.ndarray,
    code: CodeSpec,
    list_size: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Soft-input Viterbi with receiver-side systematic evidence.

    side_llrs cover the info positions only; CRC and tail positions enter the
    trellis with zero prior. Returns (info_bits, crc_ok); on a CRC mismatch
    the bits are still the best path's decision, and the caller decides the
    fallback. With list_size > 1 (single frame only) the decoder walks the
    best list_size paths in metric order and returns the first one whose CRC
    verifies: punctured parity admits near-miss error events that a plain
    surviving-path decision cannot reject, and the CRC arbitrates those.
    """
    side = np.atleast_2d(np.asarray(side_llrs, dtype=np.float64))
    batch, info_len = side.shape
    enc_len = code.encoded_len(info_len)
    sys_full = np.concatenate([side, np.zeros((batch, CRC_BITS + TAIL_BITS))], axis=1)
    par_full = assemble_parity_llrs(
        np.atleast_2d(np.asarray(parity_llrs, dtype=np.float64)), enc_len, code.pattern
    )
    if list_size > 1:
        if np.ndim(side_llrs) != 1:
            raise ParameterError("list decoding handles one frame at a time")
        candidates = viterbi_decode_list(sys_full[0], par_full[0], list_size)
        for cand in candidates:
            info = cand[:info_len]
            if np.array_equal(crc16(info), cand[info_len : info_len + CRC_BITS]):
                return info, True
        return candidates[0, :info_len], False
    decided = viterbi_decode(sys_full, par_full)
    info = decided[:, :info_len]
    crc_rx = decided[:, info_len : info_len + CRC_BITS]
    crc_ok = np.all(crc16(info) == crc_rx, axis=1)
    if np.ndim(side_llrs) == 1:
        return info[0], bool(crc_ok[0])
    return info, crc_ok


# ---------------------------------------------------------------------------
# analog/digital fusion
# ---------------------------------------------------------------------------

def refine(
    est: np.ndarray,
    decoded_cells: np.ndarray,
    spec: QuantizerSpec,
    crc_ok,
    observed: np.ndarray | None = None,
) -> np.ndarray:
    """Fuse analog estimates with the decoded quantizer cells.

    With a verified frame, every coefficient the analog branch actually
    observed is clamped into the value range its decoded cell pins down (end
    cells are open-ended); coefficients with no analog observation take the
    decoded cell midpoint, since projecting a bare prior mean onto a far
    cell's edge is dominated by the midpoint. `observed` is a boolean mask
    over the last axis (default: everything observed). Without a verified
    frame the estimates pass through untouched, falling back to the analog
    branch.
    """
    e = np.asarray(est, dtype=np.float64)
    lo, hi = cell_bounds(decoded_cells, spec)
    fused = np.clip(e, lo, hi)
    if observed is not None:
        mids = dequantize_cells(decoded_cells, spec)
        fused = np.where(observed, fused, mids)
    ok = np.asarray(crc_ok)
    if ok.ndim == 0:
        return fused if bool(ok) else e.copy()
    return np.where(ok[:, None], fused, e)
