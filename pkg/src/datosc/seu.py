"""Model-update sessions: floats ride the analog branch, integers are
corrected by parity-only coding against the device's outdated copy.

The receiver never sees the updated integer bits themselves. It combines
its outdated bits (weighted by the assumed drift rate p_hat) with the
transmitted parity LLRs in the DSC decoder; a CRC failure leaves that
frame's integers untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .analog import analog_gains, mmse_estimate, pack_iq, unpack_iq
from .channel import ChannelState, transmit
from .digital import (
    CodeSpec,
    dsc_decode,
    dsc_encode,
    demodulate,
    llr_clip,
    modulate,
)
from .errors import ParameterError

# Frames hold at most 1166 info bits so the encoded length (info + CRC +
# tail) stays within 1184 trellis steps.
MAX_FRAME_INFO_BITS = 1166


@dataclass(frozen=True)
class ModelParams:
    floats: np.ndarray
    ints: np.ndarray
    int_bits: int  # precision of the integer layer parameters

    def __post_init__(self):
        if self.int_bits not in (4, 8):
            raise ParameterError(f"integer precision must be 4 or 8, got {self.int_bits}")
        if np.any(np.asarray(self.ints) >= (1 << self.int_bits)) or np.any(
            np.asarray(self.ints) < 0
        ):
            raise ParameterError("integer parameters exceed their precision")


@dataclass(frozen=True)
class DriftSpec:
    float_noise_std: float = 0.0
    bit_flip_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.bit_flip_prob < 0.5:
            raise ParameterError("bit flip probability must lie in [0, 0.5)")


@dataclass(frozen=True)
class FrameRecord:
    frame_idx: int
    pattern: str
    parity_bits: int
    crc_ok: bool
    bit_errors_before: int
    bit_errors_after: int


@dataclass
class SeuSessionResult:
    corrected_ints: np.ndarray
    crc_ok: bool                 # every frame verified
    overhead_ratio: float        # parity bits sent / total integer bits
    frames: list[FrameRecord] = field(default_factory=list)
    parity_bits_sent: int = 0
    analog_uses_spent: int = 0
    total_int_bits: int = 0


def ints_to_bits(ints: np.ndarray, int_bits: int) -> np.ndarray:
    v = np.asarray(ints, dtype=np.int64)
    shifts = np.arange(int_bits - 1, -1, -1)
    return ((v[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def bits_to_ints(bits: np.ndarray, int_bits: int) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64).reshape(-1, int_bits)
    weights = 1 << np.arange(int_bits - 1, -1, -1)
    return np.sum(b * weights, axis=1)


def drift(params: ModelParams, spec: DriftSpec, seed: int) -> ModelParams:
    """Outdated copy: floats gain white noise, integer bits flip iid."""
    rng = np.random.default_rng(seed)
    floats = params.floats + spec.float_noise_std * rng.standard_normal(
        params.floats.shape
    )
    bits = ints_to_bits(params.ints, params.int_bits)
    flips = rng.random(bits.shape) < spec.bit_flip_prob
    outdated = bits_to_ints(bits ^ flips.astype(np.uint8), params.int_bits)
    return ModelParams(floats=floats, ints=outdated, int_bits=params.int_bits)


def seu_send_floats(
    floats: np.ndarray,
    prior_vars: np.ndarray,
    per_use_power: float,
    state: ChannelState,
) -> tuple[np.ndarray, np.ndarray]:
    """Deliver float parameters over the analog branch; returns MMSE
    estimates and their posterior error variances."""
    values = np.asarray(floats, dtype=np.float64)
    prior = np.broadcast_to(np.asarray(prior_vars, dtype=np.float64), values.shape)
    gains = analog_gains(prior, per_use_power)
    received = transmit(pack_iq(gains * values), state)
    obs = unpack_iq(np.conj(state.h) * received, values.size)
    return mmse_estimate(
        obs, gains, prior, abs(state.h) ** 2, state.noise_var / 2.0
    )


def _frame_slices(total_bits: int) -> list[slice]:
    starts = range(0, total_bits, MAX_FRAME_INFO_BITS)
    return [slice(s, min(s + MAX_FRAME_INFO_BITS, total_bits)) for s in starts]


LIST_SIZE = 16  # CRC-aided list depth for the update decoder


def seu_update_ints(
    updated: np.ndarray,
    outdated: np.ndarray,
    int_bits: int,
    pattern: str,
    state: ChannelState,
    p_hat: float,
    per_use_power: float = 1.0,
    modulation: str = "bpsk",
    list_size: int = LIST_SIZE,
) -> SeuSessionResult:
    """Correct the outdated integer parameters from parity bits alone.

    The sender encodes the updated bits and transmits only the punctured
    parity; the receiver forms systematic LLRs from its outdated copy,
    (1 - 2*old_bit) * log((1-p_hat)/p_hat), and runs the CRC-aided DSC
    decoder frame by frame. Frames that fail every candidate's CRC keep
    the outdated values.
    """
    if not 0.0 < p_hat < 0.5:
        raise ParameterError("assumed drift rate must lie in (0, 0.5)")
    code = CodeSpec(pattern)
    up_bits = ints_to_bits(updated, int_bits)
    old_bits = ints_to_bits(outdated, int_bits)
    if up_bits.size != old_bits.size:
        raise ParameterError("updated/outdated parameter counts differ")
    side_mag = float(np.log((1.0 - p_hat) / p_hat))
    amplitude = float(np.sqrt(per_use_power))

    corrected = old_bits.copy()
    frames: list[FrameRecord] = []
    parity_total = 0
    for idx, sl in enumerate(_frame_slices(up_bits.size)):
        frame = dsc_encode(up_bits[sl], code, modulation)
        symbols = modulate(frame.parity_bits, modulation, amplitude)
        received = transmit(symbols, state)
        parity_llrs = demodulate(
            received, state, modulation, amplitude, n_bits=frame.parity_bits.size
        )
        side = llr_clip((1.0 - 2.0 * old_bits[sl].astype(np.float64)) * side_mag)
        decoded, ok = dsc_decode(side, parity_llrs, code, list_size=list_size)
        if ok:
            corrected[sl] = decoded
        frames.append(
            FrameRecord(
                frame_idx=idx,
                pattern=pattern,
                parity_bits=frame.parity_bits.size,
                crc_ok=bool(ok),
                bit_errors_before=int(np.sum(old_bits[sl] != up_bits[sl])),
                bit_errors_after=int(np.sum(corrected[sl] != up_bits[sl])),
            )
        )
        parity_total += frame.parity_bits.size

    return SeuSessionResult(
        corrected_ints=bits_to_ints(corrected, int_bits),
        crc_ok=all(f.crc_ok for f in frames),
        overhead_ratio=parity_total / up_bits.size,
        frames=frames,
        parity_bits_sent=parity_total,
        analog_uses_spent=0,
        total_int_bits=int(up_bits.size),
    )


@dataclass(frozen=True)
class OverheadReport:
    parity_bits_sent: int
    analog_uses_spent: int
    full_retransmission_bits: int
    reduction_factor: float


def seu_overhead_report(session: SeuSessionResult) -> OverheadReport:
    """Control-overhead summary versus retransmitting every integer bit."""
    full = session.total_int_bits
    parity = sum(f.parity_bits for f in session.frames)
    return OverheadReport(
        parity_bits_sent=parity,
        analog_uses_spent=session.analog_uses_spent,
        full_retransmission_bits=full,
        reduction_factor=1.0 - parity / full if full else 0.0,
    )


SESSION_LOG_HEADER = [
    "frame_idx",
    "pattern",
    "parity_bits",
    "crc_ok",
    "bit_errors_before",
    "bit_errors_after",
]


def write_session_log(path, frames: list[FrameRecord], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(SESSION_LOG_HEADER)
        for f in frames:
            writer.writerow(
                [
                    f.frame_idx,
                    f.pattern,
                    f.parity_bits,
                    int(f.crc_ok),
                    f.bit_errors_before,
                    f.bit_errors_after,
                ]
            )
