"""Experiment runner: configured SNR sweeps, Monte-Carlo aggregation, CSV
emission, and the cliff / saturation / graceful-improvement detectors.

Determinism contract: every trial draws from RNG streams derived solely
from (seed, point_index, trial_index), so a sweep's CSV is byte-identical
regardless of how trials are chunked over workers.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import analog as ana
from . import codec
from . import digital as dig
from .allocator import FerTable
from .channel import ChannelBudget, ChannelState
from .errors import ConfigError, ParameterError
from .sources import SourceSpec, gen_block, load_pgm

SWEEP_HEADER = [
    "scheme",
    "snr_db",
    "trials",
    "feature_mse",
    "feature_mse_se",
    "data_mse",
    "data_mse_se",
    "system_distortion",
    "fer",
    "task_accuracy",
    "n_analog",
    "n_digital",
    "p_a_fraction",
    "seed",
]

SCHEMES = ("analog", "digital", "da")
CHANNELS = ("awgn", "rayleigh")

CLIFF_FACTOR = 5.0
SATURATION_REL = 0.05
GRACEFUL_FACTOR = 0.8


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str = "da"
    channel: str = "rayleigh"
    snr_grid: tuple = tuple(float(s) for s in range(0, 21, 2))
    trials: int = 2000
    lam: float = 0.5
    seed: int = 12345
    out: str = "sweep.csv"
    workers: int = 1
    # source
    source_kind: str = "class_mixture"
    n: int = 64
    rho: float = 0.9
    class_count: int = 4
    image: Optional[str] = None
    # link
    k: int = 32
    quant_bits: int = 4
    pattern: str = "R12"
    modulation: str = "qpsk"
    total_uses: int = 320
    total_power: float = 320.0
    p_a_fraction: float = 0.5
    floor_threshold: float = 0.05
    fer_table: Optional[str] = None

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.channel not in CHANNELS:
            raise ParameterError(f"unknown channel {self.channel!r}")
        if self.trials < 100:
            raise ParameterError("trials must be >= 100 for CI-bearing metrics")
        grid = np.asarray(self.snr_grid)
        if grid.size and np.any(np.diff(grid) <= 0):
            raise ParameterError("snr grid must be strictly increasing")
        if not 0.0 < self.lam < 1.0:
            raise ParameterError("lambda must lie strictly in (0, 1)")
        if not 1 <= self.k <= self.n:
            raise ParameterError(f"k must lie in [1, {self.n}]")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")

    def source_spec(self) -> SourceSpec:
        return SourceSpec(
            kind=self.source_kind,
            n=self.n,
            rho=self.rho,
            class_count=self.class_count,
            seed=self.seed,
        )


@dataclass(frozen=True)
class SweepRow:
    scheme: str
    snr_db: float
    trials: int
    feature_mse: float
    feature_mse_se: float
    data_mse: float
    data_mse_se: float
    system_distortion: float
    fer: float
    task_accuracy: float
    n_analog: int
    n_digital: int
    p_a_fraction: float
    seed: int


# ---------------------------------------------------------------------------
# config file parsing
# ---------------------------------------------------------------------------

def parse_snr_spec(text: str) -> tuple:
    """Grid spec: 'a:b:step' (inclusive), a comma list, or a single value."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad snr range {text!r}, expected a:b:step")
        a, b, step = (float(p) for p in parts)
        if step <= 0:
            raise ConfigError("snr step must be positive")
        count = int(np.floor((b - a) / step + 1e-9)) + 1
        return tuple(float(a + i * step) for i in range(max(count, 0)))
    return tuple(float(p) for p in text.split(",") if p.strip())


_CONFIG_CASTS = {
    "scheme": str,
    "channel": str,
    "snr": parse_snr_spec,
    "trials": int,
    "lambda": float,
    "seed": int,
    "out": str,
    "workers": int,
    "source": str,
    "n": int,
    "rho": float,
    "classes": int,
    "image": str,
    "k": int,
    "bits": int,
    "pattern": str,
    "modulation": str,
    "total_uses": int,
    "total_power": float,
    "p_a_fraction": float,
    "floor_threshold": float,
    "fer_table": str,
    # model-update session keys
    "float_count": int,
    "int_count": int,
    "int_bits": int,
    "flip_prob": float,
    "float_noise_std": float,
    "p_hat": float,
}

_KEY_TO_FIELD = {
    "lambda": "lam",
    "snr": "snr_grid",
    "source": "source_kind",
    "classes": "class_count",
    "bits": "quant_bits",
}


def parse_config_text(text: str) -> dict:
    """Flat key=value lines with '#' comments; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_CASTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_CASTS[key](val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return values


def config_from_file(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    fields = {}
    for key, val in values.items():
        if key in ("float_count", "int_count", "int_bits", "flip_prob",
                   "float_noise_std", "p_hat"):
            continue  # session-only keys, consumed by the seu subcommand
        fields[_KEY_TO_FIELD.get(key, key)] = val
    cfg = ExperimentConfig(**fields)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# link setup shared by all schemes
# ---------------------------------------------------------------------------

@dataclass
class LinkSetup:
    prior_vars: np.ndarray
    task: Optional[codec.TaskModel]
    kept: np.ndarray             # selected coefficient indices (k,)
    quant: dig.QuantizerSpec
    code: dig.CodeSpec
    n_analog: int
    n_digital: int
    power_analog: float
    power_digital: float
    image_blocks: Optional[list] = None

    @property
    def analog_per_dim(self) -> float:
        return self.power_analog / self.n_analog / 2.0 if self.n_analog else 0.0

    @property
    def digital_amplitude(self) -> float:
        if not self.n_digital:
            return 0.0
        return float(np.sqrt(self.power_digital / self.n_digital))


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def build_link(config: ExperimentConfig) -> LinkSetup:
    """Calibrate priors, build the task model, and fix the channel split."""
    config.validate()
    spec = config.source_spec()
    image_blocks = None
    if config.source_kind == "image_blocks":
        if not config.image:
            raise ConfigError("image_blocks source needs an image path")
        image_blocks = load_pgm(config.image)
        prior_vars = codec.prior_vars_from_blocks(image_blocks)
        task = None
    else:
        prior_vars = codec.calibrate_prior_vars(spec)
        task = (
            codec.build_task_model(config.n, config.class_count)
            if config.source_kind == "class_mixture"
            else None
        )
    kept = codec.selection_indices(config.n, config.k, prior_vars, task)
    quant = dig.QuantizerSpec.from_prior_vars(prior_vars, config.quant_bits)
    code = dig.CodeSpec(config.pattern)

    if config.scheme == "analog":
        n_a, n_d = -(-config.k // 2), 0
        p_a, p_d = config.total_power, 0.0
    elif config.scheme == "digital":
        wire_bits = code.encoded_len(config.n * config.quant_bits) + code.parity_len(
            config.n * config.quant_bits
        )
        n_a, n_d = 0, dig.symbol_count(wire_bits, config.modulation)
        p_a, p_d = 0.0, config.total_power
    else:
        n_a = -(-config.k // 2)
        n_d = dig.symbol_count(
            code.parity_len(config.n * config.quant_bits), config.modulation
        )
        p_a = config.p_a_fraction * config.total_power
        p_d = config.total_power - p_a

    budget = ChannelBudget(
        total_uses=config.total_uses,
        n_analog=n_a,
        n_digital=n_d,
        power_total=config.total_power,
        power_analog=p_a,
        power_digital=p_d,
    )
    budget.validate()  # infeasible plans must fail before any trial runs
    return LinkSetup(
        prior_vars=prior_vars,
        task=task,
        kept=kept,
        quant=quant,
        code=code,
        n_analog=n_a,
        n_digital=n_d,
        power_analog=p_a,
        power_digital=p_d,
        image_blocks=image_blocks,
    )


# ---------------------------------------------------------------------------
# batched per-trial pipelines
# ---------------------------------------------------------------------------

def _draw_trials(
    config: ExperimentConfig,
    setup: LinkSetup,
    snr_db: float,
    point_index: int,
    t0: int,
    t1: int,
):
    """Per-trial source blocks, channel gains, and noise, drawn in the same
    order a sequential run would use."""
    count = t1 - t0
    src_seed = _derive_seed(config.seed, point_index, 0)
    ch_seed = _derive_seed(config.seed, point_index, 1)
    spec = replace(config.source_spec(), seed=src_seed)

    samples = np.empty((count, config.n))
    labels = np.full(count, -1, dtype=np.int64)
    h = np.empty(count, dtype=np.complex128)
    w_a = np.zeros((count, setup.n_analog), dtype=np.complex128)
    w_d = np.zeros((count, setup.n_digital), dtype=np.complex128)
    noise_var = 10.0 ** (-snr_db / 10.0)
    sigma = np.sqrt(noise_var / 2.0)

    for i, t in enumerate(range(t0, t1)):
        if setup.image_blocks is not None:
            block = setup.image_blocks[t % len(setup.image_blocks)]
        else:
            block = gen_block(spec, t)
        samples[i] = block.samples
        labels[i] = -1 if block.label is None else block.label
        state = ChannelState.for_block(snr_db, config.channel, ch_seed, t)
        h[i] = state.h
        if setup.n_analog:
            na = state.rng.standard_normal(2 * setup.n_analog) * sigma
            w_a[i] = na[0::2] + 1j * na[1::2]
        if setup.n_digital:
            nd = state.rng.standard_normal(2 * setup.n_digital) * sigma
            w_d[i] = nd[0::2] + 1j * nd[1::2]
    return samples, labels, h, w_a, w_d, noise_var


def _analog_stage(setup, full, h, w_a, noise_var):
    """Vectorized analog transmit + MMSE decode over a trial batch."""
    priors = setup.prior_vars[setup.kept]
    gains = ana.analog_gains(priors, setup.analog_per_dim)
    tx = full[:, setup.kept]
    x_a = ana.pack_iq(gains * tx)
    y_a = h[:, None] * x_a + w_a[:, : x_a.shape[1]]
    obs = ana.unpack_iq(np.conj(h)[:, None] * y_a, len(setup.kept))
    h_sq = (np.abs(h) ** 2)[:, None]
    est, err_var = ana.mmse_estimate(obs, gains, priors, h_sq, noise_var / 2.0)
    est_full = np.zeros_like(full)
    est_full[:, setup.kept] = est
    err_full = np.broadcast_to(setup.prior_vars, full.shape).copy()
    err_full[:, setup.kept] = err_var
    return est_full, err_full


def _metrics(setup, config, full, samples, labels, coeff_hat, crc_fail):
    x_hat = codec.synthesize_full(coeff_hat)
    diff_f = coeff_hat[:, setup.kept] - full[:, setup.kept]
    feature_mse = np.mean(diff_f * diff_f, axis=1)
    diff_d = x_hat - samples
    data_mse = np.mean(diff_d * diff_d, axis=1)
    if setup.task is not None and np.all(labels >= 0):
        task_ok = (codec.classify(coeff_hat, setup.task) == labels).astype(np.float64)
    else:
        task_ok = np.full(len(samples), np.nan)
    return feature_mse, data_mse, task_ok, crc_fail


def run_chunk(
    config: ExperimentConfig,
    setup: LinkSetup,
    snr_db: float,
    point_index: int,
    t0: int,
    t1: int,
):
    """Per-trial metric arrays for trials [t0, t1) of one sweep point."""
    samples, labels, h, w_a, w_d, noise_var = _draw_trials(
        config, setup, snr_db, point_index, t0, t1
    )
    count = t1 - t0
    full = codec.analyze(samples)
    state = ChannelState(
        snr_db=snr_db, noise_var=noise_var, h=1.0 + 0.0j, seed=0, rng=None
    )

    if config.scheme == "analog":
        est_full, _ = _analog_stage(setup, full, h, w_a, noise_var)
        return _metrics(
            setup, config, full, samples, labels, est_full, np.zeros(count, dtype=bool)
        )

    n_info = config.n * config.quant_bits
    if config.scheme == "digital":
        cells = dig.quantize_cells(full, setup.quant)
        info = dig.cells_to_bits(cells, config.quant_bits)
        stream = np.concatenate([info, dig.crc16(info)], axis=1)
        sys_bits, parity = dig.rsc_encode(stream)
        keep = dig.puncture_keep_indices(sys_bits.shape[1], config.pattern)
        wire = np.concatenate([sys_bits, parity[:, keep]], axis=1)
        x_d = dig.modulate(wire, config.modulation, setup.digital_amplitude)
        y_d = h[:, None] * x_d + w_d[:, : x_d.shape[1]]
        llrs = dig.demodulate(
            y_d,
            state,
            config.modulation,
            setup.digital_amplitude,
            n_bits=wire.shape[1],
            h=h[:, None],
        )
        enc_len = sys_bits.shape[1]
        par_full = dig.assemble_parity_llrs(
            llrs[:, enc_len:], enc_len, config.pattern
        )
        decided = dig.viterbi_decode(llrs[:, :enc_len], par_full)
        info_rx = decided[:, :n_info]
        crc_ok = np.all(
            dig.crc16(info_rx) == decided[:, n_info : n_info + dig.CRC_BITS], axis=1
        )
        coeff_hat = dig.dequantize_cells(
            dig.bits_to_cells(info_rx, config.quant_bits), setup.quant
        )
        coeff_hat[~crc_ok] = 0.0  # decode failure emits the zero block
        return _metrics(setup, config, full, samples, labels, coeff_hat, ~crc_ok)

    # full hybrid pipeline
    est_full, err_full = _analog_stage(setup, full, h, w_a, noise_var)
    cells_tx = dig.quantize_cells(full, setup.quant)
    info = dig.cells_to_bits(cells_tx, config.quant_bits)
    frame = dig.dsc_encode(info, setup.code, config.modulation)
    x_d = dig.modulate(frame.parity_bits, config.modulation, setup.digital_amplitude)
    y_d = h[:, None] * x_d + w_d[:, : x_d.shape[1]]
    parity_llrs = dig.demodulate(
        y_d,
        state,
        config.modulation,
        setup.digital_amplitude,
        n_bits=frame.parity_bits.shape[1],
        h=h[:, None],
    )
    side = dig.side_info_llrs(est_full, err_full, setup.quant)
    decoded, crc_ok = dig.dsc_decode(side, parity_llrs, setup.code)
    decoded_cells = dig.bits_to_cells(decoded, config.quant_bits)
    observed = np.zeros(config.n, dtype=bool)
    observed[setup.kept] = True
    refined = dig.refine(est_full, decoded_cells, setup.quant, crc_ok, observed)
    return _metrics(setup, config, full, samples, labels, refined, ~crc_ok)


def _chunk_bounds(trials: int, workers: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, trials, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_point(
    config: ExperimentConfig, snr_db: float, point_index: Optional[int] = None
) -> SweepRow:
    """One sweep point: per-trial pipeline runs and Monte-Carlo aggregation."""
    setup = build_link(config)
    return _run_point_with_setup(config, setup, snr_db, point_index)


def _run_point_with_setup(
    config: ExperimentConfig,
    setup: LinkSetup,
    snr_db: float,
    point_index: Optional[int] = None,
) -> SweepRow:
    if point_index is None:
        grid = list(config.snr_grid)
        point_index = grid.index(snr_db) if snr_db in grid else 0
    bounds = _chunk_bounds(config.trials, config.workers)
    if config.workers == 1 or len(bounds) == 1:
        parts = [
            run_chunk(config, setup, snr_db, point_index, a, b) for a, b in bounds
        ]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [
                pool.submit(run_chunk, config, setup, snr_db, point_index, a, b)
                for a, b in bounds
            ]
            parts = [f.result() for f in futures]
    feature = np.concatenate([p[0] for p in parts])
    data = np.concatenate([p[1] for p in parts])
    task_ok = np.concatenate([p[2] for p in parts])
    fails = np.concatenate([p[3] for p in parts])

    def se(x):
        return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0

    f_mean, d_mean = float(np.mean(feature)), float(np.mean(data))
    return SweepRow(
        scheme=config.scheme,
        snr_db=float(snr_db),
        trials=config.trials,
        feature_mse=f_mean,
        feature_mse_se=se(feature),
        data_mse=d_mean,
        data_mse_se=se(data),
        system_distortion=config.lam * f_mean + (1.0 - config.lam) * d_mean,
        fer=float(np.mean(fails)),
        task_accuracy=float(np.mean(task_ok)) if not np.all(np.isnan(task_ok)) else float("nan"),
        n_analog=setup.n_analog,
        n_digital=setup.n_digital,
        p_a_fraction=(
            setup.power_analog / config.total_power if config.total_power else 0.0
        ),
        seed=config.seed,
    )


# ---------------------------------------------------------------------------
# sweeps and CSV
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def rows_to_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(SWEEP_HEADER) + "\n")
        for r in rows:
            fh.write(
                ",".join(
                    _fmt(v)
                    for v in (
                        r.scheme,
                        r.snr_db,
                        r.trials,
                        r.feature_mse,
                        r.feature_mse_se,
                        r.data_mse,
                        r.data_mse_se,
                        r.system_distortion,
                        r.fer,
                        r.task_accuracy,
                        r.n_analog,
                        r.n_digital,
                        r.p_a_fraction,
                        r.seed,
                    )
                )
                + "\n"
            )


def run_sweep(config: ExperimentConfig, verbose: bool = False) -> list[SweepRow]:
    """One SweepRow per grid point, in grid order; writes config.out."""
    config.validate()
    setup = build_link(config)
    rows = []
    for idx, snr in enumerate(config.snr_grid):
        row = _run_point_with_setup(config, setup, snr, idx)
        rows.append(row)
        if verbose:
            print(
                f"[{config.scheme}] SNR {snr:5.1f} dB  data_mse {row.data_mse:.4g}"
                f"  feature_mse {row.feature_mse:.4g}  fer {row.fer:.3f}"
            )
    rows_to_csv(rows, config.out)
    return rows


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise ParameterError(f"unexpected sweep header in {path}")
        out = []
        for rec in reader:
            row = dict(rec)
            for key in SWEEP_HEADER:
                if key not in ("scheme",):
                    row[key] = float(rec[key])
            out.append(row)
    return out


# ---------------------------------------------------------------------------
# qualitative-shape detectors
# ---------------------------------------------------------------------------

def detect_effects(rows) -> dict:
    """Cliff / saturation / graceful-improvement report for a sweep.

    rows may be a CSV path, SweepRow objects, or dicts. A cliff pair is two
    adjacent grid points whose data_mse jumps by CLIFF_FACTOR going down in
    SNR; the reported cliff_snr is the upper point of the highest such pair.
    Saturation reports the top point's data_mse when the top two points agree
    within SATURATION_REL. graceful is true when the hybrid scheme beats the
    analog scheme by GRACEFUL_FACTOR at the top shared grid point.
    """
    if isinstance(rows, (str, bytes)) or hasattr(rows, "__fspath__"):
        rows = read_sweep_csv(rows)
    per_scheme: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        scheme = r.scheme if isinstance(r, SweepRow) else r["scheme"]
        snr = r.snr_db if isinstance(r, SweepRow) else r["snr_db"]
        mse = r.data_mse if isinstance(r, SweepRow) else r["data_mse"]
        per_scheme.setdefault(scheme, []).append((float(snr), float(mse)))

    report = {"schemes": {}, "graceful": False}
    for scheme, pts in per_scheme.items():
        pts.sort()
        snrs = [p[0] for p in pts]
        mses = [p[1] for p in pts]
        cliff = None
        for i in range(len(pts) - 1):
            if mses[i] >= CLIFF_FACTOR * mses[i + 1] > 0:
                cliff = snrs[i + 1]  # upper edge of the jump
        saturation = None
        if len(pts) >= 2 and mses[-1] > 0:
            if abs(mses[-2] - mses[-1]) / mses[-1] < SATURATION_REL:
                saturation = mses[-1]
        report["schemes"][scheme] = {
            "cliff_snr": cliff,
            "saturation_floor": saturation,
        }
    if "da" in per_scheme and "analog" in per_scheme:
        top_da = max(per_scheme["da"])
        top_an = max(per_scheme["analog"])
        if top_da[0] == top_an[0]:
            report["graceful"] = bool(top_da[1] <= GRACEFUL_FACTOR * top_an[1])
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# FER calibration
# ---------------------------------------------------------------------------

def calibrate_fer(
    channel: str = "rayleigh",
    patterns=("R12", "R23", "R34"),
    bits_grid=(1, 2, 3, 4, 5, 6),
    snr_grid=tuple(float(s) for s in range(0, 25, 2)),
    trials: int = 2000,
    seed: int = 0xFE12,
    verbose: bool = False,
) -> FerTable:
    """Measure decode-failure rates of the hybrid pipeline cell by cell.

    Each cell runs the full DA chain at equal per-use power (1.0) on both
    partitions, so the table's snr axis is the per-use SNR the digital
    partition actually sees at calibration time.
    """
    table = FerTable()
    cell_index = 0
    for pattern in patterns:
        for bits in bits_grid:
            for snr in snr_grid:
                cfg = ExperimentConfig(
                    scheme="da",
                    channel=channel,
                    snr_grid=(snr,),
                    trials=trials,
                    seed=_derive_seed(seed, cell_index),
                    pattern=pattern,
                    quant_bits=bits,
                    total_uses=10**6,  # calibration has no use constraint
                    total_power=1.0,
                )
                setup = build_link(cfg)
                # equal per-use power of 1.0 on both partitions
                setup.power_analog = float(setup.n_analog)
                setup.power_digital = float(setup.n_digital)
                parts = run_chunk(cfg, setup, snr, 0, 0, trials)
                p_f = float(np.mean(parts[3]))
                table.add(pattern, bits, snr, p_f, trials, seed)
                if verbose:
                    print(f"pattern {pattern} B={bits} snr {snr:5.1f}: p_f {p_f:.4f}")
                cell_index += 1
    return table
