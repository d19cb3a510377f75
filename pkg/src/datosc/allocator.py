"""Rate/power allocation: model-based expected distortions, an analog-first
greedy search, and the exhaustive oracle it is judged against.

The objective is the weighted system distortion lambda * D_a + (1-lambda) *
D_d, where D_a is the modelled feature MSE of the analog branch and D_d the
modelled data MSE after digital refinement. Decode-failure probabilities
come from an empirical calibration table (FerTable) rather than an analytic
bound, looked up at the digital partition's effective per-use SNR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .analog import analog_gains, mmse_error_vars
from .channel import ChannelBudget
from .codec import TaskModel, selection_indices
from .digital import QuantizerSpec, bits_per_symbol, parity_length
from .errors import InfeasibleAllocationError, ParameterError

PATTERNS = ("R12", "R23", "R34")
QUANT_BITS_GRID = (1, 2, 3, 4, 5, 6)
POWER_GRID_POINTS = 21
POWER_SHARE_LO = 0.05
POWER_SHARE_HI = 0.95
GOLDEN_ITERS = 48

# Fixed 64-point Gauss rule for E[f(X)], X ~ Exp(1), via the substitution
# X = -ln(u) with Gauss-Legendre nodes on (0, 1). Unlike Gauss-Laguerre this
# stays accurate when f varies on a much smaller scale than the mean fade.
_GL_X, _GL_W = leggauss(64)
FADE_NODES = -np.log(0.5 * (_GL_X + 1.0))
FADE_WEIGHTS = 0.5 * _GL_W


@dataclass(frozen=True)
class AllocationPlan:
    k: int
    n_analog: int
    n_digital: int
    power_analog: float
    power_digital: float
    quant_bits: int           # 0 when the digital branch is off
    pattern: Optional[str]    # None when the digital branch is off
    lam: float
    n: int

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ParameterError(f"lambda must lie strictly in (0, 1), got {self.lam}")

    @property
    def digital_on(self) -> bool:
        return self.n_digital > 0

    @property
    def analog_code_rate(self) -> float:
        return self.n / self.n_analog

    @property
    def digital_code_rate(self) -> Optional[float]:
        return self.n / self.n_digital if self.n_digital else None

    def budget(self, total_uses: int, power_total: float) -> ChannelBudget:
        return ChannelBudget(
            total_uses=total_uses,
            n_analog=self.n_analog,
            n_digital=self.n_digital,
            power_total=power_total,
            power_analog=self.power_analog,
            power_digital=self.power_digital,
        )


@dataclass
class AllocatorContext:
    """Source statistics and link settings the distortion models need."""

    n: int
    prior_vars: np.ndarray
    task: Optional[TaskModel] = None
    modulation: str = "qpsk"
    floor_threshold: float = 0.05
    channel: str = "rayleigh"
    _kept_cache: dict = field(default_factory=dict, repr=False)

    def kept_indices(self, k: int) -> np.ndarray:
        if k not in self._kept_cache:
            self._kept_cache[k] = selection_indices(
                self.n, k, self.prior_vars, self.task
            )
        return self._kept_cache[k]

    def kept_priors(self, k: int) -> np.ndarray:
        return self.prior_vars[self.kept_indices(k)]


class FerTable:
    """Empirical decode-failure probabilities on a (pattern, B, snr) grid.

    Lookups interpolate log(p) linearly in snr_db over a non-increasing
    envelope of the calibrated points (Monte-Carlo upticks are flattened so
    the distortion model stays monotone in SNR), clamped at the grid edges.
    Probabilities are floored at 1/(2*trials) so log-interpolation is defined
    for cells that saw no failures.
    """

    def __init__(self):
        self._cells: dict[tuple[str, int], dict] = {}

    def add(self, pattern: str, quant_bits: int, snr_db, p_f, trials: int, seed: int):
        key = (pattern, int(quant_bits))
        cell = self._cells.setdefault(
            key, {"snr": [], "p": [], "trials": trials, "seed": seed}
        )
        cell["snr"].append(float(snr_db))
        cell["p"].append(float(p_f))

    def _prepared(self, key):
        cell = self._cells[key]
        if "env" not in cell:
            order = np.argsort(cell["snr"])
            snr = np.asarray(cell["snr"])[order]
            p = np.asarray(cell["p"])[order]
            floor = 0.5 / max(cell["trials"], 1)
            env = np.minimum.accumulate(np.clip(p, floor, 1.0))
            cell["grid"] = snr
            cell["env"] = env
        return cell

    def keys(self):
        return sorted(self._cells.keys())

    def raw(self, pattern: str, quant_bits: int) -> tuple[np.ndarray, np.ndarray, int]:
        cell = self._prepared((pattern, quant_bits))
        return cell["grid"], np.asarray(cell["p"])[np.argsort(cell["snr"])], cell["trials"]

    def lookup(self, pattern: str, quant_bits: int, snr_db: float) -> float:
        key = (pattern, int(quant_bits))
        if key not in self._cells:
            raise ParameterError(f"no calibration for pattern={pattern}, B={quant_bits}")
        cell = self._prepared(key)
        grid, env = cell["grid"], cell["env"]
        s = np.clip(snr_db, grid[0], grid[-1])
        logp = np.interp(s, grid, np.log(env))
        return float(np.exp(logp))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["pattern", "B", "snr_db", "p_f", "trials", "seed"])
            for (pattern, bits), cell in sorted(self._cells.items()):
                order = np.argsort(cell["snr"])
                for i in order:
                    writer.writerow(
                        [
                            pattern,
                            bits,
                            f"{cell['snr'][i]:g}",
                            f"{cell['p'][i]:.9g}",
                            cell["trials"],
                            cell["seed"],
                        ]
                    )

    @classmethod
    def from_csv_text(cls, text: str) -> "FerTable":
        table = cls()
        rows = [r for r in csv.reader(text.splitlines()) if r and not r[0].startswith("#")]
        header = rows[0]
        if header != ["pattern", "B", "snr_db", "p_f", "trials", "seed"]:
            raise ParameterError(f"unexpected FER table header: {header}")
        for row in rows[1:]:
            table.add(
                row[0], int(row[1]), float(row[2]), float(row[3]), int(row[4]), int(row[5])
            )
        return table

    @classmethod
    def load_csv(cls, path) -> "FerTable":
        with open(path, newline="") as fh:
            return cls.from_csv_text(fh.read())


def default_fer_table(channel: str = "rayleigh") -> FerTable:
    """Calibration table shipped with the package (regenerate: calibrate-fer)."""
    from importlib.resources import files

    resource = files("datosc").joinpath("data", f"fer_{channel}.csv")
    return FerTable.from_csv_text(resource.read_text())


def _per_dim_power(power: float, uses: int) -> float:
    # two real dimensions per complex use
    return power / uses / 2.0


def model_analog_distortion(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext
) -> float:
    """Expected feature MSE of the analog branch (mean posterior variance).

    Rayleigh averages the closed-form error variance over |h|^2 ~ Exp(1)
    with the fixed 64-point rule; AWGN evaluates it at |h|^2 = 1.
    """
    priors = ctx.kept_priors(plan.k)
    per_dim = _per_dim_power(plan.power_analog, plan.n_analog)
    gains = analog_gains(priors, per_dim)
    nv_dim = 10.0 ** (-snr_db / 10.0) / 2.0
    if ctx.channel == "awgn":
        return float(np.mean(mmse_error_vars(gains, priors, 1.0, nv_dim)))
    err = mmse_error_vars(
        gains[None, :], priors[None, :], FADE_NODES[:, None], nv_dim
    )
    return float(np.mean(FADE_WEIGHTS @ err))


def _coefficient_analog_errors(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext
) -> np.ndarray:
    """Modelled per-coefficient analog error over all n indices (discarded
    coefficients sit at their prior variance)."""
    priors = ctx.kept_priors(plan.k)
    per_dim = _per_dim_power(plan.power_analog, plan.n_analog)
    gains = analog_gains(priors, per_dim)
    nv_dim = 10.0 ** (-snr_db / 10.0) / 2.0
    if ctx.channel == "awgn":
        kept_err = mmse_error_vars(gains, priors, 1.0, nv_dim)
    else:
        err = mmse_error_vars(
            gains[None, :], priors[None, :], FADE_NODES[:, None], nv_dim
        )
        kept_err = FADE_WEIGHTS @ err
    full = ctx.prior_vars.astype(np.float64).copy()
    full[ctx.kept_indices(plan.k)] = kept_err
    return full


def model_fallback_distortion(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext
) -> float:
    """Expected data MSE when the digital branch contributes nothing."""
    return float(np.mean(_coefficient_analog_errors(plan, snr_db, ctx)))


def _per_fade_coefficient_errors(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext
) -> np.ndarray:
    """Per-quadrature-node, per-coefficient analog error over all n indices."""
    priors = ctx.kept_priors(plan.k)
    per_dim = _per_dim_power(plan.power_analog, plan.n_analog)
    gains = analog_gains(priors, per_dim)
    nv_dim = 10.0 ** (-snr_db / 10.0) / 2.0
    kept_err = mmse_error_vars(
        gains[None, :], priors[None, :], FADE_NODES[:, None], nv_dim
    )
    full = np.broadcast_to(ctx.prior_vars, (len(FADE_NODES), ctx.n)).copy()
    full[:, ctx.kept_indices(plan.k)] = kept_err
    return full


def model_digital_distortion(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext, fer: FerTable
) -> float:
    """Expected data MSE of the refined output.

    Per fade realization, decode success caps each coefficient error by its
    quantizer cell (high-rate approximation delta^2/12) and failure falls
    back to the analog estimate. The failure probability p_f comes from the
    calibration table at the digital partition's effective per-use SNR; under
    quasi-static fading the decoder fails in the deepest fades, so the
    failure mass sits below the p_f-quantile of |h|^2 when averaging.
    """
    if not plan.digital_on:
        return model_fallback_distortion(plan, snr_db, ctx)
    quant = QuantizerSpec.from_prior_vars(ctx.prior_vars, plan.quant_bits)
    cell_mse = quant.deltas**2 / 12.0
    eff_snr = snr_db + 10.0 * np.log10(plan.power_digital / plan.n_digital)
    p_f = fer.lookup(plan.pattern, plan.quant_bits, eff_snr)
    if ctx.channel == "awgn":
        analog_err = _coefficient_analog_errors(plan, snr_db, ctx)
        refined = float(np.mean(np.minimum(cell_mse, analog_err)))
        return (1.0 - p_f) * refined + p_f * float(np.mean(analog_err))
    fade_err = _per_fade_coefficient_errors(plan, snr_db, ctx)        # (64, n)
    refined = np.mean(np.minimum(cell_mse, fade_err), axis=1)         # (64,)
    fallback = np.mean(fade_err, axis=1)
    fail = FADE_NODES < -np.log1p(-min(p_f, 1.0 - 1e-12))             # deepest fades
    per_fade = np.where(fail, fallback, refined)
    return float(FADE_WEIGHTS @ per_fade)


def system_distortion(
    plan: AllocationPlan, snr_db: float, ctx: AllocatorContext, fer: FerTable
) -> float:
    d_a = model_analog_distortion(plan, snr_db, ctx)
    d_d = model_digital_distortion(plan, snr_db, ctx, fer)
    return plan.lam * d_a + (1.0 - plan.lam) * d_d


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

def candidate_k_grid(n: int) -> list[int]:
    return sorted({max(1, n // 8), max(1, n // 4), max(1, n // 2), n})


def digital_uses(n: int, quant_bits: int, pattern: str, modulation: str) -> int:
    """Channel uses the parity of an n-coefficient frame occupies."""
    parity = parity_length(n * quant_bits, pattern)
    return -(-parity // bits_per_symbol(modulation))


def _digital_candidates(
    n: int, n_analog: int, total_uses: int, modulation: str
) -> list[tuple[int, str, int]]:
    out = []
    for bits in QUANT_BITS_GRID:
        for pattern in PATTERNS:
            n_d = digital_uses(n, bits, pattern, modulation)
            if n_analog + n_d <= total_uses:
                out.append((bits, pattern, n_d))
    return out


def _make_plan(k, n_analog, n_digital, p_a, p_total, bits, pattern, lam, n):
    return AllocationPlan(
        k=k,
        n_analog=n_analog,
        n_digital=n_digital,
        power_analog=p_a,
        power_digital=(p_total - p_a) if n_digital else 0.0,
        quant_bits=bits,
        pattern=pattern,
        lam=lam,
        n=n,
    )


def _golden_min(fn, lo: float, hi: float, iters: int = GOLDEN_ITERS):
    """Deterministic golden-section minimizer; returns (x, fn(x))."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return (c, fc) if fc <= fd else (d, fd)


def choose_analog_floor_k(
    budget: ChannelBudget, snr_db: float, ctx: AllocatorContext, lam: float
) -> tuple[int, int]:
    """Smallest candidate k whose analog-only feature MSE meets the floor."""
    best = None
    for k in candidate_k_grid(ctx.n):
        n_a = -(-k // 2)
        if n_a > budget.total_uses:
            continue
        probe = _make_plan(
            k, n_a, 0, budget.power_total, budget.power_total, 0, None, lam, ctx.n
        )
        mse = model_analog_distortion(probe, snr_db, ctx)
        if best is None or mse < best[1]:
            best = (k, mse)
        if mse <= ctx.floor_threshold:
            return k, n_a
    if best is None:
        raise InfeasibleAllocationError(
            f"binding constraint: total_uses={budget.total_uses} cannot carry "
            f"any candidate k from {candidate_k_grid(ctx.n)}"
        )
    raise InfeasibleAllocationError(
        f"binding constraint: analog feature-MSE floor {ctx.floor_threshold} "
        f"unreachable at {snr_db} dB (best candidate k={best[0]} reaches {best[1]:.4g})"
    )


def allocate_greedy(
    budget: ChannelBudget,
    snr_db: float,
    lam: float,
    ctx: AllocatorContext,
    fer: FerTable,
) -> AllocationPlan:
    """Analog-rate-first greedy allocation.

    Step 1 establishes the smallest k meeting the analog feature-MSE floor:
    that reserves the analog rate the task needs before any digital
    spending, and larger k stay admissible. Step 2, per admissible k, picks
    the (B, pattern) tuple (or digital-off) minimizing the modelled system
    distortion at a use-proportional power split; step 3 refines the winning
    tuple's power split by golden-section search. Returns the best plan
    found, so the search stays a strict subset of allocate_exhaustive.
    """
    p_total = budget.power_total
    k_floor, _ = choose_analog_floor_k(budget, snr_db, ctx, lam)

    best = None  # (cost, key, plan)
    for k in candidate_k_grid(ctx.n):
        if k < k_floor:
            continue
        n_a = -(-k // 2)
        if n_a > budget.total_uses:
            continue
        candidates: list[tuple[int, Optional[str], int]] = [(0, None, 0)]
        candidates += _digital_candidates(ctx.n, n_a, budget.total_uses, ctx.modulation)

        def provisional(bits, pattern, n_d):
            if n_d == 0:
                return _make_plan(k, n_a, 0, p_total, p_total, 0, None, lam, ctx.n)
            p_a = p_total * n_a / (n_a + n_d)
            return _make_plan(k, n_a, n_d, p_a, p_total, bits, pattern, lam, ctx.n)

        # rank tuples by their best cost over a coarse power scan (a single
        # use-proportional split mis-ranks tuples whose optimum sits at an
        # extreme split)
        coarse = np.linspace(0.2, 0.8, 5) * p_total

        def tuple_score(bits, pattern, n_d):
            if n_d == 0:
                return system_distortion(provisional(0, None, 0), snr_db, ctx, fer)
            return min(
                system_distortion(
                    _make_plan(k, n_a, n_d, p_a, p_total, bits, pattern, lam, ctx.n),
                    snr_db,
                    ctx,
                    fer,
                )
                for p_a in coarse
            )

        scored = [
            (tuple_score(b, pat, n_d), i)
            for i, (b, pat, n_d) in enumerate(candidates)
        ]
        _, best_i = min(scored)
        bits, pattern, n_d = candidates[best_i]

        if n_d == 0:
            plan = provisional(0, None, 0)
            cost = system_distortion(plan, snr_db, ctx, fer)
            key = (k, 0, -1, p_total)
        else:

            def cost_at(p_a: float) -> float:
                return system_distortion(
                    _make_plan(k, n_a, n_d, p_a, p_total, bits, pattern, lam, ctx.n),
                    snr_db,
                    ctx,
                    fer,
                )

            p_a_best, cost = _golden_min(
                cost_at, POWER_SHARE_LO * p_total, POWER_SHARE_HI * p_total
            )
            plan = _make_plan(
                k, n_a, n_d, p_a_best, p_total, bits, pattern, lam, ctx.n
            )
            key = (k, bits, PATTERNS.index(pattern), float(p_a_best))
        if best is None or (cost, key) < (best[0], best[1]):
            best = (cost, key, plan)
    return best[2]


def allocate_exhaustive(
    budget: ChannelBudget,
    snr_db: float,
    lam: float,
    ctx: AllocatorContext,
    fer: FerTable,
) -> AllocationPlan:
    """Full grid search over (k, B, pattern, power split).

    Every tuple is scored on the 21-point power grid and with the same
    golden-section refinement the greedy search uses, so the exhaustive cost
    is never above the greedy cost. Ties break lexicographically on
    (k, B, pattern, P_a); digital-off sorts as B=0.
    """
    p_total = budget.power_total
    power_grid = np.linspace(
        POWER_SHARE_LO * p_total, POWER_SHARE_HI * p_total, POWER_GRID_POINTS
    )
    best = None  # (cost, key, plan)
    for k in candidate_k_grid(ctx.n):
        n_a = -(-k // 2)
        if n_a > budget.total_uses:
            continue
        tuples = [(0, None, 0)]
        tuples += _digital_candidates(ctx.n, n_a, budget.total_uses, ctx.modulation)
        for bits, pattern, n_d in tuples:
            pat_idx = -1 if pattern is None else PATTERNS.index(pattern)
            if n_d == 0:
                plan = _make_plan(k, n_a, 0, p_total, p_total, 0, None, lam, ctx.n)
                cost = system_distortion(plan, snr_db, ctx, fer)
                entries = [(cost, (k, bits, pat_idx, p_total), plan)]
            else:

                def cost_at(p_a):
                    return system_distortion(
                        _make_plan(k, n_a, n_d, p_a, p_total, bits, pattern, lam, ctx.n),
                        snr_db,
                        ctx,
                        fer,
                    )

                entries = []
                for p_a in power_grid:
                    entries.append(
                        (
                            cost_at(p_a),
                            (k, bits, pat_idx, float(p_a)),
                            _make_plan(
                                k, n_a, n_d, float(p_a), p_total, bits, pattern, lam, ctx.n
                            ),
                        )
                    )
                p_ref, c_ref = _golden_min(
                    cost_at, POWER_SHARE_LO * p_total, POWER_SHARE_HI * p_total
                )
                entries.append(
                    (
                        c_ref,
                        (k, bits, pat_idx, float(p_ref)),
                        _make_plan(
                            k, n_a, n_d, float(p_ref), p_total, bits, pattern, lam, ctx.n
                        ),
                    )
                )
            for cost, key, plan in entries:
                if best is None or (cost, key) < (best[0], best[1]):
                    best = (cost, key, plan)
    if best is None:
        raise InfeasibleAllocationError(
            f"binding constraint: total_uses={budget.total_uses} cannot carry "
            f"any candidate k from {candidate_k_grid(ctx.n)}"
        )
    return best[2]
