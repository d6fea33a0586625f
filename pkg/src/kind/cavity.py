"""Coupled electromagnetic/mechanical cavity simulation.

The transmitted field envelope (I/Q, normalized so the nominal forward drive
is 1.0) obeys a first-order linear system rotated by the instantaneous
detuning; each mechanical mode is a damped oscillator forced by the squared
field magnitude (radiation pressure) and by external disturbances.

Unit convention: a mode's ``pos`` is its detuning contribution in Hz, so the
coupling ``k_n`` is Hz per normalized V^2 and Table-style magnitudes apply
directly; the RF equation receives the total detuning converted to rad/s.
External forces are in Hz/s^2. The output series is detuning in Hz.

``simulate`` co-integrates the full coupled state with a single RK4 per
internal step (default 50x oversampling of the output rate). The inner loop
is JIT-compiled when numba is available; the pure-Python fallback computes
the identical arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, SimulationDiverged
from .timeseries import STATIONARY, TRANSIENT, TimeSeries

TWO_PI = 2.0 * math.pi

# event kind codes used by the integration kernel
_EV_SINE = 0
_EV_IMPULSE = 1
_EV_STEP = 2
_KIND_CODES = {"sine": _EV_SINE, "impulse": _EV_IMPULSE, "step": _EV_STEP}

_UNBOUNDED = 1e30


@dataclass
class CavityConfig:
    f0: float = 1.3e9           # carrier frequency, Hz
    q_loaded: float = 4e6       # loaded quality factor
    gradient: float = 9.5       # accelerating field, MV/m (informational)
    sample_rate: float = 1000.0  # output rate, Hz

    def __post_init__(self):
        if self.f0 <= 0 or self.q_loaded <= 0 or self.sample_rate <= 0:
            raise ConfigError(
                f"f0, q_loaded, sample_rate must be positive "
                f"(got {self.f0}, {self.q_loaded}, {self.sample_rate})"
            )


@dataclass
class RFState:
    """Transmitted and forward field envelope components (normalized volts)."""

    vt_i: float = 0.0
    vt_q: float = 0.0
    vf_i: float = 0.0
    vf_q: float = 0.0

    def field_sq(self) -> float:
        return self.vt_i ** 2 + self.vt_q ** 2


@dataclass
class MechanicalMode:
    """Damped oscillator carrying one mechanical mode's detuning share."""

    omega_n: float              # angular frequency, rad/s
    q_n: float                  # quality factor
    k_n: float                  # coupling, Hz per normalized V^2 (sign-carrying)
    pos: float = 0.0            # detuning contribution, Hz
    vel: float = 0.0            # d(pos)/dt, Hz/s

    def __post_init__(self):
        if self.omega_n <= 0 or self.q_n <= 0:
            raise ConfigError(
                f"mode needs omega_n > 0 and q_n > 0, got ({self.omega_n}, {self.q_n})"
            )


@dataclass
class DisturbanceEvent:
    """One external forcing event acting on a single mechanical mode.

    kind: 'sine' (optionally raised-cosine enveloped via smooth=True),
    'impulse' (raised-cosine force bump), or 'step' (constant force).
    regime defaults to transient for finite events and stationary for
    unbounded ones; it drives the output labels.
    """

    kind: str
    mode: int
    amplitude: float
    start: float
    duration: float = math.inf
    frequency: float = 0.0
    smooth: bool = False
    regime: str | None = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        if self.duration < 0:
            raise ConfigError(f"event duration must be non-negative, got {self.duration}")
        if self.kind == "sine" and self.frequency <= 0:
            raise ConfigError("sinusoidal events need a positive frequency")
        if self.regime is None:
            self.regime = TRANSIENT if math.isfinite(self.duration) else STATIONARY
        if self.regime not in (STATIONARY, TRANSIENT):
            raise ConfigError(f"event regime must be stat/trans, got {self.regime!r}")


@dataclass
class DisturbanceProfile:
    events: list[DisturbanceEvent] = field(default_factory=list)

    def __post_init__(self):
        starts = [e.start for e in self.events]
        if starts != sorted(starts):
            raise ConfigError("disturbance events must be ordered by start time")


@dataclass
class DriveProfile:
    """Constant forward field drive (normalized volts, I/Q)."""

    vf_i: float = 1.0
    vf_q: float = 0.0


@dataclass
class SimResult:
    series: TimeSeries
    field_sq: np.ndarray        # |V_T|^2 at the output sample instants


def half_bandwidth(config: CavityConfig) -> float:
    """Field decay rate omega_1/2 = 2*pi*f0 / (2*Q_L), in rad/s."""
    return TWO_PI * config.f0 / (2.0 * config.q_loaded)


def rf_step(state: RFState, detuning: float, dt: float, half_bw: float) -> RFState:
    """Advance the transmitted field one RK4 step, detuning frozen.

    detuning is in rad/s. Requires dt * half_bw < 0.5 for accuracy headroom.
    """
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if dt * half_bw >= 0.5:
        raise ConfigError(
            f"dt * half_bandwidth = {dt * half_bw:.3g} >= 0.5; reduce the step"
        )
    hb, dw = half_bw, detuning
    fi, fq = state.vf_i, state.vf_q

    def deriv(i, q):
        return (-hb * i - dw * q + hb * fi, dw * i - hb * q + hb * fq)

    i0, q0 = state.vt_i, state.vt_q
    k1i, k1q = deriv(i0, q0)
    k2i, k2q = deriv(i0 + 0.5 * dt * k1i, q0 + 0.5 * dt * k1q)
    k3i, k3q = deriv(i0 + 0.5 * dt * k2i, q0 + 0.5 * dt * k2q)
    k4i, k4q = deriv(i0 + dt * k3i, q0 + dt * k3q)
    return replace(
        state,
        vt_i=i0 + dt / 6.0 * (k1i + 2 * k2i + 2 * k3i + k4i),
        vt_q=q0 + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q),
    )


def mode_step(mode: MechanicalMode, field_sq: float, ext_force: float,
              dt: float) -> MechanicalMode:
    """Advance one mechanical mode one RK4 step, inputs frozen.

    Integrates pos'' + (w/Q) pos' + w^2 pos = -k w^2 field_sq + ext_force.
    """
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if dt * mode.omega_n >= 0.5:
        raise ConfigError(
            f"dt * omega_n = {dt * mode.omega_n:.3g} >= 0.5; reduce the step"
        )
    w, damp = mode.omega_n, mode.omega_n / mode.q_n
    forcing = -mode.k_n * w * w * field_sq + ext_force

    def deriv(x, v):
        return (v, -damp * v - w * w * x + forcing)

    x0, v0 = mode.pos, mode.vel
    k1x, k1v = deriv(x0, v0)
    k2x, k2v = deriv(x0 + 0.5 * dt * k1x, v0 + 0.5 * dt * k1v)
    k3x, k3v = deriv(x0 + 0.5 * dt * k2x, v0 + 0.5 * dt * k2v)
    k4x, k4v = deriv(x0 + dt * k3x, v0 + dt * k3v)
    return replace(
        mode,
        pos=x0 + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
        vel=v0 + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )


def total_detuning(modes: list[MechanicalMode]) -> float:
    """Superposition of the modes' detuning contributions (Hz)."""
    return sum(m.pos for m in modes)


# ---------------------------------------------------------------------------
# co-integration kernel


def _event_force(t, n, ev_kind, ev_mode, ev_amp, ev_freq, ev_start, ev_dur,
                 ev_smooth):
    """Total external force on mode n at time t (Hz/s^2)."""
    total = 0.0
    for e in range(ev_kind.shape[0]):
        if ev_mode[e] != n:
            continue
        rel = t - ev_start[e]
        if rel < 0.0 or rel >= ev_dur[e]:
            continue
        if ev_kind[e] == 0:  # sine
            f = ev_amp[e] * math.sin(TWO_PI * ev_freq[e] * rel)
            if ev_smooth[e] == 1:
                # tapered raised-cosine envelope: 20% rise, plateau, 20% fall
                u = rel / ev_dur[e]
                taper = 0.2
                if u < taper:
                    f *= 0.5 * (1.0 - math.cos(math.pi * u / taper))
                elif u > 1.0 - taper:
                    f *= 0.5 * (1.0 - math.cos(math.pi * (1.0 - u) / taper))
            total += f
        elif ev_kind[e] == 1:  # impulse bump
            total += ev_amp[e] * 0.5 * (1.0 - math.cos(TWO_PI * rel / ev_dur[e]))
        else:  # step
            total += ev_amp[e]
    return total


def _integrate(vti, vtq, pos, vel, omega, damp, ksq, half_bw, vf_i, vf_q,
               ev_kind, ev_mode, ev_amp, ev_freq, ev_start, ev_dur, ev_smooth,
               noise_force, dt, substeps, n_out, out_det, out_fsq):
    """RK4 co-integration of the full coupled state. Returns -1, or the
    index of the internal step at which the state became non-finite."""
    n_modes = pos.shape[0]
    dp = np.empty((4, n_modes))
    dv = np.empty((4, n_modes))
    px = np.empty(n_modes)
    vx = np.empty(n_modes)
    di = np.empty(4)
    dq = np.empty(4)
    t_out = dt * substeps
    for i in range(n_out):
        det = 0.0
        for n in range(n_modes):
            det += pos[n]
        out_det[i] = det
        out_fsq[i] = vti * vti + vtq * vtq
        if i == n_out - 1:
            break
        for s in range(substeps):
            t0 = i * t_out + s * dt
            ok = True
            # four RK4 stages; stage offsets in units of dt
            for stage in range(4):
                if stage == 0:
                    off = 0.0
                elif stage == 3:
                    off = 1.0
                else:
                    off = 0.5
                if stage == 0:
                    ci, cq = vti, vtq
                    for n in range(n_modes):
                        px[n] = pos[n]
                        vx[n] = vel[n]
                elif stage == 1 or stage == 2:
                    ci = vti + 0.5 * dt * di[stage - 1]
                    cq = vtq + 0.5 * dt * dq[stage - 1]
                    for n in range(n_modes):
                        px[n] = pos[n] + 0.5 * dt * dp[stage - 1, n]
                        vx[n] = vel[n] + 0.5 * dt * dv[stage - 1, n]
                else:
                    ci = vti + dt * di[2]
                    cq = vtq + dt * dq[2]
                    for n in range(n_modes):
                        px[n] = pos[n] + dt * dp[2, n]
                        vx[n] = vel[n] + dt * dv[2, n]
                t = t0 + off * dt
                det_rad = 0.0
                for n in range(n_modes):
                    det_rad += px[n]
                det_rad *= TWO_PI
                di[stage] = -half_bw * ci - det_rad * cq + half_bw * vf_i
                dq[stage] = det_rad * ci - half_bw * cq + half_bw * vf_q
                fs2 = ci * ci + cq * cq
                for n in range(n_modes):
                    force = _event_force(t, n, ev_kind, ev_mode, ev_amp,
                                         ev_freq, ev_start, ev_dur, ev_smooth)
                    if noise_force.shape[0] > 0:
                        force += noise_force[i, n]
                    dp[stage, n] = vx[n]
                    dv[stage, n] = (-damp[n] * vx[n] - omega[n] * omega[n] * px[n]
                                    - ksq[n] * fs2 + force)
            vti += dt / 6.0 * (di[0] + 2 * di[1] + 2 * di[2] + di[3])
            vtq += dt / 6.0 * (dq[0] + 2 * dq[1] + 2 * dq[2] + dq[3])
            for n in range(n_modes):
                pos[n] += dt / 6.0 * (dp[0, n] + 2 * dp[1, n] + 2 * dp[2, n] + dp[3, n])
                vel[n] += dt / 6.0 * (dv[0, n] + 2 * dv[1, n] + 2 * dv[2, n] + dv[3, n])
            if not (math.isfinite(vti) and math.isfinite(vtq)):
                ok = False
            for n in range(n_modes):
                if not (math.isfinite(pos[n]) and math.isfinite(vel[n])):
                    ok = False
            if not ok:
                return i * substeps + s
    return -1


try:  # pragma: no cover - exercised indirectly
    import numba

    _event_force = numba.njit(cache=True)(_event_force)
    _integrate_jit = numba.njit(cache=True)(_integrate)
except ImportError:  # pragma: no cover
    _integrate_jit = _integrate


def run_simulation(config: CavityConfig,
                   modes: list[MechanicalMode],
                   drive: DriveProfile,
                   disturbances: DisturbanceProfile,
                   duration: float,
                   oversample: int = 50,
                   initial_rf: RFState | None = None,
                   force_noise: np.ndarray | None = None) -> SimResult:
    """Co-integrate the coupled system and return detuning plus |V_T|^2.

    force_noise, when given, is an (n_samples, n_modes) array of external
    forces held constant over each output sample period.
    """
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")
    if oversample < 1 or int(oversample) != oversample:
        raise ConfigError(
            f"internal step must divide the sample period: oversample={oversample}"
        )
    dt = 1.0 / (config.sample_rate * oversample)
    hb = half_bandwidth(config)
    if dt * hb >= 0.5:
        raise ConfigError(f"dt * half_bandwidth = {dt * hb:.3g} >= 0.5")
    for m in modes:
        if dt * m.omega_n >= 0.5:
            raise ConfigError(
                f"dt * omega_n = {dt * m.omega_n:.3g} >= 0.5 for mode at "
                f"{m.omega_n / TWO_PI:.1f} Hz"
            )
    n_out = int(round(duration * config.sample_rate))
    n_modes = len(modes)

    pos = np.array([m.pos for m in modes], dtype=np.float64)
    vel = np.array([m.vel for m in modes], dtype=np.float64)
    omega = np.array([m.omega_n for m in modes], dtype=np.float64)
    damp = np.array([m.omega_n / m.q_n for m in modes], dtype=np.float64)
    ksq = np.array([m.k_n * m.omega_n ** 2 for m in modes], dtype=np.float64)

    events = disturbances.events
    ev_kind = np.array([_KIND_CODES[e.kind] for e in events], dtype=np.int64)
    ev_mode = np.array([e.mode for e in events], dtype=np.int64)
    ev_amp = np.array([e.amplitude for e in events], dtype=np.float64)
    ev_freq = np.array([e.frequency for e in events], dtype=np.float64)
    ev_start = np.array([e.start for e in events], dtype=np.float64)
    ev_dur = np.array(
        [e.duration if math.isfinite(e.duration) else _UNBOUNDED for e in events],
        dtype=np.float64,
    )
    ev_smooth = np.array([1 if e.smooth else 0 for e in events], dtype=np.int64)
    for e in events:
        if e.mode < 0 or e.mode >= n_modes:
            raise ConfigError(f"event targets mode {e.mode}, have {n_modes} modes")

    if force_noise is None:
        noise = np.zeros((0, 0), dtype=np.float64)
    else:
        noise = np.ascontiguousarray(force_noise, dtype=np.float64)
        if noise.shape != (n_out, n_modes):
            raise ConfigError(
                f"force_noise shape {noise.shape} != ({n_out}, {n_modes})"
            )

    rf = initial_rf or RFState(vf_i=drive.vf_i, vf_q=drive.vf_q)
    out_det = np.empty(n_out, dtype=np.float64)
    out_fsq = np.empty(n_out, dtype=np.float64)
    bad = _integrate_jit(
        rf.vt_i, rf.vt_q, pos, vel, omega, damp, ksq, hb,
        drive.vf_i, drive.vf_q,
        ev_kind, ev_mode, ev_amp, ev_freq, ev_start, ev_dur, ev_smooth,
        noise, dt, int(oversample), n_out, out_det, out_fsq,
    )
    if bad >= 0:
        raise SimulationDiverged(int(bad))

    labels = _labels_from_events(events, modes, n_out, config.sample_rate)
    series = TimeSeries(config.sample_rate, out_det, labels)
    return SimResult(series=series, field_sq=out_fsq)


def decay_margin(mode: MechanicalMode) -> float:
    """Post-event label margin: four mechanical decay time constants, by
    which point the ring-down amplitude is below 2% of its peak."""
    return 4.0 * 2.0 * mode.q_n / mode.omega_n


def _labels_from_events(events, modes, n_out, rate) -> np.ndarray | None:
    windows = []
    for e in events:
        if e.regime != TRANSIENT or not math.isfinite(e.duration):
            continue
        margin = decay_margin(modes[e.mode])
        windows.append((e.start, e.start + e.duration + margin))
    labels = np.full(n_out, STATIONARY, dtype="<U5")
    t = np.arange(n_out) / rate
    for lo, hi in windows:
        labels[(t >= lo) & (t < hi)] = TRANSIENT
    return labels


def simulate(config: CavityConfig,
             modes: list[MechanicalMode],
             drive: DriveProfile,
             disturbances: DisturbanceProfile,
             duration: float,
             oversample: int = 50) -> TimeSeries:
    """Forward-simulate and return the labeled detuning series (Hz)."""
    return run_simulation(config, modes, drive, disturbances, duration,
                          oversample=oversample).series


# ---------------------------------------------------------------------------
# regime dataset generator


def table_modes() -> list[MechanicalMode]:
    """The three nominal stationary modes (100/40/10 Hz)."""
    return [
        MechanicalMode(omega_n=TWO_PI * 100.0, q_n=1000.0, k_n=1.0),
        MechanicalMode(omega_n=TWO_PI * 40.0, q_n=400.0, k_n=-1.0),
        MechanicalMode(omega_n=TWO_PI * 10.0, q_n=100.0, k_n=0.1),
    ]


def transient_modes() -> list[MechanicalMode]:
    """Extra modes excited only by transient events (64/285 Hz).

    Quality factors are kept low so ring-down (and hence the transient
    label margin) lasts a few hundred milliseconds at most.
    """
    return [
        MechanicalMode(omega_n=TWO_PI * 64.0, q_n=20.0, k_n=0.0),
        MechanicalMode(omega_n=TWO_PI * 285.0, q_n=60.0, k_n=0.0),
    ]


@dataclass
class RegimeDatasetConfig:
    """Knobs for the synthetic stationary/transient dataset."""

    cavity: CavityConfig = field(default_factory=CavityConfig)
    duration: float = 48.0
    stationary_len: float = 2.2     # seconds of quiet operation per cycle
    transient_len: float = 1.8      # seconds reserved per transient episode
    kick_len: float = 0.8           # enveloped forcing length inside the episode
    amp_stationary: tuple[float, float, float] = (8.0, 4.0, 2.0)  # Hz at 100/40/10
    amp_64: float = 40.0            # target detuning surge, Hz
    amp_285: float = 12.0
    include_285: bool = True
    force_noise: float = 150.0      # white force std on stationary modes, Hz/s^2
    meas_noise: float = 0.1         # measurement noise std on the output, Hz
    drive_amplitude: float = 1.0    # normalized forward field
    oversample: int = 50


def _resonant_force(amp_hz: float, mode: MechanicalMode) -> float:
    # steady on-resonance response amplitude is F * Q / w^2
    return amp_hz * mode.omega_n ** 2 / mode.q_n


def generate_regime_dataset(seed: int,
                            config: RegimeDatasetConfig | None = None) -> TimeSeries:
    """Labeled 1 kHz detuning series alternating quiet and disturbed spans.

    Quiet spans carry continuous resonant forcing of the 100/40/10 Hz modes;
    disturbed spans add enveloped bursts on the 64 Hz (and optionally
    285 Hz) modes. Bit-identical output for equal seeds.
    """
    return generate_regime_dataset_full(seed, config).series


def generate_regime_dataset_full(seed: int,
                                 config: RegimeDatasetConfig | None = None
                                 ) -> SimResult:
    cfg = config or RegimeDatasetConfig()
    rng = np.random.default_rng(seed)
    modes = table_modes() + transient_modes()
    events = [
        DisturbanceEvent("sine", 0, _resonant_force(cfg.amp_stationary[0], modes[0]),
                         start=0.0, frequency=100.0),
        DisturbanceEvent("sine", 1, _resonant_force(cfg.amp_stationary[1], modes[1]),
                         start=0.0, frequency=40.0),
        DisturbanceEvent("sine", 2, _resonant_force(cfg.amp_stationary[2], modes[2]),
                         start=0.0, frequency=10.0),
    ]
    cycle = cfg.stationary_len + cfg.transient_len
    t = cfg.stationary_len
    while t + cfg.transient_len <= cfg.duration:
        jitter = rng.uniform(0.0, 0.1)
        start = t + jitter
        gain = rng.uniform(0.85, 1.15)
        # enveloped resonant bursts; the 1.1 factor compensates the finite
        # ring-up so plateau peaks reach roughly the configured amplitude
        events.append(DisturbanceEvent(
            "sine", 3, 1.1 * gain * _resonant_force(cfg.amp_64, modes[3]),
            start=start, duration=cfg.kick_len, frequency=64.0, smooth=True))
        if cfg.include_285:
            events.append(DisturbanceEvent(
                "sine", 4, 1.1 * gain * _resonant_force(cfg.amp_285, modes[4]),
                start=start, duration=cfg.kick_len, frequency=285.0, smooth=True))
        t += cycle
    events.sort(key=lambda e: e.start)

    n_out = int(round(cfg.duration * cfg.cavity.sample_rate))
    noise = np.zeros((n_out, len(modes)))
    if cfg.force_noise > 0:
        noise[:, :3] = rng.normal(0.0, cfg.force_noise, size=(n_out, 3))

    result = run_simulation(
        cfg.cavity, modes, DriveProfile(vf_i=cfg.drive_amplitude),
        DisturbanceProfile(events), cfg.duration,
        oversample=cfg.oversample, force_noise=noise,
    )
    if cfg.meas_noise > 0:
        noisy = result.series.values + rng.normal(0.0, cfg.meas_noise, size=n_out)
        result = SimResult(
            series=TimeSeries(result.series.sample_rate, noisy, result.series.labels),
            field_sq=result.field_sq,
        )
    return result
