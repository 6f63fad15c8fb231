"""Synthetic IR-UWB echo generator.

Every slow-time frame ``s`` is a superposition of attenuated, delayed copies
of the transmitted pulse plus white noise::

    r_s[n] = sum_f alpha_f * pulse[n - tau_f(s)] + noise_s[n]

Delays are in fast-time bins and may be fractional; a fractional delay splits
the replica between the two neighbouring bins by linear interpolation.

The default activity library gives each of the seven driver activities a
qualitative motion signature: a breathing torso, steering hands, a nodding
head, a hand held at the face, console taps or phone typing.  These are
stand-ins with plausible structure, not calibrated motion models.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "LABELS",
    "DISTRACTED_LABELS",
    "Geometry",
    "PulseShape",
    "PathSpec",
    "ActivityArchetype",
    "SubjectProfile",
    "PulseMatrix",
    "gaussian_pulse",
    "unit_impulse",
    "synthesize_frame",
    "synthesize_matrix",
    "generate_dataset",
    "default_archetypes",
    "make_subjects",
    "Static",
    "Oscillation",
    "Sawtooth",
    "Gesture",
    "MicroMotion",
    "Composite",
]

LABELS: tuple[str, ...] = ("Relax", "Drive", "Nod", "Smoke", "Drink", "Panel", "Phone")
DISTRACTED_LABELS: tuple[str, ...] = tuple(lab for lab in LABELS if lab != "Drive")


def label_index(label: str) -> int:
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValueError(f"unknown activity label {label!r}; expected one of {LABELS}") from None


@dataclass(frozen=True)
class Geometry:
    """Fast/slow-time dimensions of a recording (defaults: 178 bins, 5 s at 100 Hz)."""

    fast_bins: int = 178
    slow_bins: int = 500
    frame_rate: float = 100.0

    def __post_init__(self):
        if self.fast_bins < 1 or self.slow_bins < 1:
            raise ValueError(f"geometry needs fast_bins, slow_bins >= 1, got {self.fast_bins}x{self.slow_bins}")
        if not (math.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise ValueError(f"frame_rate must be positive and finite, got {self.frame_rate}")


@dataclass(frozen=True)
class PulseShape:
    """Transmitted pulse, stored with its peak magnitude normalized to 1."""

    samples: np.ndarray
    sample_rate: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64).ravel()
        if x.size < 1:
            raise ValueError("pulse needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("pulse samples must be finite")
        peak = np.max(np.abs(x))
        if peak == 0:
            raise ValueError("pulse is identically zero")
        x = x / peak
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size


def gaussian_pulse(length: int = 16, cycles_per_bin: float = 0.3, width: float = 2.5) -> PulseShape:
    """Gaussian-modulated sinusoid sampled on ``length`` fast-time bins."""
    n = np.arange(length) - (length - 1) / 2.0
    env = np.exp(-0.5 * (n / width) ** 2)
    return PulseShape(env * np.cos(2 * np.pi * cycles_per_bin * n))


def unit_impulse() -> PulseShape:
    return PulseShape(np.ones(1))


# ---------------------------------------------------------------------------
# trajectories: vectorized callables s -> delay (in fast-time bins)


@dataclass(frozen=True)
class Static:
    base: float

    def __call__(self, s):
        return np.full(np.shape(s), float(self.base))


@dataclass(frozen=True)
class Oscillation:
    """Sinusoidal displacement ``amplitude * sin(2 pi f t + phase)``."""

    amplitude: float
    freq_hz: float
    phase: float = 0.0
    frame_rate: float = 100.0

    def __call__(self, s):
        t = np.asarray(s, dtype=np.float64) / self.frame_rate
        return self.amplitude * np.sin(2 * np.pi * self.freq_hz * t + self.phase)


@dataclass(frozen=True)
class Sawtooth:
    """Slow drift of ``amplitude`` bins that snaps back once per period."""

    amplitude: float
    freq_hz: float
    phase: float = 0.0
    frame_rate: float = 100.0

    def __call__(self, s):
        t = np.asarray(s, dtype=np.float64) / self.frame_rate
        return self.amplitude * np.mod(self.freq_hz * t + self.phase, 1.0)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * x)


@dataclass(frozen=True)
class Gesture:
    """Approach/dwell/retreat displacement repeated at each onset time.

    The displacement ramps from 0 to ``extent`` bins over ``rise_s``, holds for
    ``dwell_s`` and returns over ``fall_s`` (raised-cosine ramps).
    """

    extent: float
    onsets_s: tuple[float, ...]
    rise_s: float
    dwell_s: float
    fall_s: float
    frame_rate: float = 100.0

    def __call__(self, s):
        t = np.asarray(s, dtype=np.float64) / self.frame_rate
        out = np.zeros(np.shape(t))
        for t0 in self.onsets_s:
            up = _smoothstep((t - t0) / self.rise_s)
            down = _smoothstep((t - t0 - self.rise_s - self.dwell_s) / self.fall_s)
            out = np.maximum(out, up - down)
        return self.extent * out


@dataclass(frozen=True)
class MicroMotion:
    """Small fast displacement (a sum of tones) active only inside a gate.

    ``gate`` is any trajectory term; the micro-motion is scaled by
    ``|gate(s)| / gate_extent`` clipped to [0, 1], so it only appears while the
    gated limb is displaced.  ``gate=None`` keeps it always on.
    """

    amplitude: float
    freqs_hz: tuple[float, ...]
    phases: tuple[float, ...]
    gate: Callable | None = None
    gate_extent: float = 1.0
    frame_rate: float = 100.0

    def __call__(self, s):
        t = np.asarray(s, dtype=np.float64) / self.frame_rate
        x = np.zeros(np.shape(t))
        for f, ph in zip(self.freqs_hz, self.phases):
            x = x + np.sin(2 * np.pi * f * t + ph)
        x *= self.amplitude / max(len(self.freqs_hz), 1) ** 0.5
        if self.gate is not None:
            x = x * np.clip(np.abs(self.gate(s)) / self.gate_extent, 0.0, 1.0)
        return x


@dataclass(frozen=True)
class Composite:
    """``base + sum(terms)``; the usual shape of a delay trajectory."""

    base: float
    terms: tuple[Callable, ...] = ()

    def __call__(self, s):
        out = np.full(np.shape(s), float(self.base))
        for term in self.terms:
            out = out + term(s)
        return out


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class PathSpec:
    """One propagation path: attenuation and delay trajectory (bins)."""

    attenuation: float
    delay_trajectory: Callable
    phase_jitter_std: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.attenuation) and self.attenuation >= 0):
            raise ValueError(f"attenuation must be finite and >= 0, got {self.attenuation}")
        if not (math.isfinite(self.phase_jitter_std) and self.phase_jitter_std >= 0):
            raise ValueError(f"phase_jitter_std must be finite and >= 0, got {self.phase_jitter_std}")


@dataclass(frozen=True)
class ActivityArchetype:
    label: str
    paths: tuple[PathSpec, ...]
    noise_std: float = 0.0

    def __post_init__(self):
        label_index(self.label)
        object.__setattr__(self, "paths", tuple(self.paths))
        if len(self.paths) < 1:
            raise ValueError(f"archetype {self.label} needs at least one path")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ValueError(f"noise_std must be finite and >= 0, got {self.noise_std}")

    def realize(self, rng: np.random.Generator) -> "ActivityArchetype":
        return self


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    range_offset_bins: float = 0.0
    amplitude_scale: float = 1.0
    tempo_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("range_offset_bins", "amplitude_scale", "tempo_scale"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.amplitude_scale <= 0 or self.tempo_scale <= 0:
            raise ValueError("amplitude_scale and tempo_scale must be > 0")


@dataclass
class PulseMatrix:
    """Fast-time x slow-time echo amplitudes of one recording."""

    data: np.ndarray
    frame_rate: float = 100.0
    label: str = "Relax"
    subject_id: int = 0
    sample_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"pulse matrix must be 2-D and non-empty, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("pulse matrix contains non-finite entries")

    @property
    def fast_bins(self) -> int:
        return self.data.shape[0]

    @property
    def slow_bins(self) -> int:
        return self.data.shape[1]

    @property
    def label_code(self) -> int:
        return label_index(self.label)


# ---------------------------------------------------------------------------
# synthesis


def _check_finite(archetype, subject):
    for i, p in enumerate(archetype.paths):
        if not math.isfinite(p.attenuation):
            raise ValueError(f"path {i}: non-finite attenuation")


def _frame_rng(subject: SubjectProfile, label: str, sample_index: int, s: int) -> np.random.Generator:
    return np.random.default_rng([subject.rng_seed & 0xFFFFFFFFFFFFFFFF, label_index(label), sample_index, 1, s])


def _sample_rng(subject: SubjectProfile, label: str, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([subject.rng_seed & 0xFFFFFFFFFFFFFFFF, label_index(label), sample_index, 0])


def _path_delays(archetype, subject, s, jitter):
    """Delays (paths x frames) in bins, subject offset/tempo and jitter applied."""
    s = np.asarray(s, dtype=np.float64)
    rows = []
    for i, p in enumerate(archetype.paths):
        d = np.asarray(p.delay_trajectory(s * subject.tempo_scale), dtype=np.float64)
        d = d + subject.range_offset_bins + jitter[i]
        rows.append(np.broadcast_to(d, s.shape))
    return np.stack(rows)


def _draw_jitter(archetype, rngs):
    """Per-path, per-frame delay jitter; one generator per frame, drawn before the noise."""
    stds = np.array([p.phase_jitter_std for p in archetype.paths])
    return np.stack([r.standard_normal(stds.size) for r in rngs], axis=1) * stds[:, None]


def _render(archetype, subject, pulse, delays, fast_bins):
    """Noiseless echoes, shape (frames, fast_bins)."""
    n_frames = delays.shape[1]
    if not np.all(np.isfinite(delays)):
        raise ValueError("non-finite path delay")
    bad = (delays < 0) | (delays >= fast_bins)
    if bad.any():
        path, frame = np.argwhere(bad)[0]
        raise ValueError(
            f"path {path} delay {delays[path, frame]:.3f} at frame {frame} outside [0, {fast_bins})"
        )
    p = pulse.samples
    taps = np.concatenate([[0.0], p, [0.0]])  # taps[m + 1] == p[m]
    out = np.zeros((n_frames, fast_bins))
    rows = np.arange(n_frames)
    for i, path in enumerate(archetype.paths):
        alpha = path.attenuation * subject.amplitude_scale
        if alpha == 0:
            continue
        i0 = np.floor(delays[i]).astype(np.int64)
        frac = delays[i] - i0
        for m in range(p.size + 1):
            w = (1.0 - frac) * taps[m + 1] + frac * taps[m]
            col = i0 + m
            ok = col < fast_bins
            out[rows[ok], col[ok]] += alpha * w[ok]
    return out


def synthesize_frame(
    archetype: ActivityArchetype,
    subject: SubjectProfile,
    pulse: PulseShape,
    s: int,
    fast_bins: int = 178,
    sample_index: int = 0,
) -> np.ndarray:
    """Echo vector of slow-time frame ``s`` (length ``fast_bins``)."""
    if fast_bins < len(pulse):
        raise ValueError(f"fast_bins={fast_bins} shorter than pulse length {len(pulse)}")
    _check_finite(archetype, subject)
    rng = _frame_rng(subject, archetype.label, sample_index, int(s))
    jitter = _draw_jitter(archetype, [rng])
    delays = _path_delays(archetype, subject, np.array([float(s)]), jitter)
    frame = _render(archetype, subject, pulse, delays, fast_bins)[0]
    if archetype.noise_std > 0:
        frame = frame + archetype.noise_std * rng.standard_normal(fast_bins)
    return frame


def synthesize_matrix(
    archetype: ActivityArchetype,
    subject: SubjectProfile,
    pulse: PulseShape,
    geometry: Geometry = Geometry(),
    sample_index: int = 0,
) -> np.ndarray:
    """All frames at once; column ``s`` equals ``synthesize_frame(..., s)`` bit for bit."""
    if geometry.fast_bins < len(pulse):
        raise ValueError(f"fast_bins={geometry.fast_bins} shorter than pulse length {len(pulse)}")
    _check_finite(archetype, subject)
    s = np.arange(geometry.slow_bins)
    rngs = [_frame_rng(subject, archetype.label, sample_index, int(k)) for k in s]
    jitter = _draw_jitter(archetype, rngs)
    delays = _path_delays(archetype, subject, s.astype(np.float64), jitter)
    out = _render(archetype, subject, pulse, delays, geometry.fast_bins)
    if archetype.noise_std > 0:
        noise = np.stack([r.standard_normal(geometry.fast_bins) for r in rngs])
        out = out + archetype.noise_std * noise
    return out.T.copy()


def generate_dataset(
    archetypes: Sequence,
    subjects: Sequence[SubjectProfile],
    samples_per_pair: int,
    geometry: Geometry = Geometry(),
    pulse: PulseShape | None = None,
    exclude: Iterable[tuple[int, str]] = (),
    dtype=np.float64,
) -> list[PulseMatrix]:
    """Simulate ``samples_per_pair`` recordings for every (subject, activity).

    ``archetypes`` may hold fixed :class:`ActivityArchetype` objects or
    activity models exposing ``realize(rng)`` that draw a fresh scene per
    sample.  ``exclude`` lists ``(subject_id, label)`` pairs to skip.  Output
    order is subject-major, then archetype order, then sample index.
    """
    if not subjects:
        raise ValueError("generate_dataset needs at least one subject")
    if samples_per_pair < 1:
        raise ValueError(f"samples_per_pair must be >= 1, got {samples_per_pair}")
    ids = [sub.subject_id for sub in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate subject ids in {ids}")
    pulse = pulse or gaussian_pulse()
    skip = {(int(sid), str(lab)) for sid, lab in exclude}
    out = []
    for sub in subjects:
        for arch in archetypes:
            if (sub.subject_id, arch.label) in skip:
                continue
            for k in range(samples_per_pair):
                scene = arch.realize(_sample_rng(sub, arch.label, k))
                data = synthesize_matrix(scene, sub, pulse, geometry, sample_index=k)
                out.append(
                    PulseMatrix(
                        data=data.astype(dtype, copy=False),
                        frame_rate=geometry.frame_rate,
                        label=arch.label,
                        subject_id=sub.subject_id,
                        sample_id=f"S{sub.subject_id:02d}-{arch.label}-{k:04d}",
                    )
                )
    return out


def make_subjects(n: int, seed: int = 0, first_id: int = 1) -> list[SubjectProfile]:
    """Random but reproducible driver profiles (posture offset, size, tempo)."""
    rng = np.random.default_rng(seed)
    subs = []
    for i in range(n):
        subs.append(
            SubjectProfile(
                subject_id=first_id + i,
                range_offset_bins=float(rng.uniform(-2.0, 2.0)),
                amplitude_scale=float(rng.uniform(0.85, 1.15)),
                tempo_scale=float(rng.uniform(0.85, 1.15)),
                rng_seed=int(rng.integers(0, 2**63 - 1)),
            )
        )
    return subs


# ---------------------------------------------------------------------------
# default activity library


@dataclass(frozen=True)
class ActivityModel:
    """Draws one concrete :class:`ActivityArchetype` per recording."""

    label: str
    builder: Callable[[np.random.Generator, "LibraryParams"], list[PathSpec]] = field(repr=False)
    params: "LibraryParams" = None

    def realize(self, rng: np.random.Generator) -> ActivityArchetype:
        p = self.params
        paths = list(self.builder(rng, p)) + _body_and_cabin(rng, p)
        return ActivityArchetype(self.label, tuple(paths), noise_std=p.noise_std)


@dataclass(frozen=True)
class LibraryParams:
    """Knobs of the default activity library (positions in bins, rates in Hz)."""

    frame_rate: float = 100.0
    noise_std: float = 0.05
    torso_bin: float = 24.0
    head_bin: float = 27.0
    wheel_bin: float = 14.0
    face_bin: float = 18.0
    lap_bin: float = 32.0
    console_bin: float = 4.0
    phone_bin: float = 8.0
    cabin_echo_bins: float = 38.0
    bottle_echo_bins: float = 95.0
    clutter_bins: tuple[float, ...] = (72.0, 96.0, 131.0, 158.0)
    vibration_amplitude: float = 0.08
    sway_amplitude: tuple[float, float] = (0.8, 1.5)
    # Sway band of the hand at the face.  Smoke sways slowly; Drink shakes at
    # the slow band mirrored about 44.69 Hz, the frame rate left after linear
    # resampling of 500 frames to 224 (100 * 223 / 499).  At the native rate
    # the shake averages into a wide blurred echo; after naive resampling it
    # folds onto the slow sway and the two gestures look alike.
    smoke_sway_hz: tuple[float, float] = (0.3, 0.8)
    drink_sway_hz: tuple[float, float] = (43.89, 44.39)

    def with_(self, **kw) -> "LibraryParams":
        return dataclasses.replace(self, **kw)


def _phase(rng):
    return float(rng.uniform(0.0, 2 * np.pi))


def _body_and_cabin(rng, p):
    """Torso with breathing, its cabin reflection, static clutter, road vibration on everything."""
    fr = p.frame_rate
    vib = MicroMotion(p.vibration_amplitude, tuple(rng.uniform(8.0, 20.0, size=3)),
                      tuple(rng.uniform(0, 2 * np.pi, size=3)), frame_rate=fr)
    breathing = Oscillation(rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.35), _phase(rng), fr)
    torso = p.torso_bin + rng.normal(0, 0.4)
    paths = [
        PathSpec(1.0, Composite(torso, (breathing, vib)), phase_jitter_std=0.01),
        PathSpec(0.25, Composite(torso + p.cabin_echo_bins, (breathing, vib))),
    ]
    for b in p.clutter_bins:
        paths.append(PathSpec(float(rng.uniform(0.2, 0.5)), Composite(b + rng.normal(0, 1.0), (vib,))))
    return paths


def _hand(p, rng, base, alpha, terms=(), spread=0.6):
    offset = float(np.clip(rng.normal(0, spread), -2 * spread, 2 * spread))
    return PathSpec(alpha, Composite(base + offset, tuple(terms)), phase_jitter_std=0.02)


def _still_hand_on_wheel(rng, p):
    return _hand(p, rng, p.wheel_bin, 0.45)


def _relax(rng, p):
    # hands resting in the lap, wheel untouched
    fr = p.frame_rate
    drift = Oscillation(rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3), _phase(rng), fr)
    return [_hand(p, rng, p.lap_bin, 0.55, (drift,))]


def _drive(rng, p):
    fr = p.frame_rate
    out = []
    for side in (-1.0, 1.0):
        steer = Oscillation(rng.uniform(1.5, 2.5), rng.uniform(0.3, 0.8), _phase(rng), fr)
        out.append(_hand(p, rng, p.wheel_bin + side, 0.5, (steer,)))
    return out


def _nod(rng, p):
    fr = p.frame_rate
    # the head sinks toward the wheel and jerks back up
    head = Sawtooth(-rng.uniform(3.0, 5.0), rng.uniform(0.4, 0.6), float(rng.uniform(0, 1)), fr)
    return [_hand(p, rng, p.head_bin, 0.8, (head,)), _still_hand_on_wheel(rng, p)]


def _face_gesture(rng, p, band):
    """Hand held at the face, swaying inside ``band``."""
    sway = Oscillation(float(rng.uniform(*p.sway_amplitude)), float(rng.uniform(*band)), _phase(rng), p.frame_rate)
    return _hand(p, rng, p.face_bin, 0.55, (sway,))


def _smoke(rng, p):
    return [_face_gesture(rng, p, p.smoke_sway_hz), _still_hand_on_wheel(rng, p)]


def _drink(rng, p):
    hand = _face_gesture(rng, p, p.drink_sway_hz)
    # the bottle is a strong reflector: a late echo via the windshield,
    # far beyond the driver region of interest
    bottle = PathSpec(0.4, Composite(hand.delay_trajectory.base + p.bottle_echo_bins, hand.delay_trajectory.terms))
    return [hand, bottle, _still_hand_on_wheel(rng, p)]


def _panel(rng, p):
    fr = p.frame_rate
    taps = Oscillation(rng.uniform(0.3, 0.6), rng.uniform(1.0, 2.0), _phase(rng), fr)
    return [_hand(p, rng, p.console_bin, 0.6, (taps,)), _still_hand_on_wheel(rng, p)]


def _phone(rng, p):
    fr = p.frame_rate
    typing = Oscillation(rng.uniform(0.2, 0.4), rng.uniform(3.0, 5.0), _phase(rng), fr)
    return [_hand(p, rng, p.phone_bin, 0.6, (typing,))]


_BUILDERS = {
    "Relax": _relax,
    "Drive": _drive,
    "Nod": _nod,
    "Smoke": _smoke,
    "Drink": _drink,
    "Panel": _panel,
    "Phone": _phone,
}


def default_archetypes(params: LibraryParams | None = None) -> list[ActivityModel]:
    """The seven default activity models, in :data:`LABELS` order.

    Each 5 s window shows one sustained posture: hands on the wheel (Drive,
    steering), in the lap (Relax), a dozing head (Nod), a hand at the face
    (Smoke, Drink), at the console (Panel) or holding a phone (Phone).  Smoke
    and Drink share posture and sway depth; Smoke sways slowly while Drink
    shakes near 44 Hz, and only Drink produces the far bottle echo.
    """
    p = params or LibraryParams()
    return [ActivityModel(label, _BUILDERS[label], p) for label in LABELS]
