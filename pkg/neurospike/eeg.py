"""
EEG preprocessing: FIR band-pass, signal quality index, trial cleaning,
marker epoching, artifact rejection, normalisation, padding and delta
modulation into spike trains; plus a synthetic CNV dataset generator.

Amplitudes are microvolts until :func:`minmax_normalize`.
"""

import os
from enum import Enum
from functools import lru_cache
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import toml
from pydantic import BaseModel, ConfigDict, Field
from scipy import fft
from scipy.signal import fftconvolve, firwin

from neurospike.config import PipelineConfig, QualityConfig, SynthConfig
from neurospike.errors import (
    DomainError,
    FilterLengthError,
    ShapeError,
    TrialRejected,
)
from neurospike.utils import rng

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
MONTAGE_FILE = os.path.join(BASE_DIR, "data", "montage_1020.toml")

FS = 500.0
COUNTDOWN = ("5", "4", "3", "2", "1", "STOP")
CENTRO_MEDIAL = ("Fz", "Cz", "Pz", "C3", "C4")
# Hamming main-lobe width factor: transition = 3.3 * fs / numtaps
HAMMING_WIDTH = 3.3


@lru_cache(maxsize=1)
def load_montage() -> tuple[tuple[str, ...], np.ndarray]:
    """
    :return: The 19 channel names in recording order and their [19, 3]
        unit-sphere positions.
    """
    with open(MONTAGE_FILE, "r", encoding="utf-8") as file:
        table = toml.load(file)
    names = tuple(entry["name"] for entry in table["channel"])
    positions = np.array(
        [entry["position"] for entry in table["channel"]], dtype=np.float64
    )
    positions /= np.linalg.norm(positions, axis=1, keepdims=True)
    positions.setflags(write=False)
    return names, positions


CHANNELS = load_montage()[0]


class QualityGrade(str, Enum):
    green = "green"
    orange = "orange"
    red = "red"


class Marker(BaseModel):
    label: str
    sample: int = Field(ge=0)


class EegRecording(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    fs: float = FS
    markers: list[Marker] = []
    channels: list[str] = list(CHANNELS)
    participant: str = "P00"
    trial_id: str = "trial"
    rejected: bool = False


class Epoch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    label: int = Field(ge=0, le=1)
    trial_id: str = ""
    participant: str = ""
    length: int = 0


class SpikeTrain(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    threshold: float


class ArtifactDecision(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    keep: bool
    data: Optional[np.ndarray] = None
    bad_channels: list[int] = []
    repaired_samples: int = 0


Signal = Union[EegRecording, np.ndarray]


def _signal_data(signal: Signal) -> np.ndarray:
    if isinstance(signal, EegRecording):
        return signal.data
    return np.asarray(signal)


def _with_data(signal: Signal, data: np.ndarray) -> Signal:
    if isinstance(signal, EegRecording):
        return signal.model_copy(update={"data": data})
    return data


# -- filtering ---------------------------------------------------------------


@lru_cache(maxsize=8)
def design_bandpass(
    fs: float, low: float, high: float, transition: float
) -> np.ndarray:
    """
    Linear-phase Hamming windowed-sinc band-pass.

    Both band edges get the same transition width, centred on the edge,
    so ``low`` and ``high`` are the -6 dB points shifted outward by half a
    transition.
    """
    numtaps = int(np.ceil(HAMMING_WIDTH * fs / transition))
    numtaps += 1 - numtaps % 2
    cutoffs = [max(low - transition / 2, 1e-6), high + transition / 2]
    taps = firwin(
        numtaps, cutoffs, pass_zero=False, window="hamming", fs=fs
    )
    taps.setflags(write=False)
    return taps


def fir_bandpass(
    recording: Signal,
    low: float = 0.1,
    high: float = 1.0,
    fs: Optional[float] = None,
    transition: float = 0.1,
) -> Signal:
    """
    Band-pass every channel, compensating the group delay so the output is
    aligned with the input and has the same length.

    :param recording: An EegRecording or a [C, T] array.
    :param fs: Sampling rate; taken from the recording when omitted.
    :raises FilterLengthError: When the signal is shorter than the
        filter, which happens when epochs instead of trials are filtered.
    """
    if fs is None:
        fs = recording.fs if isinstance(recording, EegRecording) else FS
    data = np.atleast_2d(_signal_data(recording)).astype(np.float64)
    taps = design_bandpass(float(fs), low, high, transition)
    if data.shape[-1] < taps.size:
        raise FilterLengthError(
            f"signal has {data.shape[-1]} samples but the {low}-{high} Hz "
            f"filter needs {taps.size}; filter whole trials, not epochs"
        )
    # mode="same" on an odd-length kernel drops exactly the group delay
    filtered = fftconvolve(data, taps[None, :], mode="same", axes=-1)
    return _with_data(recording, filtered.astype(np.float32))


# -- signal quality ----------------------------------------------------------


def band_rms(window: np.ndarray, fs: float, low: float, high: float) -> float:
    """RMS of the part of ``window`` between ``low`` and ``high`` Hz."""
    window = np.asarray(window, dtype=np.float64)
    n = window.size
    spectrum = fft.rfft(window)
    freqs = fft.rfftfreq(n, d=1.0 / fs)
    power = np.abs(spectrum) ** 2 / n**2
    # one-sided spectrum: every bin but DC and Nyquist stands for two
    power[1:] *= 2.0
    if n % 2 == 0:
        power[-1] /= 2.0
    band = (freqs >= low) & (freqs <= high)
    return float(np.sqrt(power[band].sum()))


def quality_index(
    window: np.ndarray,
    config: QualityConfig = QualityConfig(),
    fs: float = FS,
) -> float:
    """
    QI = tanh(sqrt((line/W_line)^2 + (main/W_main)^2 + (offset/W_O)^2))

    :param window: One channel's samples in microvolts.
    :return: QI in [0, 1).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.size == 0:
        raise ShapeError("quality index needs a non-empty window")
    line = band_rms(window, fs, *config.line_band_hz)
    main = band_rms(window, fs, *config.main_band_hz)
    offset = float(window.mean())
    norm = np.sqrt(
        (line / config.line_noise_weight_uv) ** 2
        + (main / config.main_noise_weight_uv) ** 2
        + (offset / config.offset_weight_uv) ** 2
    )
    return float(np.tanh(norm))


def quality_grade(qi: float) -> QualityGrade:
    if qi < 0.5:
        return QualityGrade.green
    if qi < 0.8:
        return QualityGrade.orange
    return QualityGrade.red


def quality_report(
    recording: EegRecording, config: QualityConfig = QualityConfig()
) -> np.ndarray:
    """
    QI of consecutive non-overlapping windows of every channel.

    :return: Array [C, n_windows]; empty second axis for recordings
        shorter than one window.
    """
    size = int(round(config.window_seconds * recording.fs))
    n_windows = recording.data.shape[1] // size
    report = np.zeros((recording.data.shape[0], n_windows))
    for c, channel in enumerate(recording.data):
        for w in range(n_windows):
            report[c, w] = quality_index(
                channel[w * size : (w + 1) * size], config, recording.fs
            )
    return report


# -- spatial interpolation and cleaning --------------------------------------


def interpolate_channel(
    data: np.ndarray,
    bad_channel: Union[int, Sequence[int]],
    positions: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Replace bad channels by an inverse-square-distance weighted mean of
    the good ones.

    :param data: [C, L] signal.
    :param bad_channel: One channel index or several.
    :param positions: [C, 3] electrode positions; the 10-20 montage by
        default.
    :return: A repaired copy of ``data``.
    """
    bad = np.atleast_1d(np.asarray(bad_channel, dtype=int))
    if positions is None:
        positions = load_montage()[1]
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] != data.shape[0]:
        raise ShapeError(
            f"{positions.shape[0]} positions for {data.shape[0]} channels"
        )
    good = np.setdiff1d(np.arange(data.shape[0]), bad)
    if good.size == 0:
        raise DomainError("cannot interpolate: every channel is bad")

    repaired = np.array(data, dtype=np.float64)
    for channel in bad:
        distances = np.linalg.norm(
            positions[good] - positions[channel], axis=1
        )
        weights = 1.0 / distances**2
        weights /= weights.sum()
        repaired[channel] = weights @ repaired[good]
    return repaired.astype(np.asarray(data).dtype)


def flat_channels(
    data: np.ndarray, fs: float, config: PipelineConfig = PipelineConfig()
) -> list[int]:
    """Channels holding still for longer than ``config.flat_seconds``."""
    limit = int(config.flat_seconds * fs)
    flat = []
    for c, channel in enumerate(np.asarray(data, dtype=np.float64)):
        still = np.abs(np.diff(channel)) < config.flat_tolerance_uv
        # longest run of consecutive still steps
        edges = np.diff(np.concatenate(([0], still.astype(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        longest = int((ends - starts).max()) if starts.size else 0
        if longest + 1 > limit:
            flat.append(c)
    return flat


def clean_trial(
    recording: EegRecording, config: PipelineConfig = PipelineConfig()
) -> tuple[EegRecording, list[int]]:
    """
    Interpolate channels that went flat for too long.

    :return: The cleaned recording and the repaired channel indices.
    :raises TrialRejected: When more than ``max_bad_channels`` are flat.
    """
    flat = flat_channels(recording.data, recording.fs, config)
    if len(flat) > config.max_bad_channels:
        raise TrialRejected(
            recording.trial_id, f"{len(flat)} flat channels"
        )
    if not flat:
        return recording, []
    repaired = interpolate_channel(recording.data, flat)
    return recording.model_copy(update={"data": repaired}), flat


# -- epoching ----------------------------------------------------------------


def _countdown_samples(recording: EegRecording) -> list[int]:
    positions = {}
    for marker in recording.markers:
        if marker.label not in COUNTDOWN:
            continue
        if marker.label in positions:
            raise TrialRejected(
                recording.trial_id, f"duplicate marker '{marker.label}'"
            )
        positions[marker.label] = marker.sample
    missing = [label for label in COUNTDOWN if label not in positions]
    if missing:
        raise TrialRejected(
            recording.trial_id, f"missing marker(s) {', '.join(missing)}"
        )
    samples = [positions[label] for label in COUNTDOWN]
    if any(b <= a for a, b in zip(samples, samples[1:])):
        raise TrialRejected(
            recording.trial_id,
            "markers are not in countdown order "
            + ", ".join(f"{lab}@{s}" for lab, s in zip(COUNTDOWN, samples)),
        )
    if samples[-1] > recording.data.shape[1]:
        raise TrialRejected(
            recording.trial_id, "STOP marker lies beyond the recording"
        )
    return samples


def baseline_correct(epoch: Union[Epoch, np.ndarray]):
    """Subtract each channel's mean over the epoch."""
    data = epoch.data if isinstance(epoch, Epoch) else np.asarray(epoch)
    mean = data.mean(axis=-1, keepdims=True, dtype=np.float64)
    corrected = (data - mean).astype(data.dtype)
    if isinstance(epoch, Epoch):
        return epoch.model_copy(update={"data": corrected})
    return corrected


def segment_epochs(recording: EegRecording) -> list[Epoch]:
    """
    Cut one trial into six baseline-corrected epochs.

    Five label-0 epochs: the countdown interval that precedes "5" (as
    long as the 5 -> 4 interval) and 5 -> 4, 4 -> 3, 3 -> 2, 2 -> 1.
    One label-1 epoch: 1 -> STOP.

    :raises TrialRejected: On missing, duplicate or mis-ordered markers.
    """
    samples = _countdown_samples(recording)
    lead = samples[0] - (samples[1] - samples[0])
    if lead < 0:
        raise TrialRejected(
            recording.trial_id,
            "not enough signal before the '5' marker for the first epoch",
        )
    bounds = [lead, *samples]
    epochs = []
    for index, (start, end) in enumerate(zip(bounds, bounds[1:])):
        epochs.append(
            baseline_correct(
                Epoch(
                    data=recording.data[:, start:end].astype(np.float32),
                    label=1 if index == len(bounds) - 2 else 0,
                    trial_id=recording.trial_id,
                    participant=recording.participant,
                    length=end - start,
                )
            )
        )
    return epochs


# -- per-epoch cleaning, scaling, padding ------------------------------------


def reject_artifacts(
    epoch: Union[Epoch, np.ndarray],
    config: PipelineConfig = PipelineConfig(),
    positions: Optional[np.ndarray] = None,
) -> ArtifactDecision:
    """
    Amplitude-based cleaning of one epoch (microvolts).

    A channel beyond +-limit for at least ``bad_fraction`` of the epoch is
    bad; shorter excursions are cut out and bridged by linear
    interpolation in time. More than ``max_bad_channels`` bad channels
    drop the epoch; otherwise bad channels are rebuilt from their
    neighbours.
    """
    data = epoch.data if isinstance(epoch, Epoch) else np.asarray(epoch)
    data = np.array(data, dtype=np.float64)
    over = np.abs(data) > config.amplitude_limit_uv
    fraction = over.mean(axis=1)
    bad = np.flatnonzero(fraction >= config.bad_fraction)
    if bad.size > config.max_bad_channels:
        return ArtifactDecision(keep=False, bad_channels=bad.tolist())

    repaired_samples = 0
    time = np.arange(data.shape[1])
    partial = (fraction > 0) & (fraction < config.bad_fraction)
    for channel in np.flatnonzero(partial):
        mask = over[channel]
        data[channel, mask] = np.interp(
            time[mask], time[~mask], data[channel, ~mask]
        )
        repaired_samples += int(mask.sum())
    if bad.size:
        data = interpolate_channel(data, bad, positions)

    dtype = np.asarray(
        epoch.data if isinstance(epoch, Epoch) else epoch
    ).dtype
    return ArtifactDecision(
        keep=True,
        data=data.astype(dtype),
        bad_channels=bad.tolist(),
        repaired_samples=repaired_samples,
    )


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """Scale each channel to [0, 1]; constant channels become zeros."""
    data = np.asarray(data, dtype=np.float64)
    low = data.min(axis=-1, keepdims=True)
    span = data.max(axis=-1, keepdims=True) - low
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (data - low) / safe, 0.0)
    return scaled.astype(np.float32)


def zero_pad(data: np.ndarray, target: int = 1848) -> np.ndarray:
    """Append zeros to every channel up to ``target`` samples."""
    data = np.asarray(data)
    if data.shape[-1] > target:
        raise ShapeError(
            f"epoch of {data.shape[-1]} samples exceeds the padded length "
            f"{target}; epochs are never truncated"
        )
    width = [(0, 0)] * (data.ndim - 1) + [(0, target - data.shape[-1])]
    return np.pad(data, width)


def delta_modulate(
    data: np.ndarray, threshold: float, length: Optional[int] = None
) -> SpikeTrain:
    """
    Spike wherever a channel moves by more than ``threshold`` between
    successive samples. The first column never spikes.

    :param data: [C, L] epoch normalised to [0, 1].
    :param threshold: Strictly positive change threshold.
    :param length: Original epoch length. Samples from ``length`` on are
        forced silent even where the jump into the zero padding exceeds
        ``threshold``; leave it as None for the plain per-sample rule.
    """
    if threshold <= 0:
        raise DomainError(
            f"delta-modulation threshold must be > 0, got {threshold}"
        )
    data = np.asarray(data, dtype=np.float64)
    if data.size and (data.min() < 0 or data.max() > 1):
        raise DomainError(
            "delta modulation expects data normalised to [0, 1]"
        )
    spikes = np.zeros(data.shape, dtype=np.uint8)
    spikes[..., 1:] = np.abs(np.diff(data, axis=-1)) > threshold
    if length is not None:
        spikes[..., length:] = 0
    return SpikeTrain(data=spikes, threshold=threshold)


# -- whole pipeline ----------------------------------------------------------


class PipelineStats(BaseModel):
    trials: int = 0
    trials_rejected: int = 0
    trials_screened_out: int = 0
    flat_channels_repaired: int = 0
    epochs_total: int = 0
    epochs_dropped: int = 0
    channels_interpolated: int = 0
    samples_repaired: int = 0

    def add(self, other: "PipelineStats") -> "PipelineStats":
        return PipelineStats(**{
            key: getattr(self, key) + getattr(other, key)
            for key in PipelineStats.model_fields
        })


def preprocess_recording(
    recording: EegRecording, config: PipelineConfig = PipelineConfig()
) -> tuple[list[Epoch], PipelineStats]:
    """
    filter -> clean -> epoch (+ baseline) -> reject -> normalise -> pad

    :raises TrialRejected: For screened-out trials, broken markers or too
        many flat channels.
    """
    stats = PipelineStats(trials=1)
    if recording.rejected:
        raise TrialRejected(recording.trial_id, "flagged at acquisition")
    filtered = fir_bandpass(
        recording,
        config.low_hz,
        config.high_hz,
        transition=config.transition_hz,
    )
    cleaned, flat = clean_trial(filtered, config)
    stats.flat_channels_repaired = len(flat)

    kept = []
    for epoch in segment_epochs(cleaned):
        stats.epochs_total += 1
        decision = reject_artifacts(epoch, config)
        if not decision.keep:
            stats.epochs_dropped += 1
            continue
        stats.channels_interpolated += len(decision.bad_channels)
        stats.samples_repaired += decision.repaired_samples
        data = zero_pad(minmax_normalize(decision.data), config.target_length)
        kept.append(epoch.model_copy(update={"data": data}))
    return kept, stats


def grand_average(
    epochs: np.ndarray, labels: np.ndarray, channel: Union[int, str] = "Cz"
) -> np.ndarray:
    """
    Mean epoch of one channel per label.

    :param epochs: [n, C, L] processed epochs.
    :return: [2, L]; a label without epochs gives a row of zeros.
    """
    if isinstance(channel, str):
        channel = CHANNELS.index(channel)
    epochs = np.asarray(epochs)
    labels = np.asarray(labels)
    averages = np.zeros((2, epochs.shape[-1]), dtype=np.float64)
    for label in (0, 1):
        chosen = epochs[labels == label, channel]
        if len(chosen):
            averages[label] = chosen.mean(axis=0, dtype=np.float64)
    return averages


# -- synthetic data ----------------------------------------------------------


def pink_noise(
    generator: np.random.Generator, shape: tuple[int, int]
) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    n = shape[-1]
    spectrum = generator.standard_normal(
        (shape[0], n // 2 + 1)
    ) + 1j * generator.standard_normal((shape[0], n // 2 + 1))
    freqs = np.arange(n // 2 + 1, dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= np.sqrt(freqs)
    spectrum[:, 0] = 0.0
    noise = fft.irfft(spectrum, n=n, axis=-1)
    return noise / noise.std(axis=-1, keepdims=True)


def synthesize_trial(
    config: SynthConfig, index: int, generator: np.random.Generator
) -> EegRecording:
    fs = config.fs
    spacing = int(round(config.spacing_seconds * fs))
    five = int(round(config.lead_in_seconds * fs))
    countdown = [five + i * spacing for i in range(5)]
    reaction = int(round(generator.uniform(0, config.reaction_seconds) * fs))
    stop = countdown[-1] + spacing + reaction
    # brake-check tail after STOP
    total = stop + int(round(0.25 * fs))

    shape = (len(CHANNELS), total)
    # half the noise variance is pink, half white
    white = generator.standard_normal(shape)
    pink = pink_noise(generator, shape)
    data = config.noise_std * np.sqrt(0.5) * (white + pink)

    one = countdown[-1]
    ramp = -config.ramp_amplitude * np.linspace(0.0, 1.0, stop - one)
    for name in CENTRO_MEDIAL:
        data[CHANNELS.index(name), one:stop] += ramp

    markers = [
        Marker(label=label, sample=sample)
        for label, sample in zip(COUNTDOWN, [*countdown, stop])
    ]
    participant = index % config.participants
    return EegRecording(
        data=data.astype(np.float32),
        fs=fs,
        markers=markers,
        participant=f"P{participant:02d}",
        trial_id=f"trial_{index:04d}",
    )


def iter_cnv_trials(
    config: SynthConfig = SynthConfig(),
) -> Iterator[EegRecording]:
    generator = rng(config.seed, "dataset")
    for index in range(config.n_trials):
        yield synthesize_trial(config, index, generator)


def synthesize_cnv_dataset(
    config: SynthConfig = SynthConfig(),
) -> list[EegRecording]:
    """
    Trials of pink-plus-white noise whose 1 -> STOP segment carries a
    negative-going ramp on the centro-medial channels.

    :return: The recordings, identical for identical configs.
    """
    return list(iter_cnv_trials(config))
