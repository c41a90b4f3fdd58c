"""Corpora of short vocal events: WAV I/O, manifests, and a synthesizer.

A corpus is a directory of 16 kHz / 16-bit / mono WAV files plus a
manifest: UTF-8 text, one record per line, tab-separated fields
``utt_id  spk_id  event  relative-path  duration_s``.  Lines starting
with ``#`` are comments.

``synth_corpus`` generates a desk-scale stand-in corpus.  Synthetic
speakers are source-filter voices: each speaker owns three resonant
frequencies (the speaker-discriminative part) and a pulse rate, and
each event type shapes the excitation and amplitude envelope.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000
SAMPLE_BITS = 16

TRIVIAL_EVENTS = ("cough", "laugh", "hmm", "tsk", "ahem", "sniff")
DISGUISE_STYLES = ("normal", "disguised")


class EventType(str, Enum):
    """Vocal event types: six trivial events plus two disguise-corpus styles."""

    COUGH = "cough"
    LAUGH = "laugh"
    HMM = "hmm"
    TSK = "tsk"
    AHEM = "ahem"
    SNIFF = "sniff"
    NORMAL = "normal"
    DISGUISED = "disguised"

    def __str__(self) -> str:  # manifest serialization uses the bare value
        return self.value

    @property
    def is_trivial(self) -> bool:
        return self.value in TRIVIAL_EVENTS


class CorpusError(Exception):
    """Base class for corpus loading problems."""


class MalformedWavError(CorpusError):
    """The file is not a well-formed RIFF/WAVE container."""


class UnsupportedWavError(CorpusError):
    """Well-formed WAV we refuse to read (encoding/channels/rate)."""

    def __init__(self, reason: str, detail: str):
        self.reason = reason
        super().__init__(f"unsupported wav ({reason}): {detail}")


class ManifestError(CorpusError):
    """Manifest text violates the record format or its invariants."""


@dataclass
class AudioSegment:
    """PCM audio: float64 samples in [-1, 1] with rate/precision metadata."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_precision: int = SAMPLE_BITS

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio segment must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio segment contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class UtteranceRecord:
    utt_id: str
    spk_id: str
    event: EventType
    path: str
    duration_s: float


@dataclass
class CorpusManifest:
    """Ordered utterance records plus the directory paths resolve against."""

    records: list[UtteranceRecord]
    name: str = ""
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.utt_id in seen:
                raise ManifestError(f"duplicate utt_id: {rec.utt_id}")
            seen.add(rec.utt_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def audio_path(self, rec: UtteranceRecord) -> Path:
        return self.root / rec.path

    def by_event(self, event: EventType) -> list[UtteranceRecord]:
        return [r for r in self.records if r.event == event]

    def events(self) -> list[EventType]:
        out = []
        for rec in self.records:
            if rec.event not in out:
                out.append(rec.event)
        return out


def _parse_wav_header(data: bytes, path) -> tuple[int, int, int, int, int, int]:
    """Return (format, channels, rate, bits, data_offset, data_size)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body + 16 > len(data):
                raise MalformedWavError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", data[body:body + 16])
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedWavError(f"{path}: data chunk before fmt chunk")
            if body + chunk_size > len(data):
                raise MalformedWavError(f"{path}: truncated data chunk")
            audio_format, channels, rate, _, _, bits = fmt
            return audio_format, channels, rate, bits, body, chunk_size
        # chunks are word-aligned
        pos = body + chunk_size + (chunk_size & 1)
    raise MalformedWavError(f"{path}: missing fmt or data chunk")


def wav_info(path) -> tuple[int, int]:
    """Cheap header probe: (n_samples, sample_rate) of a PCM-16 mono WAV."""
    data = Path(path).read_bytes()
    audio_format, channels, rate, bits, _, data_size = _parse_wav_header(data, path)
    _check_wav_format(audio_format, channels, bits, path)
    return data_size // 2, rate


def _check_wav_format(audio_format: int, channels: int, bits: int, path) -> None:
    if audio_format != 1:
        raise UnsupportedWavError("encoding", f"{path}: format tag {audio_format}, want PCM")
    if bits != 16:
        raise UnsupportedWavError("encoding", f"{path}: {bits}-bit samples, want 16")
    if channels != 1:
        raise UnsupportedWavError("channels", f"{path}: {channels} channels, want mono")


def read_wav(path, expect_rate: int | None = None) -> AudioSegment:
    """Read a PCM 16-bit mono WAV file; samples are scaled by 1/32768.

    ``expect_rate`` rejects files at any other sampling rate; the default
    accepts whatever rate the header declares.
    """
    data = Path(path).read_bytes()
    audio_format, channels, rate, bits, offset, size = _parse_wav_header(data, path)
    _check_wav_format(audio_format, channels, bits, path)
    if expect_rate is not None and rate != expect_rate:
        raise UnsupportedWavError("rate", f"{path}: {rate} Hz, want {expect_rate}")
    raw = np.frombuffer(data[offset:offset + size], dtype="<i2")
    if raw.size == 0:
        raise MalformedWavError(f"{path}: empty data chunk")
    return AudioSegment(raw.astype(np.float64) / 32768.0, sample_rate=rate)


def write_wav(path, seg: AudioSegment) -> None:
    """Write a segment as PCM 16-bit little-endian mono WAV."""
    pcm = np.clip(np.rint(seg.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, seg.sample_rate, seg.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    Path(path).write_bytes(header + body)


def load_manifest(path, check_audio: bool = True) -> CorpusManifest:
    """Parse a manifest file, enforcing unique ids and existing audio.

    Stored durations are recomputed from the audio headers; a mismatch
    beyond 1 ms is a warning, not an error.
    """
    path = Path(path)
    root = path.parent
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        utt_id, spk_id, event_s, rel, dur_s = fields
        if not utt_id or not spk_id or not rel:
            raise ManifestError(f"{path}:{lineno}: empty field")
        if utt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utt_id: {utt_id}")
        seen.add(utt_id)
        try:
            event = EventType(event_s)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown event type: {event_s}") from None
        try:
            duration = float(dur_s)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad duration: {dur_s}") from None
        if duration <= 0:
            raise ManifestError(f"{path}:{lineno}: non-positive duration")
        audio = root / rel
        if check_audio:
            if not audio.is_file():
                raise ManifestError(f"{path}:{lineno}: missing audio file: {audio}")
            n, rate = wav_info(audio)
            actual = n / rate
            if abs(actual - duration) > 1e-3:
                warnings.warn(
                    f"{utt_id}: manifest duration {duration:.4f}s differs from audio {actual:.4f}s",
                    stacklevel=2)
        records.append(UtteranceRecord(utt_id, spk_id, event, rel, duration))
    return CorpusManifest(records, name=path.stem, root=root)


def save_manifest(manifest: CorpusManifest, path) -> None:
    lines = [f"# tevkit manifest: {manifest.name}"]
    for r in manifest.records:
        lines.append(f"{r.utt_id}\t{r.spk_id}\t{r.event}\t{r.path}\t{r.duration_s:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class EventStats:
    event: EventType
    n_speakers: int
    n_utts: int
    utts_per_spk: float
    avg_duration_s: float


def corpus_stats(manifest: CorpusManifest) -> dict[EventType, EventStats]:
    """Per-event speaker/utterance counts and mean durations (unrounded)."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    out: dict[EventType, EventStats] = {}
    for event in manifest.events():
        recs = manifest.by_event(event)
        spks = {r.spk_id for r in recs}
        out[event] = EventStats(
            event=event,
            n_speakers=len(spks),
            n_utts=len(recs),
            utts_per_spk=len(recs) / len(spks),
            avg_duration_s=float(np.mean([r.duration_s for r in recs])),
        )
    return out


def format_stats(stats: dict[EventType, EventStats]) -> str:
    """Render the stats table; values rounded to 2 decimals for display."""
    lines = ["event     spks  utts  utts/spk  avg_dur_s"]
    for ev, s in stats.items():
        lines.append(f"{ev.value:<9} {s.n_speakers:>4}  {s.n_utts:>4}  "
                     f"{s.utts_per_spk:>8.2f}  {s.avg_duration_s:>9.2f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Synthetic corpus generation
# --------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Parameters of a synthetic corpus."""

    n_speakers: int
    utts_per_speaker_per_event: int
    events: tuple[EventType, ...]
    duration_range_s: tuple[float, float] = (0.3, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.events = tuple(EventType(e) for e in self.events)
        if self.n_speakers < 2:
            raise ValueError("verification needs at least 2 speakers")
        if self.utts_per_speaker_per_event < 1:
            raise ValueError("need at least one utterance per speaker per event")
        if not self.events:
            raise ValueError("no event types given")
        lo, hi = self.duration_range_s
        if not (0.1 < lo <= hi < 3.0):
            raise ValueError("duration range must lie within (0.1, 3.0) s")


@dataclass
class _Voice:
    """A synthetic speaker: resonant frequencies plus a pulse rate."""

    resonances: np.ndarray      # 3 frequencies in Hz
    bandwidths: np.ndarray      # one per resonance
    pulse_rate: float           # Hz
    disguise_shift: float       # resonance scale used for the 'disguised' style
    disguise_pitch: float       # pulse-rate scale for the 'disguised' style


MIN_RESONANCE_GAP_HZ = 50.0


def _draw_voice(rng: np.random.Generator, existing: list[_Voice]) -> _Voice:
    # Redraw until this voice's resonance triple is at least 50 Hz away
    # from every existing voice in at least one of the three slots.
    while True:
        freqs = np.sort(rng.uniform(300.0, 3500.0, size=3))
        ok = all(np.max(np.abs(freqs - v.resonances)) >= MIN_RESONANCE_GAP_HZ
                 for v in existing)
        if ok:
            break
    return _Voice(
        resonances=freqs,
        bandwidths=rng.uniform(80.0, 160.0, size=3),
        pulse_rate=rng.uniform(90.0, 220.0),
        disguise_shift=rng.choice([0.82, 1.22]) * rng.uniform(0.97, 1.03),
        disguise_pitch=rng.choice([0.7, 1.45]) * rng.uniform(0.95, 1.05),
    )


def _resonator_filter(x: np.ndarray, freqs: np.ndarray, bws: np.ndarray,
                      fs: int) -> np.ndarray:
    """Cascade of second-order resonators at the given center frequencies."""
    y = x
    for f, bw in zip(freqs, bws):
        r = math.exp(-math.pi * bw / fs)
        theta = 2.0 * math.pi * f / fs
        a = [1.0, -2.0 * r * math.cos(theta), r * r]
        # unit gain at the resonance peak
        b = [(1.0 - r) * math.sqrt(1.0 - 2.0 * r * math.cos(2.0 * theta) + r * r)]
        y = lfilter(b, a, y)
    return y


def _pulse_train(n: int, rate: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Glottal-style excitation: jittered impulse train."""
    out = np.zeros(n)
    period = fs / rate
    t = rng.uniform(0.0, period)
    while t < n:
        k = int(t)
        out[k] = 1.0 + 0.2 * rng.standard_normal()
        t += period * (1.0 + 0.04 * rng.standard_normal())
    return out


def _burst_envelope(n: int, attack_s: float, decay_tau_s: float, fs: int) -> np.ndarray:
    t = np.arange(n) / fs
    attack = np.minimum(t / max(attack_s, 1e-4), 1.0)
    decay = np.exp(-np.maximum(t - attack_s, 0.0) / decay_tau_s)
    return attack * decay


def _event_waveform(event: EventType, voice: _Voice, n: int, fs: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Excitation + envelope for one utterance; resonances applied afterwards."""
    dur = n / fs
    # per-utterance pitch wobble keeps utterances of one speaker from
    # being exact copies of each other
    rate = voice.pulse_rate * rng.uniform(0.9, 1.1)
    voiced = _pulse_train(n, rate, fs, rng)
    noise = rng.standard_normal(n)

    if event == EventType.COUGH:
        env = _burst_envelope(n, 0.008, dur / 3.0, fs)
        x = (0.6 * voiced + 0.8 * noise) * env
    elif event == EventType.LAUGH:
        x = np.zeros(n)
        n_bursts = rng.integers(2, 5)
        for k in range(n_bursts):
            start = int(k * n / n_bursts)
            seg = n // n_bursts
            env = np.hanning(max(seg, 8))
            x[start:start + seg] += (voiced[start:start + seg] * env[:min(seg, n - start)])
        x += 0.08 * noise
    elif event == EventType.HMM:
        env = np.hanning(n) ** 0.5
        x = (voiced + 0.05 * noise) * env
    elif event == EventType.TSK:
        # a short click: most of the segment is near-silent
        click_len = max(int(0.02 * fs), 8)
        env = np.zeros(n)
        start = int(0.1 * n)
        env[start:start + click_len] = _burst_envelope(click_len, 0.001, 0.004, fs)
        x = noise * env + 0.002 * noise
    elif event == EventType.AHEM:
        # two bursts back to back
        env = (_burst_envelope(n, 0.01, dur / 4.0, fs)
               + np.roll(_burst_envelope(n, 0.01, dur / 3.0, fs), n // 2) * (np.arange(n) >= n // 2))
        x = (0.8 * voiced + 0.3 * noise) * env
    elif event == EventType.SNIFF:
        env = np.hanning(n)
        x = noise * env
    else:  # NORMAL / DISGUISED: longer voiced stretch with syllabic modulation
        mod = 0.6 + 0.4 * np.cos(2.0 * math.pi * rng.uniform(2.0, 5.0) * np.arange(n) / fs
                                 + rng.uniform(0.0, 2.0 * math.pi))
        x = (voiced + 0.05 * noise) * np.hanning(n) ** 0.25 * mod
    return x


def synth_utterance(voice: _Voice, event: EventType, duration_s: float,
                    rng: np.random.Generator, fs: int = SAMPLE_RATE) -> AudioSegment:
    """Synthesize one utterance of the given event for one voice."""
    n = int(round(duration_s * fs))
    freqs = voice.resonances.copy()
    bws = voice.bandwidths.copy()
    rate_scale = 1.0
    if event == EventType.DISGUISED:
        freqs = np.clip(freqs * voice.disguise_shift, 150.0, 0.45 * fs)
        rate_scale = voice.disguise_pitch
    # small per-utterance resonance jitter: same speaker, never identical tract
    freqs = freqs * (1.0 + rng.uniform(-0.02, 0.02, size=3))

    jittered = _Voice(freqs, bws, voice.pulse_rate * rate_scale,
                      voice.disguise_shift, voice.disguise_pitch)
    x = _event_waveform(event, jittered, n, fs, rng)
    y = _resonator_filter(x, freqs, bws, fs)
    # per-utterance channel: spectral tilt, additive noise, random gain
    tilt = rng.uniform(-0.3, 0.3)
    y = lfilter([1.0, -tilt], [1.0], y)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y / peak
    snr_db = rng.uniform(18.0, 30.0)
    y = y + rng.standard_normal(n) * (10.0 ** (-snr_db / 20.0))
    y = y / max(np.max(np.abs(y)), 1e-9) * rng.uniform(0.4, 0.9)
    return AudioSegment(y, sample_rate=fs)


def synth_corpus(spec: SynthSpec, out_dir) -> CorpusManifest:
    """Generate a corpus on disk; deterministic under a fixed seed.

    Layout: ``out_dir/audio/<spk>/<utt>.wav`` plus ``out_dir/manifest.tsv``.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    voices: list[_Voice] = []
    spk_ids = [f"s{i:03d}" for i in range(spec.n_speakers)]
    for _ in spk_ids:
        voices.append(_draw_voice(rng, voices))

    records: list[UtteranceRecord] = []
    for spk_id, voice in zip(spk_ids, voices):
        (out_dir / "audio" / spk_id).mkdir(exist_ok=True)
        for event in spec.events:
            for k in range(spec.utts_per_speaker_per_event):
                duration = rng.uniform(*spec.duration_range_s)
                seg = synth_utterance(voice, event, duration, rng)
                utt_id = f"{spk_id}-{event}-{k:03d}"
                rel = f"audio/{spk_id}/{utt_id}.wav"
                write_wav(out_dir / rel, seg)
                records.append(UtteranceRecord(utt_id, spk_id, event, rel, seg.duration_s))

    manifest = CorpusManifest(records, name="synth", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
