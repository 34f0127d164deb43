"""Music-score data model, corpus manifests, segmenting and the synthetic corpus.

A score is phoneme-aligned: every phoneme carries the MIDI pitch and the
duration (in frames) of the note it belongs to. Pitch 0 marks a rest and
phoneme 0 is the silence symbol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.ndimage import uniform_filter1d

from .config import CorpusConfig
from .errors import ParseError, ValidationError

SILENCE = 0
REST = 0
PCM_SCALE = 32768.0


def _int_tuple(values, name: str) -> tuple[int, ...]:
    out = []
    for v in values:
        if isinstance(v, (bool, np.bool_)) or int(v) != v:
            raise ValidationError(f"{name} must contain integers, got {v!r}")
        out.append(int(v))
    return tuple(out)


@dataclass(frozen=True)
class MusicScore:
    """Phoneme-level score condition.

    Attributes:
        phonemes: phoneme IDs, 0 is silence.
        note_pitch: MIDI pitch of the owning note for each phoneme (0 = rest).
        note_dur: owning note's duration in frames, repeated per phoneme.
        phn_dur: labeled phoneme durations in frames, training only.
    """

    phonemes: tuple[int, ...]
    note_pitch: tuple[int, ...]
    note_dur: tuple[int, ...]
    phn_dur: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "phonemes", _int_tuple(self.phonemes, "phonemes"))
        object.__setattr__(self, "note_pitch", _int_tuple(self.note_pitch, "note_pitch"))
        object.__setattr__(self, "note_dur", _int_tuple(self.note_dur, "note_dur"))
        if self.phn_dur is not None:
            object.__setattr__(self, "phn_dur", _int_tuple(self.phn_dur, "phn_dur"))
        n = len(self.phonemes)
        if n < 1:
            raise ValidationError("score must contain at least one phoneme")
        lengths = {
            "phonemes": n,
            "note_pitch": len(self.note_pitch),
            "note_dur": len(self.note_dur),
        }
        if self.phn_dur is not None:
            lengths["phn_dur"] = len(self.phn_dur)
        if len(set(lengths.values())) != 1:
            raise ValidationError(f"score sequences differ in length: {lengths}")
        if min(self.note_dur) < 1:
            raise ValidationError("note_dur entries must be >= 1")
        if self.phn_dur is not None and min(self.phn_dur) < 1:
            raise ValidationError("phn_dur entries must be >= 1")
        if min(self.phonemes) < 0:
            raise ValidationError("phoneme IDs must be non-negative")
        if min(self.note_pitch) < 0 or max(self.note_pitch) > 127:
            raise ValidationError("note_pitch must be in [0, 127]")

    def __len__(self) -> int:
        return len(self.phonemes)

    @property
    def total_frames(self) -> int:
        if self.phn_dur is None:
            raise ValidationError("score has no labeled phoneme durations")
        return sum(self.phn_dur)

    def check_inventory(self, inventory_size: int) -> None:
        if max(self.phonemes) >= inventory_size:
            raise ValidationError(
                f"phoneme ID {max(self.phonemes)} outside inventory of size {inventory_size}"
            )

    def without_durations(self) -> MusicScore:
        return replace(self, phn_dur=None)

    def to_record(self) -> dict:
        rec = {
            "phonemes": list(self.phonemes),
            "note_pitch": list(self.note_pitch),
            "note_dur": list(self.note_dur),
        }
        if self.phn_dur is not None:
            rec["phn_dur"] = list(self.phn_dur)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> MusicScore:
        return cls(
            phonemes=rec["phonemes"],
            note_pitch=rec["note_pitch"],
            note_dur=rec["note_dur"],
            phn_dur=rec.get("phn_dur"),
        )


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError("audio must be mono (1-D)")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise ValidationError("audio samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioClip):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class CorpusEntry:
    score: MusicScore
    audio: AudioClip
    f0_ref: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.f0_ref is not None:
            object.__setattr__(self, "f0_ref", np.asarray(self.f0_ref, dtype=np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusEntry):
            return NotImplemented
        if (self.f0_ref is None) != (other.f0_ref is None):
            return False
        same_f0 = self.f0_ref is None or np.array_equal(self.f0_ref, other.f0_ref)
        return self.score == other.score and self.audio == other.audio and same_f0 and self.name == other.name

    def validate(self, hop_size: int) -> None:
        """Check the score/audio/F0 frame bookkeeping on a ``hop_size`` grid."""
        if len(self.audio) < hop_size:
            raise ValidationError("audio shorter than one hop")
        if self.score.phn_dur is not None:
            frames = self.score.total_frames
            if abs(frames * hop_size - len(self.audio)) >= hop_size:
                raise ValidationError(
                    f"score covers {frames} frames ({frames * hop_size} samples) "
                    f"but audio has {len(self.audio)} samples"
                )
            if self.f0_ref is not None and len(self.f0_ref) != frames:
                raise ValidationError(f"f0_ref has {len(self.f0_ref)} frames, score has {frames}")


def midi_to_hz(pitch) -> float | np.ndarray:
    """Equal-tempered frequency of a MIDI note, A4 (69) = 440 Hz.

    Rests (pitch 0) are rejected; callers decide how to represent them.
    """
    arr = np.asarray(pitch, dtype=np.float64)
    if np.any(arr < 1) or np.any(arr > 127):
        raise ValidationError(f"MIDI pitch must be in [1, 127], got {pitch}")
    hz = 440.0 * 2.0 ** ((arr - 69.0) / 12.0)
    return float(hz) if hz.ndim == 0 else hz


def expand_note_sequences(raw_notes: Iterable[Sequence[int]]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Repeat each note's (pitch, dur) once per phoneme sung on it."""
    pitch, dur = [], []
    for i, (p, d, count) in enumerate(raw_notes):
        if count < 1:
            raise ValidationError(f"note {i} has phoneme count {count}; need >= 1")
        pitch.extend([int(p)] * int(count))
        dur.extend([int(d)] * int(count))
    return tuple(pitch), tuple(dur)


def score_f0_contour(score: MusicScore, durations: Sequence[int] | None = None) -> np.ndarray:
    """Frame-level F0 implied by the score (0 on rests).

    ``durations`` defaults to the labeled phoneme durations.
    """
    if durations is None:
        durations = score.phn_dur
    if durations is None:
        raise ValidationError("score has no durations to expand")
    hz = np.array([midi_to_hz(p) if p > 0 else 0.0 for p in score.note_pitch])
    return np.repeat(hz, np.asarray(durations, dtype=np.int64))


# Manifest I/O ---------------------------------------------------------------

_REQUIRED = ("phonemes", "note_pitch", "note_dur", "audio")


def read_wav(path: str | Path) -> AudioClip:
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio")
    if data.dtype != np.int16:
        raise ValidationError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return AudioClip(data.astype(np.float64) / PCM_SCALE, int(sr))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype(np.int16)


def write_wav(path: str | Path, audio: AudioClip) -> None:
    wavfile.write(path, audio.sample_rate, to_pcm16(audio.samples))


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Snap samples onto the 16-bit grid so WAV round trips are exact."""
    return to_pcm16(samples).astype(np.float64) / PCM_SCALE


def parse_corpus(path: str | Path, hop_size: int = 128) -> list[CorpusEntry]:
    """Read a JSON-lines manifest; audio paths resolve relative to the manifest."""
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record must be a key/value object", lineno)
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise ParseError(f"missing fields {missing}", lineno)
            try:
                score = MusicScore.from_record(rec)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad score field: {exc}", lineno) from exc
            audio_path = path.parent / rec["audio"]
            if not audio_path.exists():
                raise ParseError(f"audio file not found: {rec['audio']}", lineno)
            entry = CorpusEntry(
                score=score,
                audio=read_wav(audio_path),
                f0_ref=rec.get("f0_ref"),
                name=rec.get("name", audio_path.stem),
            )
            try:
                entry.validate(hop_size)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            entries.append(entry)
    return entries


def write_corpus(entries: Sequence[CorpusEntry], out_dir: str | Path, manifest: str = "manifest.jsonl") -> Path:
    """Write WAVs under ``out_dir/wavs`` and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, entry in enumerate(entries):
        name = entry.name or f"clip_{i:05d}"
        rel = f"wavs/{name}.wav"
        write_wav(out_dir / rel, entry.audio)
        rec = entry.score.to_record()
        rec["audio"] = rel
        rec["name"] = name
        if entry.f0_ref is not None:
            rec["f0_ref"] = [float(v) for v in entry.f0_ref]
        lines.append(json.dumps(rec))
    manifest_path = out_dir / manifest
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


# Segmenting -----------------------------------------------------------------

def split_segments(entry: CorpusEntry, target_seconds: float, hop_size: int = 128) -> list[CorpusEntry]:
    """Cut a long entry into ~``target_seconds`` pieces at phoneme boundaries.

    Each cut is placed at the last phoneme boundary that keeps the segment
    within the target; a single phoneme longer than the target becomes its
    own segment. The final segment keeps any trailing partial-hop samples.
    """
    if target_seconds <= 0:
        raise ValidationError("target_seconds must be positive")
    score = entry.score
    if score.phn_dur is None:
        return [entry]
    max_frames = max(1, int(target_seconds * entry.audio.sample_rate / hop_size))
    if score.total_frames <= max_frames:
        return [entry]

    groups: list[tuple[int, int]] = []  # phoneme index ranges
    start, acc = 0, 0
    for i, d in enumerate(score.phn_dur):
        if acc and acc + d > max_frames:
            groups.append((start, i))
            start, acc = i, 0
        acc += d
    groups.append((start, len(score)))

    out = []
    frame0 = 0
    for k, (a, b) in enumerate(groups):
        nframes = sum(score.phn_dur[a:b])
        s0 = frame0 * hop_size
        s1 = (frame0 + nframes) * hop_size if k < len(groups) - 1 else len(entry.audio)
        sub = MusicScore(
            score.phonemes[a:b], score.note_pitch[a:b], score.note_dur[a:b], score.phn_dur[a:b]
        )
        f0 = None if entry.f0_ref is None else entry.f0_ref[frame0:frame0 + nframes]
        name = f"{entry.name}_seg{k:03d}" if entry.name else ""
        out.append(CorpusEntry(sub, AudioClip(entry.audio.samples[s0:s1], entry.audio.sample_rate), f0, name))
        frame0 += nframes
    return out


# Synthetic corpus -------------------------------------------------------------

_ENVELOPE_SEED = 20211003
_VOICE_PEAK = 0.8
_XFADE_SECONDS = 0.012


@dataclass(frozen=True)
class _PhonemeTable:
    weights: np.ndarray     # relative share of a note each phoneme claims
    formants: np.ndarray    # (P + 1, 3) centre frequencies in Hz
    bandwidths: np.ndarray  # (P + 1, 3)
    gains: np.ndarray       # (P + 1, 3)


def phoneme_table(phoneme_count: int) -> _PhonemeTable:
    """Fixed per-phoneme duration weights and formant envelopes.

    Independent of the corpus seed, so the same phoneme always sounds (and
    times) the same across corpora.
    """
    rng = np.random.default_rng(_ENVELOPE_SEED + phoneme_count)
    n = phoneme_count + 1
    weights = np.empty(n)
    # first half of the sung symbols behave like short onsets, second half like nuclei
    half = max(1, phoneme_count // 2)
    weights[1:half + 1] = rng.uniform(0.15, 0.5, size=half)
    weights[half + 1:] = rng.uniform(1.5, 3.0, size=n - half - 1)
    weights[0] = 1.0
    formants = np.stack([
        rng.uniform(300, 900, n),
        rng.uniform(1000, 2400, n),
        rng.uniform(2500, 3500, n),
    ], axis=1)
    bandwidths = np.stack([
        rng.uniform(80, 160, n),
        rng.uniform(120, 240, n),
        rng.uniform(200, 400, n),
    ], axis=1)
    gains = np.stack([np.ones(n), rng.uniform(0.3, 0.8, n), rng.uniform(0.1, 0.3, n)], axis=1)
    return _PhonemeTable(weights, formants, bandwidths, gains)


def _envelope(table: _PhonemeTable, phoneme: int, freqs: np.ndarray) -> np.ndarray:
    f = freqs[:, None]
    peaks = table.gains[phoneme] * np.exp(-0.5 * ((f - table.formants[phoneme]) / table.bandwidths[phoneme]) ** 2)
    # 1/h source tilt keeps the fundamental dominant (no octave ambiguity)
    tilt = freqs[0] / freqs
    return tilt * (0.5 + peaks.sum(axis=1))


def _partition(total: int, shares: np.ndarray) -> list[int]:
    """Split ``total`` frames into len(shares) positive integers (largest remainder)."""
    k = len(shares)
    spare = total - k
    ideal = shares / shares.sum() * spare
    base = np.floor(ideal).astype(int)
    order = np.argsort(-(ideal - base), kind="stable")
    base[order[: spare - base.sum()]] += 1
    return [int(b) + 1 for b in base]


def _song_score(cfg: CorpusConfig, table: _PhonemeTable, rng: np.random.Generator) -> MusicScore:
    n_notes = int(rng.integers(cfg.notes_per_song[0], cfg.notes_per_song[1] + 1))
    phonemes, pitch, ndur, pdur = [], [], [], []
    for _ in range(n_notes):
        d = int(rng.integers(cfg.note_dur_range[0], cfg.note_dur_range[1] + 1))
        if rng.random() < cfg.rest_prob:
            phonemes.append(SILENCE)
            pitch.append(REST)
            ndur.append(d)
            pdur.append(d)
            continue
        p = int(rng.choice(cfg.pitch_set))
        k = int(rng.integers(cfg.phonemes_per_note[0], cfg.phonemes_per_note[1] + 1))
        ids = rng.integers(1, cfg.phoneme_count + 1, size=k)
        shares = table.weights[ids] * np.exp(rng.normal(0.0, 0.15, size=k))
        phonemes.extend(int(i) for i in ids)
        pitch.extend([p] * k)
        ndur.extend([d] * k)
        pdur.extend(_partition(d, shares))
    return MusicScore(phonemes, pitch, ndur, pdur)


def render_score(score: MusicScore, table: _PhonemeTable, sample_rate: int, hop_size: int) -> np.ndarray:
    """Harmonic-source rendering of a labeled score, quantized to 16 bits."""
    durs = np.asarray(score.phn_dur)
    n = int(durs.sum()) * hop_size
    seg = np.repeat(np.arange(len(score)), durs * hop_size)  # phoneme occurrence per sample

    f0_note = np.array([midi_to_hz(p) if p > 0 else 0.0 for p in score.note_pitch])
    f0 = f0_note[seg]
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    voiced_hz = f0_note[f0_note > 0]
    max_h = int(sample_rate / 2 / voiced_hz.min()) if voiced_hz.size else 1
    harmonics = np.arange(1, max_h + 1)
    amps = np.zeros((len(score), max_h))
    for i, (ph, hz) in enumerate(zip(score.phonemes, f0_note)):
        if hz <= 0:
            continue
        freqs = harmonics * hz
        a = _envelope(table, ph, freqs)
        a[freqs >= sample_rate / 2 - 200] = 0.0
        amps[i] = a / np.sqrt(np.sum(a ** 2))

    # two box passes = triangular crossfade between neighbouring phonemes
    box = max(1, int(_XFADE_SECONDS * sample_rate) // 2)
    harm_amp = amps[seg]
    voiced = (f0 > 0).astype(np.float64)
    for _ in range(2):
        harm_amp = uniform_filter1d(harm_amp, box, axis=0, mode="nearest")
        voiced = uniform_filter1d(voiced, box, mode="constant")

    y = np.zeros(n)
    for h in range(max_h):
        col = harm_amp[:, h]
        if np.any(col):
            y += col * np.sin((h + 1) * phase)
    y *= voiced
    peak = np.max(np.abs(y))
    if peak > 0:
        y *= _VOICE_PEAK / peak
    return quantize_pcm16(y)


def generate_synthetic_corpus(cfg: CorpusConfig, seed: int | None = None) -> list[CorpusEntry]:
    """Deterministic synthetic singing corpus with exact duration/F0 labels.

    Song ``i`` draws from its own stream seeded by ``(seed, i)``, so any
    subset of songs can be regenerated independently.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    table = phoneme_table(cfg.phoneme_count)
    entries = []
    for i in range(cfg.songs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        score = _song_score(cfg, table, rng)
        samples = render_score(score, table, cfg.sample_rate, cfg.hop_size)
        entries.append(
            CorpusEntry(
                score=score,
                audio=AudioClip(samples, cfg.sample_rate),
                f0_ref=score_f0_contour(score),
                name=f"song_{i:04d}",
            )
        )
    return entries


def concat_entries(entries: Sequence[CorpusEntry]) -> CorpusEntry:
    """Inverse of :func:`split_segments` (names are dropped)."""
    scores = [e.score for e in entries]
    has_dur = all(s.phn_dur is not None for s in scores)
    score = MusicScore(
        sum((s.phonemes for s in scores), ()),
        sum((s.note_pitch for s in scores), ()),
        sum((s.note_dur for s in scores), ()),
        sum((s.phn_dur for s in scores), ()) if has_dur else None,
    )
    audio = AudioClip(np.concatenate([e.audio.samples for e in entries]), entries[0].audio.sample_rate)
    f0 = None
    if all(e.f0_ref is not None for e in entries):
        f0 = np.concatenate([e.f0_ref for e in entries])
    return CorpusEntry(score, audio, f0)
