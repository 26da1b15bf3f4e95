"""Synthetic tone-burst "speech" and ingestion of external WAV + transcript pairs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidConfig, InvalidInput
from .signal import SAMPLE_RATE, Waveform, load_wav, save_wav
from .tokens import FIRST_WORD, Vocabulary


@dataclass(frozen=True)
class Utterance:
    uid: str
    waveform: Waveform
    transcript: tuple[int, ...]
    text: str


def default_tone_table(n_words: int, low: float = 300.0, high: float = 2500.0) -> tuple[float, ...]:
    return tuple(float(f) for f in np.linspace(low, high, n_words))


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_utterances: int = 2200
    min_words: int = 4
    max_words: int = 8
    word_vocab_size: int = 40
    burst_len: int = 1600
    amplitude: float = 0.5
    ramp: int = 32
    noise_floor: float = 0.002
    vocab_limit: int = 64
    tone_table: tuple[float, ...] | None = None
    drive: float = 2.0
    max_gap: int = 800
    repeat_prob: float = 0.5

    def __post_init__(self):
        if self.n_utterances < 0:
            raise InvalidConfig("n_utterances must be non-negative")
        if not 1 <= self.min_words <= self.max_words:
            raise InvalidConfig("need 1 <= min_words <= max_words")
        if not 1 <= self.word_vocab_size <= self.vocab_limit - FIRST_WORD:
            raise InvalidConfig(
                f"word_vocab_size={self.word_vocab_size} must be in [1, V-3={self.vocab_limit - FIRST_WORD}]"
            )
        if self.burst_len <= 2 * self.ramp or self.amplitude <= 0 or self.noise_floor < 0:
            raise InvalidConfig("burst_len must exceed twice the ramp; amplitude > 0; noise_floor >= 0")
        if self.max_gap < 0:
            raise InvalidConfig("max_gap must be non-negative")
        if not 0.0 <= self.repeat_prob <= 1.0:
            raise InvalidConfig("repeat_prob must lie in [0, 1]")
        if self.drive < 0:
            raise InvalidConfig("drive must be non-negative")
        if self.tone_table is not None:
            if len(self.tone_table) != self.word_vocab_size:
                raise InvalidConfig("tone_table needs one frequency per word")
            if len(set(self.tone_table)) != len(self.tone_table):
                raise InvalidConfig("tone_table frequencies must be distinct")
            if not all(0 < f < SAMPLE_RATE / 2 for f in self.tone_table):
                raise InvalidConfig("tone frequencies must lie strictly below Nyquist")

    @property
    def tones(self) -> tuple[float, ...]:
        return self.tone_table if self.tone_table is not None else default_tone_table(self.word_vocab_size)

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.default(self.word_vocab_size)


def render_burst(freq: float, spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    n = np.arange(spec.burst_len)
    phase = rng.uniform(0.0, 2 * np.pi)
    tone = np.sin(2 * np.pi * freq * n / SAMPLE_RATE + phase)
    if spec.drive > 0:
        # soft saturation: lowers the crest factor, keeps the fundamental dominant
        tone = np.tanh(spec.drive * tone) / np.tanh(spec.drive)
    tone = spec.amplitude * tone
    env = np.ones(spec.burst_len)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(spec.ramp) / spec.ramp)
    env[: spec.ramp] = ramp
    env[-spec.ramp:] = ramp[::-1]
    return tone * env


def make_utterance(spec: CorpusSpec, index: int) -> Utterance:
    # independent stream per index: generation can be split across workers
    rng = np.random.default_rng([spec.seed, index])
    n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = rng.integers(0, spec.word_vocab_size, size=n_words)
    if spec.repeat_prob > 0 and rng.random() < spec.repeat_prob:
        # disfluent utterance: the opening phrase is said two or three times
        times = int(rng.integers(2, 4))
        base = max(n_words // times, -(-spec.min_words // times))
        if base * times <= spec.max_words:
            words = np.tile(words[:base], times)
    tones = spec.tones
    parts = []
    for w in words:
        parts.append(render_burst(tones[w], spec, rng))
        if spec.max_gap:
            parts.append(np.zeros(int(rng.integers(0, spec.max_gap + 1))))
    audio = np.concatenate(parts)
    audio = audio + spec.noise_floor * rng.standard_normal(audio.shape[0])
    vocab = spec.vocabulary
    transcript = tuple(int(FIRST_WORD + w) for w in words)
    return Utterance(f"syn{spec.seed}-{index:05d}", Waveform(audio), transcript, vocab.decode(transcript))


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    if not isinstance(spec, CorpusSpec):
        raise InvalidConfig("generate_corpus expects a CorpusSpec")
    return [make_utterance(spec, i) for i in range(spec.n_utterances)]


def split(corpus: Sequence[Utterance], train_fraction: float, seed: int = 0):
    """Seeded shuffle, then the first round(fraction * n) items form the train part."""
    if not 0 < train_fraction < 1:
        raise InvalidInput("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(corpus))
    n_train = int(round(train_fraction * len(corpus)))
    return [corpus[i] for i in order[:n_train]], [corpus[i] for i in order[n_train:]]


def utterance_from_text(wav_path, text: str, vocab: Vocabulary, uid: str | None = None) -> Utterance:
    """A 16 kHz mono WAV plus its whitespace-separated transcript text."""
    waveform = load_wav(wav_path)
    ids = tuple(vocab.encode(text))
    return Utterance(uid or Path(wav_path).stem, waveform, ids, " ".join(text.split()))


def load_utterance(wav_path, transcript_path, vocab: Vocabulary, uid: str | None = None) -> Utterance:
    """WAV plus a one-line UTF-8 transcript file."""
    try:
        text = Path(transcript_path).read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise FormatError(f"cannot read transcript {transcript_path}: {exc}") from exc
    return utterance_from_text(wav_path, text, vocab, uid)


# ----------------------------------------------------------------- manifests


def write_dataset(corpus: Sequence[Utterance], out_dir) -> Path:
    """WAV per utterance, one transcript line per utterance, and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "wav").mkdir(exist_ok=True)
    lines, records = [], []
    for i, u in enumerate(corpus):
        rel = f"wav/{u.uid}.wav"
        save_wav(out / rel, u.waveform)
        lines.append(u.text)
        records.append({"wav": rel, "line": i, "id": u.uid})
    (out / "transcripts.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"transcripts": "transcripts.txt", "items": records}, indent=1))
    return manifest


def read_manifest(path, vocab: Vocabulary) -> list[Utterance]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if isinstance(doc, list):
        items, tfile = doc, "transcripts.txt"
    else:
        items, tfile = doc["items"], doc.get("transcripts", "transcripts.txt")
    lines = (path.parent / tfile).read_text(encoding="utf-8").splitlines()
    out = []
    for rec in items:
        idx = rec.get("line", rec.get("transcript-line-index"))
        if idx is None or not 0 <= idx < len(lines):
            raise FormatError(f"{path}: record {rec} points outside the transcript file")
        wav = path.parent / rec["wav"]
        out.append(utterance_from_text(wav, lines[idx], vocab, uid=rec.get("id") or Path(rec["wav"]).stem))
    return out
