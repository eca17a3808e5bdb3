"""Interview-corpus preprocessing.

Sessions arrive as one WAV plus one tab-separated transcript per
participant. The pipeline keeps participant speech only, merges runs of
five consecutive utterances into segments (a shorter final remainder is
kept), slices the session audio by utterance timestamps, and emits a
segments CSV. Every participant carries one questionnaire score, which
every segment of theirs inherits; per-segment predictions are averaged
back to participant level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform
from .errors import BoundsError, ContractError, ParseError, RangeError, ValidationError

INTERVIEWER = "interviewer"
PARTICIPANT = "participant"
_SPEAKER_ALIASES = {
    "ellie": INTERVIEWER,
    "interviewer": INTERVIEWER,
    "participant": PARTICIPANT,
}

SEGMENT_CSV_HEADER = ["participant_id", "segment_index", "text", "phq8"]
MANIFEST_HEADER = ["participant_id", "split", "phq8_binary", "phq8_score"]
SPLITS = ("train", "dev", "test")

CHUNK_SIZE = 5


@dataclass
class Utterance:
    start_time: float
    stop_time: float
    speaker: str
    text: str

    def __post_init__(self):
        if self.speaker not in (INTERVIEWER, PARTICIPANT):
            raise ValidationError(f"unknown speaker {self.speaker!r}")
        if not self.stop_time > self.start_time:
            raise ValidationError(
                f"stop time {self.stop_time} not after start time {self.start_time}"
            )
        self.text = self.text.strip()
        if not self.text:
            raise ValidationError("utterance text is empty")


@dataclass
class Segment:
    participant_id: str
    segment_index: int
    utterances: list[Utterance]
    label: int
    waveform: Waveform | None = None

    def __post_init__(self):
        if not 1 <= len(self.utterances) <= CHUNK_SIZE:
            raise ValidationError(
                f"segment must merge 1..{CHUNK_SIZE} utterances, got {len(self.utterances)}"
            )
        if not 0 <= int(self.label) <= 24:
            raise RangeError(f"questionnaire score {self.label} outside 0..24")
        self.label = int(self.label)

    @property
    def text(self) -> str:
        return " ".join(u.text for u in self.utterances)


def parse_transcript(path) -> list[Utterance]:
    """Read a start_time/stop_time/speaker/value TSV into utterances.

    Errors carry 1-based line numbers. Text is taken verbatim (this
    format does not quote), so a stray tab inside a value shows up as a
    field-count error on that line.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty transcript")
    header = [c.strip().lower() for c in lines[0].split("\t")]
    required = ["start_time", "stop_time", "speaker", "value"]
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"{path}: header missing column(s) {missing}")
    col = {name: header.index(name) for name in required}

    utterances: list[Utterance] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(header):
            raise ParseError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(fields)}"
            )
        try:
            start = float(fields[col["start_time"]])
            stop = float(fields[col["stop_time"]])
        except ValueError as e:
            raise ParseError(f"{path}: line {lineno}: non-numeric time: {e}") from e
        speaker_raw = fields[col["speaker"]].strip().lower()
        speaker = _SPEAKER_ALIASES.get(speaker_raw)
        if speaker is None:
            raise ParseError(f"{path}: line {lineno}: unknown speaker {speaker_raw!r}")
        try:
            utterances.append(
                Utterance(start, stop, speaker, fields[col["value"]])
            )
        except ValidationError as e:
            raise ParseError(f"{path}: line {lineno}: {e}") from e
    return utterances


def filter_participant(utterances: list[Utterance]) -> list[Utterance]:
    """Participant rows only, original order preserved."""
    return [u for u in utterances if u.speaker == PARTICIPANT]


def chunk_five(utterances: list[Utterance], participant_id: str, label: int) -> list[Segment]:
    """Group consecutive utterances in fives; the 1..4 remainder stays.

    One call covers one participant's session, so segments never mix
    participants.
    """
    for u in utterances:
        if u.speaker != PARTICIPANT:
            raise ContractError("chunking expects participant-only utterances")
    segments = []
    for i in range(0, len(utterances), CHUNK_SIZE):
        segments.append(
            Segment(participant_id, len(segments), utterances[i : i + CHUNK_SIZE], label)
        )
    return segments


def _sample_index(seconds: float) -> int:
    """Round half up at 16 kHz, avoiding truncation bias."""
    return int(np.floor(seconds * SAMPLE_RATE + 0.5))


def slice_audio(session: Waveform, segment: Segment) -> Waveform:
    """Concatenate the segment's utterance spans, no gaps or crossfade."""
    spans = []
    n = len(session)
    for u in segment.utterances:
        lo, hi = _sample_index(u.start_time), _sample_index(u.stop_time)
        if lo < 0 or hi > n:
            raise BoundsError(
                f"utterance [{u.start_time}, {u.stop_time})s maps to samples "
                f"[{lo}, {hi}) outside the session's {n} samples"
            )
        spans.append(session.samples[lo:hi])
    return Waveform(np.concatenate(spans), SAMPLE_RATE, segment.participant_id)


def emit_segments_csv(segments: list[Segment], path) -> int:
    """Write the segments table; returns the number of data rows."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SEGMENT_CSV_HEADER)
        for s in segments:
            writer.writerow([s.participant_id, s.segment_index, s.text, s.label])
    return len(segments)


@dataclass
class SegmentRow:
    participant_id: str
    segment_index: int
    text: str
    phq8: int


def read_segments_csv(path) -> list[SegmentRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SEGMENT_CSV_HEADER:
            raise ParseError(f"{path}: expected header {SEGMENT_CSV_HEADER}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append(SegmentRow(row[0], int(row[1]), row[2], int(row[3])))
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
    return rows


def aggregate_scores(records) -> dict[str, float]:
    """Mean segment score per participant, clamped to 0..24 for reporting."""
    sums: dict[str, list[float]] = {}
    for pid, score in records:
        sums.setdefault(str(pid), []).append(float(score))
    return {
        pid: float(np.clip(np.mean(np.asarray(v, dtype=np.float64)), 0.0, 24.0))
        for pid, v in sums.items()
    }


@dataclass
class SplitManifest:
    splits: dict[str, list[str]] = field(default_factory=dict)
    scores: dict[str, int] = field(default_factory=dict)
    binary: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            if split not in SPLITS:
                raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
            for pid in ids:
                if pid in seen:
                    raise ValidationError(
                        f"participant {pid} appears in both {seen[pid]} and {split}"
                    )
                seen[pid] = split
                if pid not in self.scores:
                    raise ValidationError(f"participant {pid} has no questionnaire score")

    def ids(self, split: str) -> list[str]:
        return list(self.splits.get(split, []))

    def all_ids(self) -> list[str]:
        return [pid for split in SPLITS for pid in self.splits.get(split, [])]

    def sizes(self) -> dict[str, int]:
        return {split: len(self.splits.get(split, [])) for split in SPLITS}


def load_manifest(path) -> SplitManifest:
    splits: dict[str, list[str]] = {}
    scores: dict[str, int] = {}
    binary: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ParseError(f"{path}: expected header {MANIFEST_HEADER}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            pid, split, phq_bin, phq = row
            try:
                scores[pid] = int(phq)
                binary[pid] = int(phq_bin)
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
            splits.setdefault(split, []).append(pid)
    return SplitManifest(splits, scores, binary)


def save_manifest(manifest: SplitManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for split in SPLITS:
            for pid in manifest.splits.get(split, []):
                writer.writerow([pid, split, manifest.binary.get(pid, 0), manifest.scores[pid]])


@dataclass
class PrepSummary:
    segments_per_split: dict[str, int]
    participants: int
    utterances_kept: int
    wav_files: int


def prepare_corpus(
    corpus_dir,
    manifest: SplitManifest,
    out_dir,
    write_segment_wavs: bool = True,
) -> PrepSummary:
    """Run the full preprocessing over a DAIC-style directory tree.

    Expects {pid}_P/{pid}_TRANSCRIPT.csv and {pid}_P/{pid}_AUDIO.wav per
    participant. Writes segments_{split}.csv plus per-segment WAVs named
    {pid}_{segment_index}.wav under out_dir/audio. Deterministic: outputs
    are byte-identical across runs over the same inputs.
    """
    from .audio import load_wav, save_wav

    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    audio_dir = out_dir / "audio"
    if write_segment_wavs:
        audio_dir.mkdir(exist_ok=True)

    per_split: dict[str, int] = {}
    participants = 0
    kept = 0
    wavs = 0
    for split in SPLITS:
        split_segments: list[Segment] = []
        for pid in manifest.ids(split):
            session_dir = corpus_dir / f"{pid}_P"
            utterances = parse_transcript(session_dir / f"{pid}_TRANSCRIPT.csv")
            own = filter_participant(utterances)
            segments = chunk_five(own, pid, manifest.scores[pid])
            participants += 1
            kept += len(own)
            if write_segment_wavs:
                session = load_wav(session_dir / f"{pid}_AUDIO.wav", participant_id=pid)
                for seg in segments:
                    seg.waveform = slice_audio(session, seg)
                    save_wav(audio_dir / f"{pid}_{seg.segment_index}.wav", seg.waveform)
                    wavs += 1
            split_segments.extend(segments)
        emit_segments_csv(split_segments, out_dir / f"segments_{split}.csv")
        per_split[split] = len(split_segments)
    return PrepSummary(per_split, participants, kept, wavs)
