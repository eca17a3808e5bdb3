"""Synthetic interview-corpus and knowledge-text generators.

Everything here is seeded and byte-deterministic, so the full pipeline,
training smokes, and CLI walkthroughs run without any licensed data. The
directory layout mirrors the real corpus: one {pid}_P folder per
participant holding {pid}_TRANSCRIPT.csv and {pid}_AUDIO.wav, plus a
split_manifest.csv at the root.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, save_wav
from .data import SplitManifest, save_manifest
from .seeding import substream

# Word banks keyed by severity bucket (score // 9): mild, moderate, severe.
_BANKS = (
    ("okay", "fine", "good", "went out", "slept well", "saw friends",
     "work was fine", "pretty happy", "relaxed", "normal week"),
    ("tired", "stressed", "hard to focus", "some worry", "up and down",
     "not great", "a bit low", "restless nights", "less energy", "flat"),
    ("hopeless", "exhausted", "could not sleep", "no appetite", "very low",
     "everything is heavy", "cried a lot", "stayed in bed", "numb", "alone"),
)

_QUESTIONS = (
    "how have you been feeling lately",
    "tell me about your sleep",
    "what do you do to relax",
    "how is work going",
    "who do you spend time with",
)


def _session_waveform(rng: np.random.Generator, n_samples: int) -> Waveform:
    t = np.arange(n_samples, dtype=np.float64) / SAMPLE_RATE
    freq = float(rng.uniform(120.0, 400.0))
    wave = 0.4 * np.sin(2 * np.pi * freq * t) + 0.05 * rng.standard_normal(n_samples)
    return Waveform(np.clip(wave, -0.99, 0.99).astype(np.float32))


def _utterance_text(rng: np.random.Generator, score: int) -> str:
    bank = _BANKS[min(score // 9, 2)]
    k = int(rng.integers(2, 5))
    return " ".join(bank[int(i)] for i in rng.integers(0, len(bank), size=k))


def make_corpus(
    root,
    n_train: int = 7,
    n_dev: int = 2,
    n_test: int = 3,
    utterances_low: int = 8,
    utterances_high: int = 14,
    seconds_low: float = 0.05,
    seconds_high: float = 0.12,
    seed: int = 42,
) -> SplitManifest:
    """Write a DAIC-style tree under root and return its split manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = substream(seed, "fixtures")

    counts = {"train": n_train, "dev": n_dev, "test": n_test}
    splits: dict[str, list[str]] = {s: [] for s in counts}
    scores: dict[str, int] = {}
    binary: dict[str, int] = {}
    pid_counter = 300
    for split, n in counts.items():
        for _ in range(n):
            pid = str(pid_counter)
            pid_counter += 1
            splits[split].append(pid)
            score = int(rng.integers(0, 25))
            scores[pid] = score
            binary[pid] = int(score >= 10)
            _write_session(root, pid, score, rng,
                           utterances_low, utterances_high, seconds_low, seconds_high)
    manifest = SplitManifest(splits, scores, binary)
    save_manifest(manifest, root / "split_manifest.csv")
    return manifest


def _write_session(
    root: Path,
    pid: str,
    score: int,
    rng: np.random.Generator,
    utt_low: int,
    utt_high: int,
    sec_low: float,
    sec_high: float,
) -> None:
    session_dir = root / f"{pid}_P"
    session_dir.mkdir(exist_ok=True)
    n_utt = int(rng.integers(utt_low, utt_high + 1))
    lines = ["start_time\tstop_time\tspeaker\tvalue"]
    t = float(rng.uniform(0.05, 0.2))
    for i in range(n_utt):
        q_dur = float(rng.uniform(sec_low, sec_high))
        lines.append(f"{t:.3f}\t{t + q_dur:.3f}\tEllie\t{_QUESTIONS[i % len(_QUESTIONS)]}")
        t += q_dur + float(rng.uniform(0.01, 0.03))
        p_dur = float(rng.uniform(sec_low, sec_high))
        lines.append(f"{t:.3f}\t{t + p_dur:.3f}\tParticipant\t{_utterance_text(rng, score)}")
        t += p_dur + float(rng.uniform(0.01, 0.03))
    (session_dir / f"{pid}_TRANSCRIPT.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    n_samples = int(np.ceil((t + 0.1) * SAMPLE_RATE))
    save_wav(session_dir / f"{pid}_AUDIO.wav", _session_waveform(rng, n_samples))


# Health-classification-style entries. Every title carries one of the
# filter keywords, so a generated file of N entries yields N retained
# sources after filtering.
_KNOWLEDGE_ENTRIES = (
    ("Depressive episode",
     "A depressive episode involves a persistent low mood and a loss of interest "
     "in daily activities lasting at least two weeks, affecting an estimated "
     "{pct}% of adults."),
    ("Chronic stress reaction",
     "Chronic stress at work or home can raise the risk of depressive episodes. "
     "Regular physical activity and stable sleep are protective factors."),
    ("Generalised anxiety disorder",
     "Anxiety disorders frequently co-occur with low mood; around {pct}% of "
     "people with one condition report symptoms of the other."),
    ("Social isolation in later life",
     "Social isolation is strongly associated with worse outcomes in depressive "
     "illness, particularly among older adults."),
    ("Persistent mood disturbance",
     "Persistent changes in mood, appetite, or concentration can signal a "
     "depressive episode and warrant professional screening."),
    ("Recurrent depressive disorder",
     "Repeated depressive episodes can become chronic and are a leading cause "
     "of disability worldwide, yet effective psychological treatment exists."),
)


def make_knowledge_file(path, n_entries: int = 123, seed: int = 42) -> int:
    """Write a JSONL knowledge dump; every entry passes keyword filtering."""
    rng = substream(seed, "fixtures")
    lines = []
    for i in range(n_entries):
        title, template = _KNOWLEDGE_ENTRIES[i % len(_KNOWLEDGE_ENTRIES)]
        paragraph = template.format(pct=int(rng.integers(3, 30)))
        lines.append(json.dumps(
            {"source_id": f"src-{i:04d}", "title": title, "paragraph": paragraph},
            sort_keys=True,
        ))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return n_entries
