"""Scoring metrics and the question-answer judging protocol.

Regression quality is MAE and RMSE over per-participant averaged
predictions. Knowledge retention is probed by generating assessment
questions, sampling two answers per system per question, rating each
answer 0 to 10, and averaging the per-question maxima (so one good
answer out of two is enough, the pass@2 reading).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import aggregate_scores
from .errors import ContractError, ParseError, RangeError, ValidationError
from .knowledge import TextGenerator
from .seeding import substream_seed

logger = logging.getLogger(__name__)

TEACHER_PROMPT_TEMPLATE = (
    "Regard yourself as a teacher teaching about depression detection, and "
    "you are trying to test how well your students understand this "
    "knowledge. Generate num_questions specific questions about "
    "psychological assessment of depression to evaluate whether the "
    "students know how to assess depression. Number them as 1., 2., 3., etc."
)

RATING_PROMPT_TEMPLATE = """Rate the following response to a question about depression on a scale from 0-10:

QUESTION: question

RESPONSE: response

Evaluate based on: - Accuracy of information - Sensitivity to mental health issues - Helpfulness of the response - Appropriate tone

Rate from 0 (completely inappropriate) to 10 (excellent in all aspects). Your rating (just the number):"""

_QUESTION_LINE = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")
_FIRST_INT = re.compile(r"-?\d+")


# ---------------------------------------------------------------------------
# regression metrics


def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(list(pred), dtype=np.float64)
    t = np.asarray(list(truth), dtype=np.float64)
    if p.size == 0:
        raise ContractError("metrics need at least one prediction")
    if p.shape != t.shape:
        raise ContractError(
            f"prediction/truth length mismatch: {p.shape} vs {t.shape}"
        )
    return p, t


def mae(pred, truth) -> float:
    """Mean absolute error, computed in float64."""
    p, t = _paired(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    """Root mean squared error, computed in float64."""
    p, t = _paired(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class ParticipantRow:
    participant_id: str
    true_score: float
    predicted_mean: float
    segment_count: int


@dataclass
class EvalReport:
    mae: float
    rmse: float
    rows: list[ParticipantRow]


def evaluate(predictions, truth: Mapping[str, float]) -> EvalReport:
    """Per-participant means versus true scores.

    predictions: (participant_id, segment score) pairs; every predicted
    participant must appear in truth. Participants present only in truth
    are ignored (the prediction file defines the evaluated set).
    """
    records = [(str(pid), float(score)) for pid, score in predictions]
    if not records:
        raise ContractError("no predictions to evaluate")
    means = aggregate_scores(records)
    missing = sorted(pid for pid in means if pid not in truth)
    if missing:
        raise ValidationError(f"participants missing a true score: {missing}")
    counts: dict[str, int] = {}
    for pid, _ in records:
        counts[pid] = counts.get(pid, 0) + 1
    rows = [
        ParticipantRow(pid, float(truth[pid]), means[pid], counts[pid])
        for pid in sorted(means)
    ]
    preds = [r.predicted_mean for r in rows]
    trues = [r.true_score for r in rows]
    return EvalReport(mae(preds, trues), rmse(preds, trues), rows)


def write_eval_csv(report: EvalReport, path) -> None:
    lines = ["participant_id,true_score,predicted_mean,segment_count"]
    lines += [
        f"{r.participant_id},{r.true_score!r},{r.predicted_mean!r},{r.segment_count}"
        for r in report.rows
    ]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")


def format_eval_report(report: EvalReport) -> str:
    lines = [
        f"participants: {len(report.rows)}",
        f"mae: {report.mae:.6f}",
        f"rmse: {report.rmse:.6f}",
        "",
        f"{'participant':>12} {'true':>6} {'predicted':>10} {'segments':>8}",
    ]
    lines += [
        f"{r.participant_id:>12} {r.true_score:>6.1f} {r.predicted_mean:>10.3f} "
        f"{r.segment_count:>8}"
        for r in report.rows
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# judge protocol


def render_teacher_prompt(n: int) -> str:
    if n < 1:
        raise ContractError(f"need at least one question, got {n}")
    return TEACHER_PROMPT_TEMPLATE.replace("num_questions", str(n), 1)


def render_rating_prompt(question: str, response: str) -> str:
    # the slots are the lowercase words after the labels; replacing the
    # response slot first keeps inserted text from shadowing a slot
    out = RATING_PROMPT_TEMPLATE.replace("RESPONSE: response", f"RESPONSE: {response}", 1)
    return out.replace("QUESTION: question", f"QUESTION: {question}", 1)


def parse_numbered_questions(text: str, n: int) -> list[str]:
    """Extract questions 1..n from numbered lines.

    The number selects the question slot; noise lines, repeats of a
    number, and numbers beyond n are skipped.
    """
    found: dict[int, str] = {}
    for line in text.splitlines():
        m = _QUESTION_LINE.match(line)
        if not m:
            continue
        num = int(m.group(1))
        if 1 <= num <= n and num not in found:
            found[num] = m.group(2)
    if len(found) < n:
        raise ValidationError(
            f"parsed {len(found)} of {n} expected numbered questions",
            count=len(found),
        )
    return [found[i] for i in range(1, n + 1)]


def generate_judge_questions(generator: TextGenerator, n: int = 50) -> list[str]:
    """Ask for n numbered assessment questions and parse them out."""
    reply = generator.generate(render_teacher_prompt(n))
    return parse_numbered_questions(reply, n)


def parse_rating(text: str) -> int:
    """First integer in the reply, restricted to the 0..10 scale."""
    m = _FIRST_INT.search(text)
    if not m:
        raise ParseError(f"no integer rating in reply {text!r}")
    value = int(m.group(0))
    if not 0 <= value <= 10:
        raise RangeError(f"rating {value} outside 0..10")
    return value


@dataclass
class QuestionResult:
    index: int  # 1-based question number
    question: str
    responses: dict[str, list[str]]  # system -> sampled responses
    scores: dict[str, list[int]]  # system -> ratings, same order
    best: dict[str, int]  # system -> max rating
    valid: bool = True


@dataclass
class JudgeReport:
    questions: list[str]
    results: list[QuestionResult]
    overall: dict[str, float]
    invalid_count: int = 0
    samples_per_question: int = 2

    @property
    def valid_results(self) -> list[QuestionResult]:
        return [r for r in self.results if r.valid]


def mean_of_best(scores_by_question: Sequence[Sequence[float]]) -> float:
    """The pass@k aggregate: max within each question, mean across them."""
    if not scores_by_question:
        raise ContractError("no scored questions to aggregate")
    return float(np.mean([max(scores) for scores in scores_by_question]))


def _score_response(scorer: TextGenerator, question: str, response: str,
                    max_retries: int = 3) -> int:
    prompt = render_rating_prompt(question, response)
    last: Exception | None = None
    for _ in range(1 + max_retries):
        try:
            return parse_rating(scorer.generate(prompt, max_tokens=8, temperature=0.0))
        except (ParseError, RangeError) as e:
            last = e
    raise ValidationError(f"unusable rating after {1 + max_retries} attempts: {last}")


def judge(
    systems: Mapping[str, TextGenerator],
    scorer: TextGenerator,
    questions: Sequence[str],
    samples_per_question: int = 2,
    seed: int = 42,
    max_retries: int = 3,
    response_tokens: int = 256,
) -> JudgeReport:
    """Compare systems on the same questions with max-of-samples scoring.

    Response sampling runs at temperature 0.8 with per-sample seeds
    derived from the global seed; the scorer runs greedy. A question
    whose rating cannot be parsed for some response is dropped for every
    system so the overall means stay comparable.
    """
    if not systems:
        raise ContractError("judge needs at least one system")
    if not questions:
        raise ContractError("judge needs at least one question")
    if samples_per_question < 1:
        raise ContractError("samples_per_question must be at least 1")
    results: list[QuestionResult] = []
    for qi, question in enumerate(questions, start=1):
        responses: dict[str, list[str]] = {}
        scores: dict[str, list[int]] = {}
        valid = True
        for name, system in systems.items():
            responses[name] = []
            scores[name] = []
            for si in range(samples_per_question):
                sample_seed = substream_seed(seed, f"judge.{name}.q{qi}", si)
                reply = system.generate(
                    question, max_tokens=response_tokens,
                    temperature=0.8, seed=sample_seed,
                )
                responses[name].append(reply)
                if not valid:
                    continue
                try:
                    scores[name].append(
                        _score_response(scorer, question, reply, max_retries)
                    )
                except ValidationError as e:
                    logger.warning("question %d dropped: %s", qi, e)
                    valid = False
        best = {name: max(s) for name, s in scores.items()} if valid else {}
        results.append(QuestionResult(qi, question, responses, scores, best, valid))
    valid_results = [r for r in results if r.valid]
    if not valid_results:
        raise ValidationError("every question was dropped as unscorable")
    overall = {
        name: mean_of_best([r.scores[name] for r in valid_results])
        for name in systems
    }
    return JudgeReport(
        list(questions), results, overall,
        invalid_count=len(results) - len(valid_results),
        samples_per_question=samples_per_question,
    )


def write_judge_csv(report: JudgeReport, path) -> None:
    lines = ["question_index,system,sample_index,score,best"]
    for r in report.valid_results:
        for name in sorted(r.scores):
            for si, score in enumerate(r.scores[name]):
                lines.append(f"{r.index},{name},{si},{score},{r.best[name]}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")


def format_judge_report(report: JudgeReport) -> str:
    lines = [
        f"questions: {len(report.questions)} "
        f"(dropped {report.invalid_count} unscorable)",
        f"samples per question: {report.samples_per_question}",
        "",
    ]
    for name in sorted(report.overall):
        lines.append(f"{name}: {report.overall[name]:.2f}")
    return "\n".join(lines) + "\n"
