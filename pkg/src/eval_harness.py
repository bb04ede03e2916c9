"""
Evaluation Harness
Parses model answers and scores them: exact match for choices, mean relative accuracy
for numbers, normalized match for free text. Aggregates per-category reports.
"""

import json
import math
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd
from loguru import logger

from .errors import EmptyInput, IoError, ParseError, ValidationError
from .lmm_gateway import ModelResponse
from .qa_generator import AnswerKind, QACategory, QAItem

CATEGORY_ORDER = (
    QACategory.COUNT,
    QACategory.ABS_DISTANCE,
    QACategory.ROOM_SIZE,
    QACategory.OBJ_SIZE,
    QACategory.REL_DISTANCE,
    QACategory.REL_DIRECTION,
    QACategory.ROUTE_PLAN,
    QACategory.OBJ_ATTRIBUTE,
    QACategory.BINARY_VERIFY,
    QACategory.LOCALIZATION,
)
CATEGORY_TITLES = {
    QACategory.COUNT: "Obj. Count",
    QACategory.ABS_DISTANCE: "Abs. Dist.",
    QACategory.ROOM_SIZE: "Room Size",
    QACategory.OBJ_SIZE: "Obj. Size",
    QACategory.REL_DISTANCE: "Rel. Dist.",
    QACategory.REL_DIRECTION: "Rel. Dir.",
    QACategory.ROUTE_PLAN: "Route Plan",
    QACategory.OBJ_ATTRIBUTE: "Obj. Attr.",
    QACategory.BINARY_VERIFY: "Binary",
    QACategory.LOCALIZATION: "Loc.",
}

# Thresholds 0.50, 0.55, ..., 0.95 as integer percents of tolerated relative error
MRA_TOLERANCES_PCT = tuple(50 - 5 * k for k in range(10))

ANSWER_TAG = re.compile(r"<answer>(.*?)</answer>", re.IGNORECASE | re.DOTALL)
NUMBER = re.compile(r"-?\d+(?:\.\d+)?")
UNIT_AFTER = re.compile(
    r"^\s*(m²|m\^2|m2|sq\.?\s*m|square\s+met(?:er|re)s?|cm|centimet(?:er|re)s?|m|met(?:er|re)s?)\b",
    re.IGNORECASE,
)
ARTICLES = re.compile(r"\b(a|an|the)\b")

WORD_NUMBERS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5, "six": 6, "seven": 7,
    "eight": 8, "nine": 9, "ten": 10, "eleven": 11, "twelve": 12, "thirteen": 13,
    "fourteen": 14, "fifteen": 15, "sixteen": 16, "seventeen": 17, "eighteen": 18,
    "nineteen": 19, "twenty": 20, "thirty": 30, "forty": 40, "fifty": 50,
}
WORD_NUMBER = re.compile(r"\b(" + "|".join(WORD_NUMBERS) + r")\b", re.IGNORECASE)


class ParsedKind(str, Enum):
    CHOICE = "CHOICE"
    NUMERIC = "NUMERIC"
    TEXT = "TEXT"
    UNPARSEABLE = "UNPARSEABLE"


@dataclass(frozen=True)
class ParsedAnswer:
    kind: ParsedKind
    choice_text: Optional[str] = None
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind == ParsedKind.NUMERIC and self.value is None:
            raise ValidationError("value", "NUMERIC answers need a value")
        if self.kind in (ParsedKind.CHOICE, ParsedKind.TEXT) and self.choice_text is None:
            raise ValidationError("choice_text", f"{self.kind.value} answers need text")


UNPARSEABLE = ParsedAnswer(ParsedKind.UNPARSEABLE)


def _answer_region(raw: str) -> Optional[str]:
    """Contents of the last <answer> tag, or None"""
    tagged = ANSWER_TAG.findall(raw)
    if tagged:
        return tagged[-1].strip()
    return None


def _strip_reasoning(raw: str) -> str:
    if "</think>" in raw.lower():
        return raw[raw.lower().rfind("</think>") + len("</think>"):]
    return raw


def _convert(value: float, said_unit: Optional[str], unit: Optional[str]) -> float:
    if not said_unit or not unit:
        return value
    said = said_unit.lower()
    said_cm = said.startswith("c")
    said_m = said in ("m",) or said.startswith("met")
    if unit == "m" and said_cm:
        return value / 100.0
    if unit == "cm" and said_m:
        return value * 100.0
    return value


def _parse_numeric(text: str, unit: Optional[str]) -> ParsedAnswer:
    text = WORD_NUMBER.sub(lambda m: str(WORD_NUMBERS[m.group(1).lower()]), text)
    text = re.sub(r"(?<=\d),(?=\d{3}\b)", "", text)
    matches = list(NUMBER.finditer(text))
    if not matches:
        return UNPARSEABLE
    last = matches[-1]
    value = float(last.group(0))
    said = UNIT_AFTER.match(text[last.end():])
    value = _convert(value, said.group(1) if said else None, unit)
    if not math.isfinite(value):
        return UNPARSEABLE
    return ParsedAnswer(ParsedKind.NUMERIC, value=value)


def _parse_choice(text: str, tagged: bool, choices: Optional[Sequence[str]]) -> ParsedAnswer:
    n_letters = len(choices) if choices else 8
    letters = string.ascii_uppercase[:n_letters]
    cleaned = text.strip().strip(".:;!").strip()
    cleaned = re.sub(r"^(?:the\s+)?(?:answer|option)(?:\s+is)?\s*[:\-]?\s*", "", cleaned, flags=re.IGNORECASE)
    if tagged:
        single = re.fullmatch(r"\(?([A-Za-z])\)?(?:[.):]\s*.*)?", cleaned, re.DOTALL)
        after = cleaned[single.end(1):single.end(1) + 1] if single else ""
        if single and single.group(1).upper() in letters and not after.isalpha():
            return ParsedAnswer(ParsedKind.CHOICE, choice_text=single.group(1).upper())
        if cleaned:
            return ParsedAnswer(ParsedKind.CHOICE, choice_text=cleaned)
        return UNPARSEABLE
    # Delimited letters like "B)" or "B." win over a bare one such as the article "A"
    delimited = re.findall(
        r"(?<![A-Za-z])\(?([" + letters + r"])(?:\)|[.:](?![A-Za-z0-9])|[ \t]*$)", text, re.MULTILINE)
    if delimited:
        return ParsedAnswer(ParsedKind.CHOICE, choice_text=delimited[-1])
    standalone = re.findall(r"(?<![A-Za-z])([" + letters + r"])(?![A-Za-z])", text)
    if standalone:
        return ParsedAnswer(ParsedKind.CHOICE, choice_text=standalone[-1])
    if choices:
        lowered = text.lower()
        best, best_pos = None, -1
        for choice in choices:
            pos = lowered.rfind(choice.lower())
            if pos > best_pos:
                best, best_pos = choice, pos
        if best is not None:
            return ParsedAnswer(ParsedKind.CHOICE, choice_text=best)
    return UNPARSEABLE


def parse_answer(
    raw: Any,
    expected: AnswerKind,
    unit: Optional[str] = None,
    choices: Optional[Sequence[str]] = None,
) -> ParsedAnswer:
    """Total: any input yields a ParsedAnswer, UNPARSEABLE when nothing usable is found"""
    if not isinstance(raw, str) or not raw.strip():
        return UNPARSEABLE
    try:
        expected = AnswerKind(expected)
        region = _answer_region(raw)
        tagged = region is not None
        text = region if tagged else _strip_reasoning(raw)
        if expected == AnswerKind.NUMERIC:
            return _parse_numeric(text, unit)
        if expected == AnswerKind.CHOICE:
            return _parse_choice(text, tagged, choices)
        cleaned = text.strip()
        return ParsedAnswer(ParsedKind.TEXT, choice_text=cleaned) if cleaned else UNPARSEABLE
    except (ValueError, TypeError, re.error) as e:
        logger.debug("Unparseable answer: {}", e)
        return UNPARSEABLE


def _normalize(text: str) -> str:
    text = text.lower().strip()
    text = text.translate(str.maketrans("", "", string.punctuation))
    text = ARTICLES.sub(" ", text)
    return " ".join(text.split())


def score_choice(parsed: ParsedAnswer, item: QAItem) -> float:
    """1 iff the letter or the full text of the correct choice was given"""
    if parsed.kind != ParsedKind.CHOICE or item.answer_kind != AnswerKind.CHOICE:
        return 0.0
    answer = parsed.choice_text.strip()
    correct_letter = string.ascii_uppercase[item.correct_choice]
    if len(answer) == 1:
        return 1.0 if answer.upper() == correct_letter else 0.0
    return 1.0 if answer.lower().strip(" .") == item.correct_text.lower().strip() else 0.0


def score_numeric_mra(parsed: ParsedAnswer, item: QAItem) -> float:
    """Mean over ten relative-error thresholds; exact match required when the gold is 0"""
    if parsed.kind != ParsedKind.NUMERIC or item.answer_kind != AnswerKind.NUMERIC:
        return 0.0
    p, g = parsed.value, item.numeric_answer
    if g == 0:
        return 1.0 if p == 0 else 0.0
    error = 100.0 * abs(p - g)
    return sum(1 for pct in MRA_TOLERANCES_PCT if error < pct * g) / len(MRA_TOLERANCES_PCT)


def score_text(parsed: ParsedAnswer, item: QAItem) -> float:
    if parsed.kind != ParsedKind.TEXT or item.answer_kind != AnswerKind.TEXT:
        return 0.0
    return 1.0 if _normalize(parsed.choice_text) == _normalize(item.text_answer) else 0.0


def score_item(item: QAItem, raw: Optional[str]) -> float:
    parsed = parse_answer(raw, item.answer_kind, unit=item.unit, choices=item.choices)
    if item.answer_kind == AnswerKind.CHOICE:
        return score_choice(parsed, item)
    if item.answer_kind == AnswerKind.NUMERIC:
        return score_numeric_mra(parsed, item)
    return score_text(parsed, item)


@dataclass(frozen=True)
class ScoredItem:
    qa_id: str
    category: QACategory
    score: float


@dataclass
class EvalReport:
    per_item: List[ScoredItem]
    per_category: Dict[str, float]
    overall: float
    weighted: bool = False
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_item": [
                {"qa_id": s.qa_id, "category": s.category.value, "score": s.score} for s in self.per_item
            ],
            "per_category": dict(self.per_category),
            "counts": dict(self.counts),
            "overall": self.overall,
            "weighted": self.weighted,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        try:
            return cls(
                per_item=[
                    ScoredItem(str(e["qa_id"]), QACategory(e["category"]), float(e["score"]))
                    for e in data["per_item"]
                ],
                per_category={str(k): float(v) for k, v in data["per_category"].items()},
                overall=float(data["overall"]),
                weighted=bool(data.get("weighted", False)),
                counts={str(k): int(v) for k, v in data.get("counts", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed evaluation report: {e}") from e

    def export_to_json(self, output_path: str):
        try:
            with open(output_path, "w", encoding="utf-8", newline="\n") as f:
                json.dump(self.to_dict(), f, indent=2)
                f.write("\n")
        except OSError as e:
            raise IoError(f"cannot write report {output_path}: {e}") from e


def aggregate(scored: Sequence[ScoredItem], weighted: bool = False) -> EvalReport:
    """Per-category means x100 in table order; overall is the mean of category means unless weighted"""
    if not scored:
        raise EmptyInput("no scored items to aggregate")
    seen = set()
    for s in scored:
        if s.qa_id in seen:
            raise ValidationError("qa_id", f"{s.qa_id} scored more than once")
        seen.add(s.qa_id)

    frame = pd.DataFrame({"category": [s.category.value for s in scored], "score": [s.score for s in scored]})
    grouped = frame.groupby("category")["score"].agg(["mean", "count"])
    order = [c.value for c in CATEGORY_ORDER if c.value in grouped.index]
    per_category = {c: float(grouped.loc[c, "mean"]) * 100.0 for c in order}
    counts = {c: int(grouped.loc[c, "count"]) for c in order}
    if weighted:
        overall = float(frame["score"].mean()) * 100.0
    else:
        overall = sum(per_category.values()) / len(per_category)
    return EvalReport(per_item=list(scored), per_category=per_category, overall=overall, weighted=weighted, counts=counts)


def evaluate(
    items: Sequence[QAItem],
    responses: Iterable[ModelResponse],
    weighted: bool = False,
) -> EvalReport:
    """Score items against responses by qa_id; items without a successful response score 0"""
    by_id: Mapping[str, ModelResponse] = {r.qa_id: r for r in responses}
    scored = []
    missing = 0
    for item in items:
        response = by_id.get(item.qa_id)
        if response is None or not response.ok:
            missing += 1
        raw = response.raw_text if response is not None else None
        scored.append(ScoredItem(item.qa_id, item.category, score_item(item, raw)))
    if missing:
        logger.warning("{} of {} items have no successful response and score 0", missing, len(items))
    return aggregate(scored, weighted=weighted)


def render_table(report: EvalReport) -> str:
    """Aligned one-row table: one column per category, then Avg."""
    columns = {}
    for category, value in report.per_category.items():
        columns[CATEGORY_TITLES[QACategory(category)]] = [f"{value:.1f}"]
    columns["Avg."] = [f"{report.overall:.1f}"]
    return pd.DataFrame(columns, index=["score"]).to_string()
