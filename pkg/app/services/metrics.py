"""Exact Match and Edit Similarity between a predicted line and the ground truth."""

from pydantic import BaseModel, model_validator


# Recorded in run metadata; EM and ES compare normalized strings
NORMALIZATION = "strip"


class EvalResult(BaseModel):
    """Scores of one prediction."""

    em: int
    es: float

    @model_validator(mode="after")
    def _consistent(self) -> "EvalResult":
        if self.em not in (0, 1) or not 0.0 <= self.es <= 1.0:
            raise ValueError("em must be 0/1 and es in [0, 1]")
        if self.em == 1 and self.es != 1.0:
            raise ValueError("em == 1 requires es == 1.0")
        return self


def normalize(line: str) -> str:
    """Strip leading and trailing whitespace; inner characters are untouched."""
    return line.strip()


def exact_match(pred: str, truth: str) -> int:
    """1 if the normalized strings are equal, else 0."""
    return int(normalize(pred) == normalize(truth))


def levenshtein(a: str, b: str) -> int:
    """
    Character-level edit distance between the normalized strings.

    Counts the minimum number of single-character insertions, deletions and
    substitutions turning a into b. Two-row dynamic programming.

    Examples:
        levenshtein("kitten", "sitting") == 3
        levenshtein("", "abc") == 3
    """
    a = normalize(a)
    b = normalize(b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)

    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            cost = 0 if ca == cb else 1
            current.append(min(previous[j] + 1,
                               current[j - 1] + 1,
                               previous[j - 1] + cost))
        previous = current
    return previous[-1]


def edit_similarity(pred: str, truth: str) -> float:
    """
    ES = 1 - Lev(pred, truth) / max(|pred|, |truth|) on normalized strings.

    Both strings empty after normalization score 1.0.
    """
    p = normalize(pred)
    t = normalize(truth)
    longest = max(len(p), len(t))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(p, t) / longest


def evaluate(pred: str, truth: str) -> EvalResult:
    """Compute both metrics for one prediction."""
    em = exact_match(pred, truth)
    es = 1.0 if em else edit_similarity(pred, truth)
    return EvalResult(em=em, es=es)
