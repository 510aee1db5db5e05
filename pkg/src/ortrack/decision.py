"""Concept-selection toolkit: morphological matrix, QFD, Pugh, risk matrix.

The pipeline mirrors a standard systems-engineering concept selection:
compose candidate concepts from a functions-by-options grid, weight the
engineering characteristics by how strongly they correlate with weighted
stakeholder needs (QFD, 0/1/3/9 scale), screen concepts against a datum
(Pugh, -1/0/+1), then rank the survivors by weighted scores. A two-axis
projection (qualitative vs technical) and a 5x5 likelihood-consequence
risk score round out the kit.

Everything here is exact integer/fraction arithmetic until the final
normalizations, and all orderings are stable: ties keep declaration order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

QFD_SCALE = (0, 1, 3, 9)


class DegenerateInputError(ValueError):
    """All correlations are zero; no weights can be derived."""


class DatumNotZeroError(ValueError):
    """The datum column of a screening matrix must be all zeros."""


class DimensionMismatchError(ValueError):
    """Matrix dimensions disagree with the declared criteria or weights."""


class KeyMismatchError(ValueError):
    """Two rankings do not cover the same concepts."""


class OutOfRangeError(ValueError):
    """A likelihood or consequence is outside the 1..5 grid."""


class InvalidOptionError(ValueError):
    """A concept selection is missing a function or picks an unknown option."""


# --------------------------------------------------------------------------
# Morphological matrix


@dataclass
class Concept:
    name: str
    selections: dict[str, str]  # function -> chosen option


@dataclass
class MorphMatrix:
    """Functions (rows) by solution options (cells); concepts pick one per row."""

    functions: list[str]
    options: dict[str, list[str]]
    concepts: dict[str, Concept] = field(default_factory=dict)


def mix_and_match(matrix: MorphMatrix, name: str,
                  selections: dict[str, str]) -> Concept:
    """Compose a new concept by picking one option per function."""
    for function in matrix.functions:
        choice = selections.get(function)
        if choice is None:
            raise InvalidOptionError(f"no option selected for {function!r}")
        if choice not in matrix.options[function]:
            raise InvalidOptionError(
                f"{choice!r} is not an option for {function!r}")
    extra = set(selections) - set(matrix.functions)
    if extra:
        raise InvalidOptionError(f"unknown functions: {sorted(extra)}")
    concept = Concept(name=name, selections=dict(selections))
    matrix.concepts[name] = concept
    return concept


# --------------------------------------------------------------------------
# QFD weighting


@dataclass
class QfdInput:
    """Stakeholder needs vs engineering characteristics correlation."""

    needs: list[tuple[str, float]]
    characteristics: list[str]
    correlation: list[list[int]]  # rows follow needs, columns characteristics

    def __post_init__(self) -> None:
        if len(self.correlation) != len(self.needs):
            raise DimensionMismatchError(
                f"{len(self.correlation)} correlation rows for {len(self.needs)} needs")
        for name, importance in self.needs:
            if importance <= 0:
                raise DimensionMismatchError(f"need {name!r} has importance <= 0")
        for i, row in enumerate(self.correlation):
            if len(row) != len(self.characteristics):
                raise DimensionMismatchError(
                    f"correlation row {i} has {len(row)} entries, "
                    f"expected {len(self.characteristics)}")
            for value in row:
                if value not in QFD_SCALE:
                    raise DimensionMismatchError(
                        f"correlation entries must be one of {QFD_SCALE}, got {value}")

    def flagged_characteristics(self) -> list[str]:
        """Characteristics no need correlates with at all."""
        flagged = []
        for j, name in enumerate(self.characteristics):
            if all(row[j] == 0 for row in self.correlation):
                flagged.append(name)
        return flagged


def qfd_weights(qfd: QfdInput) -> dict[str, float]:
    """Importance-weighted column sums, normalized to sum to one."""
    raw = []
    for j, _ in enumerate(qfd.characteristics):
        raw.append(sum(importance * qfd.correlation[i][j]
                       for i, (_, importance) in enumerate(qfd.needs)))
    total = sum(raw)
    if total == 0:
        raise DegenerateInputError("all correlations are zero")
    return {name: value / total for name, value in zip(qfd.characteristics, raw)}


def select_top_k(weights: dict[str, float], k: int) -> list[str]:
    """Top-k characteristic names by weight; ties keep declaration order."""
    if k > len(weights):
        raise DimensionMismatchError(f"k={k} exceeds {len(weights)} characteristics")
    ordered = sorted(weights, key=lambda name: -weights[name])
    return ordered[:k]


# --------------------------------------------------------------------------
# Pugh screening and weighted ranking


class PughMode(Enum):
    SCREENING = "Screening"
    WEIGHTED = "Weighted"


@dataclass
class PughMatrix:
    concepts: list[str]
    criteria: list[str]
    mode: PughMode
    scores: dict[str, list[float]]  # concept -> per-criterion scores
    datum: str | None = None  # screening only
    weights: list[float] | None = None  # weighted only

    def __post_init__(self) -> None:
        for concept in self.concepts:
            row = self.scores.get(concept)
            if row is None or len(row) != len(self.criteria):
                raise DimensionMismatchError(
                    f"concept {concept!r} needs {len(self.criteria)} scores")
        if self.mode is PughMode.SCREENING:
            if self.datum not in self.concepts:
                raise DimensionMismatchError(f"datum {self.datum!r} not a concept")
            for row in self.scores.values():
                for value in row:
                    if value not in (-1, 0, 1):
                        raise DimensionMismatchError(
                            f"screening entries must be -1, 0 or +1, got {value}")
        else:
            if self.weights is None or len(self.weights) != len(self.criteria):
                raise DimensionMismatchError("weighted mode needs one weight per criterion")
            if any(w <= 0 for w in self.weights):
                raise DimensionMismatchError("weights must be positive")


def pugh_screen(matrix: PughMatrix) -> list[tuple[str, int]]:
    """Net datum-relative score per concept; net below zero eliminates."""
    if matrix.mode is not PughMode.SCREENING:
        raise DimensionMismatchError("screening requires a Screening-mode matrix")
    if any(matrix.scores[matrix.datum]):
        raise DatumNotZeroError(f"datum {matrix.datum!r} column must be all zeros")
    survivors = []
    for concept in matrix.concepts:
        net = int(sum(matrix.scores[concept]))
        if net >= 0:
            survivors.append((concept, net))
    return survivors


def pugh_rank(matrix: PughMatrix) -> list[tuple[str, float]]:
    """Weighted totals, best first; ties keep declaration order."""
    if matrix.mode is not PughMode.WEIGHTED:
        raise DimensionMismatchError("ranking requires a Weighted-mode matrix")
    totals = [(concept,
               sum(w * s for w, s in zip(matrix.weights, matrix.scores[concept])))
              for concept in matrix.concepts]
    return sorted(totals, key=lambda pair: -pair[1])


def two_axis_plot_data(technical_totals: dict[str, float],
                       qualitative_totals: dict[str, float],
                       ) -> list[tuple[str, float, float]]:
    """Plot-ready (concept, qualitative-x, technical-y), min-max scaled to [0, 1]."""
    if set(technical_totals) != set(qualitative_totals):
        raise KeyMismatchError("technical and qualitative rankings cover "
                               "different concepts")

    def scale(values: dict[str, float]) -> dict[str, float]:
        lo, hi = min(values.values()), max(values.values())
        if hi == lo:
            return {name: 1.0 for name in values}
        return {name: (v - lo) / (hi - lo) for name, v in values.items()}

    xs = scale(qualitative_totals)
    ys = scale(technical_totals)
    return [(name, xs[name], ys[name]) for name in technical_totals]


# --------------------------------------------------------------------------
# Risk matrix


@dataclass(frozen=True)
class RiskItem:
    description: str
    likelihood: int
    consequence: int
    mitigation: str = ""

    def __post_init__(self) -> None:
        for label, value in (("likelihood", self.likelihood),
                             ("consequence", self.consequence)):
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise OutOfRangeError(f"{label} must be an integer in 1..5, got {value}")


#: 5x5 grid banding; products 13 and 14 are unreachable on an integer grid.
RISK_LOW_MAX = 4
RISK_MEDIUM_MAX = 12


def risk_score(item: RiskItem) -> tuple[int, str]:
    """Likelihood times consequence, banded Low / Medium / High."""
    score = item.likelihood * item.consequence
    if score <= RISK_LOW_MAX:
        band = "Low"
    elif score <= RISK_MEDIUM_MAX:
        band = "Medium"
    else:
        band = "High"
    return score, band


# --------------------------------------------------------------------------
# CSV ingestion


def load_needs_csv(text: str) -> list[tuple[str, float]]:
    """Rows of (need, importance); header required."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip().lower() for h in header[:2]] != ["need", "importance"]:
        raise DimensionMismatchError("needs CSV must start with 'need,importance'")
    needs = []
    for row in reader:
        if not row or not row[0].strip():
            continue
        needs.append((row[0].strip(), float(row[1])))
    return needs


def load_matrix_csv(text: str, corner: str) -> tuple[list[str], list[str], list[list[float]]]:
    """Generic labeled matrix: header = corner label + column names."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or not header[1:]:
        raise DimensionMismatchError(f"{corner} CSV needs a header with column names")
    columns = [h.strip() for h in header[1:]]
    rows, values = [], []
    for row in reader:
        if not row or not row[0].strip():
            continue
        if len(row) - 1 != len(columns):
            raise DimensionMismatchError(
                f"{corner} CSV row {row[0]!r} has {len(row) - 1} values, "
                f"expected {len(columns)}")
        rows.append(row[0].strip())
        values.append([float(v) for v in row[1:]])
    return rows, columns, values


def qfd_from_csv(needs_text: str, correlation_text: str) -> QfdInput:
    """Join a needs file with a needs-by-characteristics correlation file."""
    needs = load_needs_csv(needs_text)
    row_names, characteristics, values = load_matrix_csv(correlation_text, "need")
    by_name = dict(needs)
    if set(row_names) != set(by_name):
        raise DimensionMismatchError(
            "correlation rows do not match the declared needs")
    ordered_needs = [(name, by_name[name]) for name in row_names]
    correlation = [[int(v) for v in row] for row in values]
    return QfdInput(needs=ordered_needs, characteristics=characteristics,
                    correlation=correlation)


# --------------------------------------------------------------------------
# Bundled worked example (reconstruction; the source material publishes the
# characteristic table but not the underlying correlation or score values)


def _data_text(name: str) -> str:
    return resources.files("ortrack").joinpath("data").joinpath(name).read_text()


def load_engineering_characteristics() -> list[dict]:
    """The bundled characteristic table: name, range, target, unit."""
    return json.loads(_data_text("engineering_characteristics.json"))


def load_example_qfd() -> QfdInput:
    return qfd_from_csv(_data_text("concept_eval/needs.csv"),
                        _data_text("concept_eval/correlation.csv"))


def load_example_scores() -> PughMatrix:
    """Weighted-mode matrix for the three finalist concepts."""
    concepts, criteria, values = load_matrix_csv(
        _data_text("concept_eval/scores.csv"), "concept")
    weights_by_name = qfd_weights(load_example_qfd())
    if criteria != list(weights_by_name):
        raise DimensionMismatchError("score columns do not match the QFD characteristics")
    return PughMatrix(concepts=concepts, criteria=criteria, mode=PughMode.WEIGHTED,
                      scores=dict(zip(concepts, values)),
                      weights=[weights_by_name[c] for c in criteria])


def load_example_screening() -> PughMatrix:
    concepts, criteria, values = load_matrix_csv(
        _data_text("concept_eval/screening.csv"), "concept")
    return PughMatrix(concepts=concepts, criteria=criteria, mode=PughMode.SCREENING,
                      scores={c: [int(v) for v in row]
                              for c, row in zip(concepts, values)},
                      datum=concepts[0])


def load_example_qualitative() -> dict[str, float]:
    """Equal-weight qualitative totals for the finalist concepts."""
    concepts, _criteria, values = load_matrix_csv(
        _data_text("concept_eval/qualitative.csv"), "concept")
    return {c: sum(row) for c, row in zip(concepts, values)}


def load_example_morphology() -> MorphMatrix:
    obj = json.loads(_data_text("concept_eval/morphological_matrix.json"))
    matrix = MorphMatrix(functions=obj["functions"], options=obj["options"])
    for name, selections in obj["concepts"].items():
        mix_and_match(matrix, name, selections)
    return matrix
