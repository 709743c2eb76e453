"""The evaluation criteria universe and the task hierarchies used when rethinking."""

import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from enum import StrEnum

MAX_CRITERIA = 9
MIN_SELECTED = 1
MAX_SELECTED = 3

DEFAULT_CRITERIA: tuple[tuple[str, str], ...] = (
    (
        "Information Accuracy",
        "Whether stated facts, figures and claims are correct and verifiable.",
    ),
    (
        "Logical Reasoning",
        "Whether the argument or derivation is valid, coherent and free of gaps.",
    ),
    (
        "Implementation Capability",
        "Whether code or procedures actually work and solve the stated problem.",
    ),
    (
        "Computational Precision",
        "Whether calculations, numeric results and edge-case handling are exact.",
    ),
    (
        "Instruction Adherence",
        "Whether every explicit requirement and constraint of the prompt is met.",
    ),
    (
        "Writing Clarity",
        "Whether the response is well organized, readable and unambiguous.",
    ),
    (
        "Content Relevance",
        "Whether the response stays on the question and omits filler.",
    ),
    (
        "Safety & Harmlessness",
        "Whether the response avoids harmful, dangerous or unethical content.",
    ),
    (
        "Intent Alignment",
        "Whether the response serves what the user actually wants to achieve.",
    ),
)

_WHITESPACE = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    """Lowercase a criterion name and collapse internal whitespace."""
    return _WHITESPACE.sub(" ", name).strip().lower()


@dataclass(frozen=True)
class EvaluationCriterion:
    """
    One cognitive dimension a judge may focus on.

    Attributes:
        id: Small integer identifier, contiguous from 1 within a `CriteriaSet`.
        name: Short display name, e.g. "Logical Reasoning".
        description: One-sentence description shown in the criteria menu.
    """

    id: int
    name: str
    description: str

    def __post_init__(self) -> None:
        """Reject nameless criteria."""
        if not self.name.strip():
            msg = f"Criterion {self.id} has an empty name."
            raise ValueError(msg)


class CriteriaSet:
    """An ordered, immutable collection of `EvaluationCriterion`s."""

    def __init__(self, criteria: Iterable[EvaluationCriterion]) -> None:
        """
        Instantiate a `CriteriaSet`.

        Args:
            criteria: The criteria, ordered by id.

        Raises:
            ValueError: If the set is empty or larger than nine, ids are not
              contiguous from 1, or two criteria share a (normalized) name.
        """
        self._criteria = tuple(criteria)
        if not 0 < len(self._criteria) <= MAX_CRITERIA:
            msg = (
                f"A criteria set needs 1 to {MAX_CRITERIA} criteria, "
                f"got {len(self._criteria)}."
            )
            raise ValueError(msg)

        ids = [criterion.id for criterion in self._criteria]
        if ids != list(range(1, len(ids) + 1)):
            msg = f"Criterion ids must be unique and contiguous from 1, got {ids}."
            raise ValueError(msg)

        self._by_name = {normalize_name(c.name): c for c in self._criteria}
        if len(self._by_name) != len(self._criteria):
            msg = "Criterion names must be unique (case-insensitive)."
            raise ValueError(msg)
        self._by_id = {c.id: c for c in self._criteria}

    @classmethod
    def default(cls) -> "CriteriaSet":
        """Build the nine-criterion default set."""
        return cls.from_pairs(DEFAULT_CRITERIA)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "CriteriaSet":
        """Build a set from `(name, description)` pairs, numbering them from 1."""
        return cls(
            EvaluationCriterion(id=index, name=name, description=description)
            for index, (name, description) in enumerate(pairs, start=1)
        )

    def __iter__(self) -> Iterator[EvaluationCriterion]:
        """Iterate the criteria in id order."""
        return iter(self._criteria)

    def __len__(self) -> int:
        """Return the number of criteria."""
        return len(self._criteria)

    def by_id(self, criterion_id: int) -> EvaluationCriterion:
        """
        Look up a criterion by id.

        Raises:
            KeyError: If no criterion has `criterion_id`.
        """
        return self._by_id[criterion_id]

    def lookup(self, name: str) -> EvaluationCriterion | None:
        """Look up a criterion by name, ignoring case and extra whitespace."""
        return self._by_name.get(normalize_name(name))

    @property
    def ids(self) -> tuple[int, ...]:
        """All criterion ids, in order."""
        return tuple(self._by_id)

    @property
    def names(self) -> tuple[str, ...]:
        """All criterion names, in id order."""
        return tuple(c.name for c in self._criteria)


class TaskFamily(StrEnum):
    """Families of tasks, each with its own importance ordering."""

    ACCURACY_CRITICAL = "accuracy_critical"
    CREATIVE = "creative"
    GENERAL = "general"


DEFAULT_HIERARCHIES: dict[TaskFamily, tuple[str, ...]] = {
    TaskFamily.ACCURACY_CRITICAL: ("Correctness", "Process", "Presentation"),
    TaskFamily.CREATIVE: ("Intent Alignment", "Quality", "Novelty"),
    TaskFamily.GENERAL: ("Correctness", "Process", "Presentation"),
}

DEFAULT_DOMAIN_FAMILIES: dict[str, TaskFamily] = {
    "math": TaskFamily.ACCURACY_CRITICAL,
    "code": TaskFamily.ACCURACY_CRITICAL,
    "reasoning": TaskFamily.ACCURACY_CRITICAL,
    "safety": TaskFamily.ACCURACY_CRITICAL,
    "creative": TaskFamily.CREATIVE,
    "writing": TaskFamily.CREATIVE,
}


@dataclass(frozen=True)
class TaskHierarchy:
    """
    A strict importance ordering over criterion groups for one task family.

    Attributes:
        task_family: The family this ordering applies to.
        ordering: Group labels, most important first.
    """

    task_family: TaskFamily
    ordering: tuple[str, ...]

    def __post_init__(self) -> None:
        """Reject empty or repeating orderings."""
        if not self.ordering:
            msg = f"Hierarchy for {self.task_family} is empty."
            raise ValueError(msg)
        if len({normalize_name(label) for label in self.ordering}) != len(
            self.ordering
        ):
            msg = f"Hierarchy for {self.task_family} repeats a label: {self.ordering}"
            raise ValueError(msg)

    def render(self) -> str:
        """Render the ordering as e.g. "Correctness > Process > Presentation"."""
        return " > ".join(self.ordering)


def hierarchy_for_domain(
    domain: str | None,
    hierarchies: dict[TaskFamily, tuple[str, ...]] | None = None,
    domain_families: dict[str, TaskFamily] | None = None,
) -> TaskHierarchy:
    """
    Pick the task hierarchy for an item's domain tag.

    Untagged items and unmapped domains use the general family.

    Args:
        domain: The item's domain tag, if any.
        hierarchies: Family to ordering mapping; defaults to `DEFAULT_HIERARCHIES`.
        domain_families: Domain to family mapping; defaults to
          `DEFAULT_DOMAIN_FAMILIES`.

    Returns:
        The `TaskHierarchy` to condition the rethinking turn on.
    """
    hierarchies = hierarchies or DEFAULT_HIERARCHIES
    domain_families = domain_families or DEFAULT_DOMAIN_FAMILIES

    family = TaskFamily.GENERAL
    if domain is not None:
        family = domain_families.get(domain.strip().lower(), TaskFamily.GENERAL)
    return TaskHierarchy(task_family=family, ordering=tuple(hierarchies[family]))
