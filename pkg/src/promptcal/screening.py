"""Ready-made title/abstract screening contracts."""

from __future__ import annotations

from .contract import FieldSpec, TaskContract, new_contract

SCREENING_LABELS = ("include", "exclude")

STARTING_HARNESS = """\
Screen titles and abstracts for a systematic review of machine-learning-based
software defect prediction.

Context:
- The review focuses on primary empirical studies in software engineering.
- Relevant studies predict defects, bugs, faults, or fault-proneness in software artefacts.
- Relevant studies use machine learning and report an evaluation or comparison.
- Exclude reviews, surveys, bug triage, issue severity, duplicate-report detection,
  and studies that do not predict defective software artefacts.

Output:
- checks: brief fragments that connect the decision to the criteria.
- label: exactly one token, include or exclude."""

FROZEN_CRITERIA = """\
INCLUSION CRITERIA:
  - The paper is an empirical study in software engineering
    (field of computer science).
  - The paper is a primary study.
  - The paper is focused on predicting defects in a software system
    using machine learning techniques.
  - The paper evaluates, analyses, or compares prediction methods and
    provides evidence for efficiency.

EXCLUSION CRITERIA:
  - The paper was not a peer-reviewed article, conference proceeding,
    or book chapter.
  - The publication's language was other than English.
  - The same or limited results were already published and included in
    another study."""

# Direct-prompt reference: asks for the label only, no checks trace.
LABEL_ONLY_PROMPT = """\
You are screening research papers by TITLE and ABSTRACT against the
provided INCLUSION/EXCLUSION criteria.

Output MUST be exactly one label:
  - include : should be included for full-text review
  - exclude : should be excluded

If criteria are missing or ambiguous or your confidence is low, then be
more conservative and give preference to including the study."""


def screening_inputs() -> list[FieldSpec]:
    return [
        FieldSpec.input("criteria", "Inclusion and exclusion criteria."),
        FieldSpec.input("title", "Paper title."),
        FieldSpec.input("abstract", "Paper abstract."),
    ]


def screening_contract(criteria: str = FROZEN_CRITERIA, harness: str = STARTING_HARNESS,
                       contract_id: str = "abstract_screening") -> TaskContract:
    outputs = [
        FieldSpec.output("checks", "Short fragments supporting the decision."),
        FieldSpec.output("label", "Exactly one token: include or exclude.", SCREENING_LABELS),
    ]
    return new_contract(criteria, screening_inputs(), outputs, harness, contract_id=contract_id)


def label_only_contract(criteria: str = FROZEN_CRITERIA,
                        contract_id: str = "label_only_screening") -> TaskContract:
    outputs = [FieldSpec.output("label", "Exactly one token: include or exclude.", SCREENING_LABELS)]
    return new_contract(criteria, screening_inputs(), outputs, LABEL_ONLY_PROMPT, contract_id=contract_id)
