"""Offline demonstration assets: a 12-record screening set and mock scripts.

The mock student answers by looking up each record's title. For a handful of
boundary records it errs under the starting harness and answers correctly once
the harness carries the clarifying policy lines that the mock reflector
proposes, so a demo compile shows a real harness improvement without any
network access.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .backend import format_fields
from .dataset import Record
from .screening import FROZEN_CRITERIA, STARTING_HARNESS

# Phrases the mock reflector adds; the mock student keys on them.
CHANGE_POLICY = "Treat change-proneness, build breakage and security-bug prediction as defect prediction."
TRIAGE_POLICY = "Exclude bug-report triage or severity tasks unless framed as defect prediction."

COMPILED_DEMO_HARNESS = (
    STARTING_HARNESS
    + "\n\nDecision policy:\n- " + CHANGE_POLICY + "\n- " + TRIAGE_POLICY
    + "\n- If peer-review status or duplication is unclear, prefer include rather than exclude."
)

# (id, title, abstract, gold label, kind) where kind is "easy", "hard_include" or "hard_exclude"
_DEMO = [
    ("r01", "Deep learning for cross-project defect prediction",
     "We train convolutional models on code metrics from 12 open-source projects and compare them "
     "with logistic regression for predicting defective files. Results show improved F1.",
     "include", "easy"),
    ("r02", "Just-in-time defect prediction with gradient boosting",
     "An empirical study of commit-level defect prediction using gradient boosted trees on six "
     "industrial repositories, evaluated with AUC and effort-aware metrics.",
     "include", "easy"),
    ("r03", "Predicting change-proneness of classes with ensemble learners",
     "We build random forest and bagging models to predict which classes will change in the next "
     "release and evaluate them on 20 Java systems.",
     "include", "hard_include"),
    ("r04", "Learning to predict build breakage in continuous integration",
     "Using 300k CI builds we train classifiers that anticipate broken builds from change features "
     "and report precision and recall against heuristic baselines.",
     "include", "hard_include"),
    ("r05", "Fault-proneness models for embedded automotive software",
     "A case study applying support vector machines to predict fault-prone modules in an automotive "
     "supplier's code base, with evaluation on two product lines.",
     "include", "easy"),
    ("r06", "Security bug report prediction with text mining",
     "We predict which code changes introduce security bugs using text and churn features and "
     "compare naive Bayes, SVM and neural models on three projects.",
     "include", "hard_include"),
    ("r07", "A systematic literature review of software defect prediction",
     "This review synthesises 150 studies on machine learning for defect prediction published "
     "between 2000 and 2020 and maps the techniques used.",
     "exclude", "easy"),
    ("r08", "Automatic assignment of bug reports to developers",
     "We propose a learning-to-rank approach for bug triage that recommends developers for incoming "
     "reports and evaluate it on Eclipse and Mozilla data.",
     "exclude", "hard_exclude"),
    ("r09", "Duplicate bug report detection using siamese networks",
     "Siamese neural networks identify duplicate issue reports; we evaluate retrieval accuracy on "
     "four public issue trackers.",
     "exclude", "easy"),
    ("r10", "Agile retrospectives in distributed teams",
     "An interview study with 40 practitioners about how distributed teams run retrospectives and "
     "what challenges they face.",
     "exclude", "easy"),
    ("r11", "Energy consumption of mobile apps: an empirical study",
     "We measure energy usage of 200 Android apps and relate it to code smells using regression "
     "analysis.",
     "exclude", "easy"),
    ("r12", "Issue severity prediction from bug report text",
     "We classify the severity level of incoming bug reports with transformer models and compare "
     "against keyword baselines.",
     "exclude", "hard_exclude"),
]


def demo_records(with_criteria: bool = False) -> list[Record]:
    return [Record(rid, title, abstract, FROZEN_CRITERIA if with_criteria else "", label)
            for rid, title, abstract, label, _ in _DEMO]


def _answer(label: str, title: str) -> str:
    if label == "include":
        checks = "- ML model predicts defective artefacts\n- empirical evaluation reported"
    else:
        checks = "- not defect prediction\n- fails inclusion criteria"
    return format_fields({"checks": checks, "label": label}, ["checks", "label"])


def student_script() -> dict[str, Any]:
    rules = []
    for _, title, _, label, kind in _DEMO:
        wrong = "exclude" if label == "include" else "include"
        if kind == "hard_include":
            rules.append({"contains": [title, CHANGE_POLICY], "response": _answer(label, title)})
            rules.append({"contains": [title], "response": _answer(wrong, title)})
        elif kind == "hard_exclude":
            rules.append({"contains": [title, TRIAGE_POLICY], "response": _answer(label, title)})
            rules.append({"contains": [title], "response": _answer(wrong, title)})
        else:
            rules.append({"contains": [title], "response": _answer(label, title)})
    return {"rules": rules, "default": _answer("include", "")}


def reflection_script() -> dict[str, Any]:
    return {"rules": [], "default": COMPILED_DEMO_HARNESS}


def write_demo(out_dir: str | Path) -> dict[str, Path]:
    """Write contract, records, mock scripts and a run config into ``out_dir``."""
    from .contract import save_contract
    from .dataset import write_records
    from .screening import screening_contract

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "contract": out / "contract.json",
        "dataset": out / "records.jsonl",
        "student_script": out / "student_mock.json",
        "reflection_script": out / "reflection_mock.json",
        "config": out / "config.json",
    }
    save_contract(screening_contract(), paths["contract"])
    write_records(demo_records(), paths["dataset"])
    paths["student_script"].write_text(json.dumps(student_script(), indent=2) + "\n", encoding="utf-8")
    paths["reflection_script"].write_text(json.dumps(reflection_script(), indent=2) + "\n", encoding="utf-8")
    config = {
        "contract": "contract.json",
        "dataset": "records.jsonl",
        "split_sizes": [4, 4, 4],
        "seed": 10,
        "seeds": [10, 15, 25, 35, 42],
        "budgets": [2, 6, 12, 24],
        "metric": "expanded",
        "policy": {"fp_score": 0.4, "checks_cap": 0.6, "positive_label": "include"},
        "optimizer": {"max_full_evals": 2, "reflection_minibatch_size": 2, "num_threads": 1,
                      "skip_perfect_score": True, "track_stats": True, "parent_strategy": "frontier"},
        "student": {"kind": "scripted_mock", "script": "student_mock.json",
                    "model_id": "mock/student", "temperature": 0.0},
        "reflection": {"kind": "scripted_mock", "script": "reflection_mock.json",
                       "model_id": "mock/reflector", "temperature": 1.0, "max_tokens": 16000},
        "output_dir": "runs",
    }
    paths["config"].write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return paths
