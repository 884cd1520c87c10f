import pytest

from promptcal.dataset import Record
from promptcal.errors import MetricError
from promptcal.evaluation import ConfusionMatrix
from promptcal.metric import (ABSTRACT_EXCERPT, Prediction, ScoringPolicy, checks_format_ok, compact_metric,
                              expanded_metric, has_supporting_checks, make_metric, output_contract_text,
                              utility_from_confusion)

GOOD = "- defect prediction with ML\n- evaluation reported"


@pytest.mark.parametrize("gold,label,expected", [
    ("include", "include", 1.0),
    ("exclude", "exclude", 1.0),
    ("include", "exclude", 0.0),
    ("exclude", "include", 0.4),
])
def test_compact_metric_table(gold, label, expected):
    out = compact_metric(gold, Prediction(label, "defect prediction with ML evaluation"))
    assert out.score == expected
    assert out.feedback


def test_compact_metric_checks_cap_and_invalid_label():
    assert compact_metric("exclude", Prediction("exclude", "ok")).score == 0.6
    assert "checks" in compact_metric("exclude", Prediction("exclude", "ok")).feedback
    out = compact_metric("include", Prediction("maybe", "some long justification here"))
    assert out.score == 0.0 and "exactly 'include' or 'exclude'" in out.feedback
    # the cap never raises a score
    assert compact_metric("include", Prediction("exclude", "")).score == 0.0
    assert compact_metric("exclude", Prediction("include", "")).score == 0.4


def test_compact_metric_lenient_labels_and_bad_gold():
    assert compact_metric("Included", Prediction(" INCLUDE ", "three word check")).score == 1.0
    with pytest.raises(MetricError):
        compact_metric("maybe", Prediction("include", "three word check"))


@pytest.mark.parametrize("checks,expected", [("relevant defect study", True), ("yes", False), ("a b c", True),
                                             ("", False), ("  a   b  ", False)])
def test_has_supporting_checks(checks, expected):
    assert has_supporting_checks(Prediction("include", checks)) is expected


def test_checks_format_examples():
    assert checks_format_ok("- ML defect prediction\n- empirical evaluation reported")
    assert not checks_format_ok("")
    assert not checks_format_ok(None)
    words = [f"w{i}" for i in range(31)]
    six_lines = "\n".join(" ".join(words[i::6]) for i in range(6))
    assert not checks_format_ok(six_lines)
    assert not checks_format_ok("- one line only")
    assert not checks_format_ok("- one two three four five six seven eight nine\n- ok line")
    assert not checks_format_ok("\n".join(["- a b c d e f g h"] * 4))  # 32 words


def record(label="include", abstract="Short abstract.", criteria="Criteria text.", title="A title"):
    return Record("r1", title, abstract, criteria, label)


def test_expanded_false_negative_feedback():
    out = expanded_metric(record("include"), Prediction("exclude", GOOD))
    assert out.score == 0.0
    assert "False negative" in out.feedback and "Prefer INCLUDE when uncertain" in out.feedback
    assert output_contract_text() in out.feedback
    assert "CASE\nCRITERIA:\nCriteria text." in out.feedback


def test_expanded_truncates_case_block():
    abstract = "x" * 2000
    out = expanded_metric(record("include", abstract=abstract, criteria="c" * 900, title="t" * 400),
                          Prediction("exclude", GOOD))
    body = out.feedback.split("ABSTRACT:\n", 1)[1]
    assert body == "x" * ABSTRACT_EXCERPT + "\n"
    assert "c" * 800 + "\n\nTITLE:\n" + "t" * 300 + "\n\nABSTRACT" in out.feedback


def test_expanded_checks_cap_and_prefix():
    out = expanded_metric(record("exclude"), Prediction("exclude", "single"))
    assert out.score == 0.6
    assert out.feedback.startswith("checks format invalid or missing.")
    assert expanded_metric(record("exclude"), Prediction("include", "single")).score == 0.4
    assert expanded_metric(record("include"), Prediction("exclude", "single")).score == 0.0


def test_expanded_normalizes_and_rejects_invalid():
    assert expanded_metric(record("include"), Prediction("Included", GOOD)).score == 1.0
    out = expanded_metric(record("include"), Prediction("", GOOD, parse_ok=False))
    assert out.score == 0.0 and "Invalid label" in out.feedback


def test_policy_validation_and_custom_fp_score():
    with pytest.raises(MetricError):
        ScoringPolicy(false_positive_score=1.5)
    with pytest.raises(MetricError):
        ScoringPolicy(checks_cap=1.0)
    policy = ScoringPolicy.from_dict({"fp_score": 0.2})
    assert policy.false_positive_score == 0.2
    assert ScoringPolicy.from_dict(policy.to_dict()) == policy
    assert compact_metric("exclude", Prediction("include", "three word check"), policy).score == 0.2


def test_make_metric():
    m = make_metric("compact")
    assert m.metric_id == "compact"
    assert m(record("exclude"), Prediction("include", "three word check")).score == 0.4
    assert make_metric("expanded")(record("include"), Prediction("include", GOOD)).score == 1.0
    with pytest.raises(MetricError):
        make_metric("nope")


def test_utility():
    cm = ConfusionMatrix(tp=599, fp=158, tn=250, fn=69)
    assert utility_from_confusion(cm, 0.4) == pytest.approx((599 + 250 + 0.4 * 158) / 1076)
    perfect = ConfusionMatrix(tp=5, fp=0, tn=5, fn=0)
    assert all(utility_from_confusion(perfect, s) == 1.0 for s in (0, 0.2, 0.4, 1))
    with pytest.raises(MetricError):
        utility_from_confusion(ConfusionMatrix(), 0.4)
