import json
import random

import httpx
import pytest

from promptcal.backend import (COMPLETED_MARKER, GenerationSettings, HttpBackend, Rule, RunLog, ScriptedMockBackend,
                               build_backend, complete, complete_many, format_fields, parse_fields, render_messages)
from promptcal.errors import BackendError, ConfigError, RenderError
from promptcal.screening import screening_contract

STUDENT = GenerationSettings.student("mock/student")
INPUTS = {"criteria": "CRIT-VALUE", "title": "TITLE-VALUE", "abstract": "ABSTRACT-VALUE"}


def test_settings_defaults():
    refl = GenerationSettings.reflection("openai/gpt-5")
    assert (refl.temperature, refl.max_tokens) == (1.0, 16000)
    assert STUDENT.temperature == 0.0
    with pytest.raises(ConfigError):
        GenerationSettings("m", role="critic")


def test_render_messages():
    c = screening_contract()
    system, user = render_messages(c, INPUTS)
    assert user.index("CRIT-VALUE") < user.index("TITLE-VALUE") < user.index("ABSTRACT-VALUE")
    assert system.startswith(c.harness_text)
    assert system.index("`checks`") < system.index("`label`")
    assert "Allowed values: include, exclude." in system
    assert system.rstrip().endswith(COMPLETED_MARKER)
    assert (system, user) == render_messages(c, dict(INPUTS))
    with pytest.raises(RenderError, match="abstract"):
        render_messages(c, {"criteria": "c", "title": "t"})


def test_parse_fields_examples():
    c = screening_contract()
    p = parse_fields("[[ ## checks ## ]]\n- a b\n- c d\n[[ ## label ## ]]\ninclude\n[[ ## completed ## ]]", c)
    assert (p.checks, p.label_raw, p.parse_ok) == ("- a b\n- c d", "include", True)
    p = parse_fields("include", c)
    assert (p.label_raw, p.parse_ok) == ("", False)
    p = parse_fields("[[ ## label ## ]]\nexclude\n[[ ## label ## ]]\ninclude", c)
    assert (p.label_raw, p.parse_ok) == ("exclude", True)
    p = parse_fields("[[ ## checks ## ]]\n- x y z\n[[ ## label ## ]]\ninclude", c)  # no terminator
    assert p.label_raw == "include"


def test_parse_format_round_trip_random():
    c = screening_contract()
    rng = random.Random(1)
    vocab = ["defect", "prediction", "ML", "study", "empirical", "not", "survey", "bug", "-", "*", "42", "é"]
    for _ in range(300):
        checks = "\n".join("- " + " ".join(rng.choices(vocab, k=rng.randint(1, 8))) for _ in range(rng.randint(1, 5)))
        label = rng.choice(["include", "exclude"])
        p = parse_fields(format_fields({"checks": checks, "label": label}, ["checks", "label"]), c)
        assert (p.checks, p.label_raw, p.parse_ok) == (checks, label, True)


def test_mock_sequence_rules_and_callable():
    text = "[[ ## checks ## ]]\n- x y\n[[ ## label ## ]]\nexclude"
    mock = ScriptedMockBackend([text])
    assert complete(mock, STUDENT, "s", "u").response_text == text
    with pytest.raises(BackendError, match="exhausted"):
        complete(mock, STUDENT, "s", "u")

    two = ScriptedMockBackend(["first", "second"])
    assert [complete(two, STUDENT, "s", "u").response_text for _ in range(2)] == ["first", "second"]
    two.reset()
    assert complete(two, STUDENT, "s", "u").response_text == "first"

    cyc = ScriptedMockBackend(["a", "b"], repeat=True)
    assert [complete(cyc, STUDENT, "s", "u").response_text for _ in range(5)] == ["a", "b", "a", "b", "a"]

    rules = ScriptedMockBackend([Rule(("alpha",), ("beta",), "A"), Rule(("alpha",), (), "AB")], default="D")
    assert complete(rules, STUDENT, "alpha", "").response_text == "A"
    assert complete(rules, STUDENT, "alpha", "beta").response_text == "AB"
    assert complete(rules, STUDENT, "zzz", "").response_text == "D"

    fn = ScriptedMockBackend(lambda i, s, u: f"{i}:{u}")
    assert complete(fn, STUDENT, "s", "x").response_text == "0:x"


def test_complete_many_is_ordered_and_logged():
    mock = ScriptedMockBackend(lambda i, s, u: u.upper())
    log = RunLog()
    prompts = [("sys", f"p{i}") for i in range(20)]
    out = complete_many(mock, STUDENT, prompts, log, num_threads=4)
    assert [e.response_text for e in out] == [f"P{i}" for i in range(20)]
    entries = log.entries()
    assert [e["seq"] for e in entries] == list(range(20))
    assert log.count("student") == 20


def test_mock_from_file_forms(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(["x", "y"]))
    assert ScriptedMockBackend.from_file(p).responses == ["x", "y"]
    p.write_text(json.dumps({"rules": [], "default": "only"}))
    assert complete(ScriptedMockBackend.from_file(p), STUDENT, "s", "u").response_text == "only"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        ScriptedMockBackend.from_file(p)


def _completion(text="ok", status=200):
    return httpx.Response(status, json={"choices": [{"message": {"content": text}}],
                                        "usage": {"prompt_tokens": 11, "completion_tokens": 3}})


def test_http_backend_success_and_payload(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sekret")
    seen = []

    def handler(request):
        seen.append(request)
        return _completion("hello")

    be = HttpBackend("https://api.example/v1/", "TEST_KEY", transport=httpx.MockTransport(handler))
    ex = complete(be, GenerationSettings.student("openai/gpt-4.1-mini"), "sys", "user")
    assert ex.response_text == "hello" and ex.usage == (11, 3)
    body = json.loads(seen[0].content)
    assert body["model"] == "gpt-4.1-mini" and body["temperature"] == 0.0
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "user"}]
    assert seen[0].url == "https://api.example/v1/chat/completions"
    assert seen[0].headers["authorization"] == "Bearer sekret"
    assert "sekret" not in json.dumps(be.describe())


def test_http_backend_retries_then_fails(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "k")
    sleeps = []

    def handler(request):
        raise httpx.ConnectError("unreachable", request=request)

    be = HttpBackend("http://nowhere", "TEST_KEY", transport=httpx.MockTransport(handler), sleep=sleeps.append)
    with pytest.raises(BackendError, match="3 attempts"):
        complete(be, STUDENT, "s", "u")
    assert sleeps == [1.0, 2.0]


def test_http_backend_transient_status_then_success(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "k")
    answers = iter([httpx.Response(503), httpx.Response(429), _completion("fine")])
    be = HttpBackend("http://h", "TEST_KEY", transport=httpx.MockTransport(lambda r: next(answers)),
                     sleep=lambda s: None)
    assert complete(be, STUDENT, "s", "u").response_text == "fine"


def test_http_backend_client_error_not_retried(monkeypatch):
    monkeypatch.setenv("TEST_KEY", "k")
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, text="bad request")

    be = HttpBackend("http://h", "TEST_KEY", transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(BackendError, match="400"):
        complete(be, STUDENT, "s", "u")
    assert len(calls) == 1


def test_missing_credentials_is_config_error(monkeypatch):
    monkeypatch.delenv("ABSENT_KEY", raising=False)
    with pytest.raises(ConfigError, match="ABSENT_KEY"):
        build_backend({"kind": "http", "base_url": "http://h", "api_key_env": "ABSENT_KEY"})
    with pytest.raises(ConfigError):
        build_backend({"kind": "carrier-pigeon"})
