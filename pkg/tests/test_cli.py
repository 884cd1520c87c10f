import json
from pathlib import Path

import httpx
import pytest

from promptcal import cli, workflow
from promptcal.backend import Rule, ScriptedMockBackend
from promptcal.demo import COMPILED_DEMO_HARNESS, student_script
from promptcal.errors import BackendError


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def edit_config(demo_dir: Path, **changes) -> Path:
    path = demo_dir / "config.json"
    data = json.loads(path.read_text())
    data.update(changes)
    path.write_text(json.dumps(data))
    return path


def test_init_example(tmp_path, capsys):
    assert run("init-example", "--out", tmp_path / "ex") == 0
    assert {p.name for p in (tmp_path / "ex").iterdir()} == {
        "config.json", "contract.json", "records.jsonl", "student_mock.json", "reflection_mock.json"}
    assert "promptcal compile" in capsys.readouterr().out


def test_compile_is_byte_identical_across_runs(demo_dir, capsys):
    cfg = demo_dir / "config.json"
    assert run("compile", "--config", cfg, "--out", demo_dir / "a") == 0
    out = capsys.readouterr().out
    assert "budget_used: 2 / 2" in out and "baseline 0.600 -> compiled 1.000" in out
    assert run("compile", "--config", cfg, "--out", demo_dir / "b") == 0
    a, b = tree_bytes(demo_dir / "a"), tree_bytes(demo_dir / "b")
    assert a == b
    assert set(a) == {"abstract_screening.10.2.compiled.json", "calls.jsonl", "manifest.json",
                      "predictions_val_baseline.jsonl", "predictions_val_compiled.jsonl", "provenance.json",
                      "splits.json", "trace.jsonl"}
    prov = json.loads(a["provenance.json"])
    assert prov["dataset"]["source"] == "records.jsonl"
    assert str(demo_dir) not in a["provenance.json"].decode()
    assert run("verify", demo_dir / "a") == 0


def test_compile_default_output_dir(demo_dir):
    assert run("compile", "--config", demo_dir / "config.json", "--seed", "15", "--budget", "6") == 0
    assert (demo_dir / "runs" / "abstract_screening.15.6" / "abstract_screening.15.6.compiled.json").is_file()


def test_compile_zero_budget_is_config_error(demo_dir, capsys):
    assert run("compile", "--config", demo_dir / "config.json", "--budget", "0", "--out", demo_dir / "z") != 0
    assert "error [cli.load_config]" in capsys.readouterr().err
    assert not (demo_dir / "z").exists()


def test_http_backend_without_credentials(demo_dir, monkeypatch, capsys):
    monkeypatch.delenv("PROMPTCAL_TEST_KEY", raising=False)
    http = {"kind": "http", "base_url": "http://127.0.0.1:9", "api_key_env": "PROMPTCAL_TEST_KEY",
            "model_id": "openai/student"}
    cfg = edit_config(demo_dir, student=http)
    assert run("compile", "--config", cfg, "--out", demo_dir / "x") != 0
    err = capsys.readouterr().err
    assert "PROMPTCAL_TEST_KEY" in err and err.startswith("error [")
    assert not (demo_dir / "x").exists()


def test_mock_override_flags(demo_dir, tmp_path):
    http = {"kind": "http", "base_url": "http://127.0.0.1:9", "api_key_env": "PROMPTCAL_TEST_KEY",
            "model_id": "openai/student"}
    cfg = edit_config(demo_dir, student=http)
    script = tmp_path / "student.json"
    script.write_text(json.dumps(student_script()))
    assert run("compile", "--config", cfg, "--mock-script", f"student={script}", "--out", demo_dir / "m") == 0
    with pytest.raises(SystemExit):
        run("compile", "--config", cfg, "--mock-script", "critic=x.json")


def test_credentials_never_written(demo_dir, monkeypatch):
    secret = "sk-test-DO-NOT-LEAK-123"
    monkeypatch.setenv("PROMPTCAL_TEST_KEY", secret)
    student = ScriptedMockBackend([Rule(tuple(r["contains"]), (), r["response"]) for r in student_script()["rules"]],
                                  default=student_script()["default"])

    def server(request: httpx.Request) -> httpx.Response:
        assert request.headers["authorization"] == f"Bearer {secret}"
        body = json.loads(request.content)
        system, user = (m["content"] for m in body["messages"])
        text = COMPILED_DEMO_HARNESS if body["model"] == "reflector" else student._respond(0, system, user)
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}],
                                         "usage": {"prompt_tokens": 10, "completion_tokens": 5}})

    real_client = httpx.Client
    monkeypatch.setattr(httpx, "Client", lambda **kw: real_client(**{**kw, "transport": httpx.MockTransport(server)}))
    http = {"kind": "http", "base_url": "https://llm.example/v1", "api_key_env": "PROMPTCAL_TEST_KEY"}
    cfg = edit_config(demo_dir, student={**http, "model_id": "openai/student"},
                      reflection={**http, "model_id": "openai/reflector"})
    out = demo_dir / "http"
    assert run("compile", "--config", cfg, "--out", out) == 0
    assert run("evaluate", "--config", cfg, "--artifact", out, "--out", out / "eval") == 0
    prov = json.loads((out / "provenance.json").read_text())
    calls = len((out / "calls.jsonl").read_text().splitlines())
    assert prov["tokens"] == {"input_tokens": 10 * calls, "output_tokens": 5 * calls}
    assert prov["models"]["student"]["backend"]["api_key_env"] == "PROMPTCAL_TEST_KEY"
    for name, data in tree_bytes(out).items():
        assert secret.encode() not in data, name


def test_evaluate_baseline_and_compiled(demo_dir, capsys):
    cfg = demo_dir / "config.json"
    bundle = demo_dir / "bundle"
    assert run("compile", "--config", cfg, "--out", bundle) == 0
    evald = demo_dir / "eval"
    assert run("evaluate", "--config", cfg, "--artifact", bundle, "--out", evald) == 0
    assert run("evaluate", "--config", cfg, "--artifact", bundle, "--baseline", "--out", evald) == 0
    compiled = json.loads((evald / "metrics_test_compiled.json").read_text())
    baseline = json.loads((evald / "metrics_test_baseline.json").read_text())
    assert compiled["n"] == baseline["n"] == 4
    assert compiled["accuracy"] > baseline["accuracy"]
    before = tree_bytes(evald)
    assert run("evaluate", "--config", cfg, "--artifact", bundle, "--out", evald) == 0
    assert tree_bytes(evald) == before
    capsys.readouterr()
    assert run("evaluate", "--config", cfg, "--artifact", bundle, "--split", "dev", "--out", evald) != 0
    assert "unknown split 'dev'" in capsys.readouterr().err


def test_roundtrip_inspect_and_tamper(demo_dir, capsys):
    cfg = demo_dir / "config.json"
    bundle = demo_dir / "bundle"
    run("compile", "--config", cfg, "--out", bundle)
    assert run("roundtrip", "--config", cfg, "--artifact", bundle) == 0
    capsys.readouterr()
    assert run("inspect", bundle) == 0
    text = capsys.readouterr().out
    for heading in ("== fixed layers ==", "== harness ==", "== harness diff vs baseline ==",
                    "== provenance checklist =="):
        assert heading in text
    assert "+Decision policy:" in text and "MISSING" not in text

    artifact = bundle / "abstract_screening.10.2.compiled.json"
    artifact.write_text(artifact.read_text().replace("primary study", "secondary study"))
    assert run("inspect", bundle) != 0
    assert "IntegrityError" in capsys.readouterr().out
    assert run("verify", bundle) != 0
    assert run("roundtrip", "--config", cfg, "--artifact", bundle) != 0


def test_inspect_reports_missing_provenance(demo_dir, capsys):
    bundle = demo_dir / "bundle"
    run("compile", "--config", demo_dir / "config.json", "--out", bundle)
    prov = json.loads((bundle / "provenance.json").read_text())
    del prov["tokens"]
    (bundle / "provenance.json").write_text(json.dumps(prov))
    assert run("inspect", bundle) != 0
    out = capsys.readouterr().out
    assert "tokens       MISSING" in out and "provenance field missing: tokens" in out


def test_ablate_small_grid_and_resume(demo_dir, capsys):
    cfg = demo_dir / "config.json"
    out = demo_dir / "abl"
    assert run("ablate", "--config", cfg, "--seeds", "10,15", "--budgets", "2,6", "--out", out) == 0
    first = tree_bytes(out)
    runs = [json.loads(line) for line in first["runs.jsonl"].decode().splitlines()]
    assert sorted(r["condition"] for r in runs) == ["baseline"] * 2 + ["max_eval=2"] * 2 + ["max_eval=6"] * 2
    assert len(first["deltas.csv"].decode().strip().splitlines()) == 3
    assert run("verify", out) == 0

    # simulate an interrupted grid: drop one cell and its record, then rerun
    for name in list((out / "seed-15" / "max_eval-6").iterdir()):
        name.unlink()
    capsys.readouterr()
    assert run("ablate", "--config", cfg, "--seeds", "10,15", "--budgets", "2,6", "--out", out) == 0
    assert "(1 computed, 5 resumed)" in capsys.readouterr().out
    assert tree_bytes(out) == first


def test_ablate_single_cell_has_no_sd(demo_dir):
    out = demo_dir / "one"
    assert run("ablate", "--config", demo_dir / "config.json", "--seeds", "10", "--budgets", "2", "--out", out) == 0
    rows = (out / "aggregate.csv").read_text().splitlines()
    header = rows[0].split(",")
    values = dict(zip(header, rows[-1].split(",")))
    assert values["accuracy_sd"] == ""


def test_ablate_partial_failure_preserves_cells(demo_dir, monkeypatch, capsys):
    real = workflow.run_compile

    def flaky(cfg, out_dir, *, seed=None, budget=None, records=None):
        if seed == 15 and budget == 6:
            raise BackendError("provider unavailable")
        return real(cfg, out_dir, seed=seed, budget=budget, records=records)

    monkeypatch.setattr(workflow, "run_compile", flaky)
    out = demo_dir / "abl"
    assert run("ablate", "--config", demo_dir / "config.json", "--seeds", "10,15", "--budgets", "2,6",
               "--out", out) != 0
    assert "error [lm_backend.complete]" in capsys.readouterr().err
    failures = json.loads((out / "failures.json").read_text())["failures"]
    assert [f["cell"] for f in failures] == ["seed-15/max_eval-6"]
    assert (out / "seed-15" / "max_eval-2" / "metrics_test.json").is_file()

    monkeypatch.setattr(workflow, "run_compile", real)
    capsys.readouterr()
    assert run("ablate", "--config", demo_dir / "config.json", "--seeds", "10,15", "--budgets", "2,6",
               "--out", out) == 0
    assert "(1 computed, 5 resumed)" in capsys.readouterr().out
    assert not (out / "failures.json").exists()


def test_sensitivity_command(tmp_path, capsys):
    log = tmp_path / "confusion.jsonl"
    rows = [{"condition": "baseline", "seed": s, "tp": 599, "fp": 158, "tn": 250, "fn": 69} for s in (10, 10)]
    log.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    assert run("sensitivity", log, "--fp-scores", "0,0.2,0.4,0.6", "--out", tmp_path / "s") == 0
    out = capsys.readouterr().out
    assert "post-hoc" in out and "0.789" in out and "0.818" in out and "0.848" in out and "0.877" in out
    assert (tmp_path / "s" / "sensitivity.csv").is_file()
    log.write_text("")
    assert run("sensitivity", log) != 0
    assert "error [evaluation" in capsys.readouterr().err
