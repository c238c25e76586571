import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import calibnav
from calibnav.cli import main, read_csv
from calibnav.config import RunConfig, load_config

SCHEMAS = Path(calibnav.__file__).parent / "schemas"


def schema(name):
    return json.loads((SCHEMAS / f"{name}.schema.json").read_text())


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    import os

    for key in list(os.environ):
        if key.startswith("CALIBNAV_"):
            monkeypatch.delenv(key)


@pytest.fixture
def scene_file(tmp_path):
    rng = np.random.default_rng(0)
    rows = []
    for pid in range(5):
        x0, y0 = rng.uniform(0, 8, 2)
        v = rng.uniform(-0.4, 0.4, 2)
        for f in range(100):
            rows.append((f * 10, pid, x0 + v[0] * f * 0.4, y0 + v[1] * f * 0.4))
    path = tmp_path / "scene_a.txt"
    path.write_text("".join(f"{f}\t{p}\t{x:.4f}\t{y:.4f}\n" for f, p, x, y in sorted(rows)))
    return path


# -- configuration -------------------------------------------------------------


def test_unknown_keys_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mpc": {"horizon": 12, "q_hh": 1}}))
    with pytest.raises(Exception):
        load_config(cfg)
    assert run("ingest", "--config", cfg, "--out", tmp_path / "o") == 1


def test_mpc_parameters_honoured_exactly(tmp_path):
    table = {
        "horizon": 12,
        "dt": 0.5,
        "q_u": [[1.0, 0.0], [0.0, 1.0]],
        "q_h": 1000.0,
        "q_p": 1000.0,
        "q_md": 1000.0,
        "r_rob": 0.2,
        "r_ped": 0.2,
        "d_safe": 0.4,
        "p_col": 0.2,
        "v_min": 0.0,
        "v_max": 3.0,
        "w_min": -0.2,
        "w_max": 0.2,
    }
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"mpc": table}))
    mpc = load_config(cfg_path).mpc_config()
    for key, val in table.items():
        got = getattr(mpc, key)
        assert (got == tuple(map(tuple, val))) if key == "q_u" else (got == val and type(got) is type(val))
    # non-default values flow through unchanged
    cfg_path.write_text(json.dumps({"mpc": {"p_col": 0.123456789, "d_safe": 0.7}}))
    mpc = load_config(cfg_path).mpc_config()
    assert mpc.p_col == 0.123456789 and mpc.d_safe == 0.7


def test_layering_file_env_flags(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"seed": 1, "train": {"epochs": 5, "beta": 3.0}}))
    env = {"CALIBNAV_TRAIN__EPOCHS": "7", "CALIBNAV_SEED": "2"}
    cfg = load_config(cfg_path, {"seed": 3}, ["train.beta=4"], environ=env)
    assert cfg.seed == 3 and cfg.train.epochs == 7 and cfg.train.beta == 4.0
    assert cfg.train_config().seed == 3


def test_config_field_checks():
    with pytest.raises(Exception):
        load_config(overrides={"predictor": "lstm"})
    with pytest.raises(Exception):
        load_config(overrides={"data.split": "random"})
    with pytest.raises(Exception):
        load_config(overrides={"train.loss": "mse"})
    assert load_config(overrides={"data.split": "loo:biwi_eth"}).split_spec().holdout == ("biwi_eth",)


def test_shipped_config_schema_is_current():
    shipped = json.loads((SCHEMAS / "run_config.schema.json").read_text())
    assert shipped == json.loads(json.dumps(RunConfig.model_json_schema()))


# -- ingest ----------------------------------------------------------------------


def test_ingest_two_line_file(tmp_path, capsys):
    f = tmp_path / "tiny.txt"
    f.write_text("0 1 0.0 0.0\n10 1 1.0 0.0\n")
    assert run("ingest", f, "--out", tmp_path / "o") == 0
    assert "windows=0" in capsys.readouterr().out
    doc = json.loads((tmp_path / "o" / "cache.json").read_text())
    assert doc["windows"] == []
    jsonschema.validate(doc, schema("cache"))


def test_ingest_corrupt_row(tmp_path, capsys):
    f = tmp_path / "bad.txt"
    f.write_text("0 1 0.0 0.0\n10 1 1.0\n")
    assert run("ingest", f, "--out", tmp_path / "o") != 0
    assert "bad.txt:2" in capsys.readouterr().err


def test_ingest_deterministic(tmp_path, scene_file):
    assert run("ingest", scene_file, "--out", tmp_path / "a") == 0
    assert run("ingest", scene_file, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a" / "cache.json").read_bytes()
    assert a == (tmp_path / "b" / "cache.json").read_bytes()
    doc = json.loads(a)
    jsonschema.validate(doc, schema("cache"))
    assert len(doc["windows"]) == 5 * 81 and len(doc["scenarios"]) > 0


# -- train / eval ----------------------------------------------------------------


@pytest.fixture
def synthetic_cache(tmp_path):
    assert run("ingest", "--synthetic", 300, "--noise", 0.2, "--out", tmp_path / "syn") == 0
    return tmp_path / "syn" / "cache.json"


def test_train_trace_and_reproducible(tmp_path, synthetic_cache):
    args = ["train", "--cache", synthetic_cache, "--loss", "cdf", "--beta", 2, "--epochs", 2, "--seed", 5]
    assert run(*args, "--out", tmp_path / "t1") == 0
    assert run(*args, "--out", tmp_path / "t2") == 0
    c1 = (tmp_path / "t1" / "checkpoint.json").read_bytes()
    assert c1 == (tmp_path / "t2" / "checkpoint.json").read_bytes()
    jsonschema.validate(json.loads(c1), schema("checkpoint"))
    lines = (tmp_path / "t1" / "trace.csv").read_text().splitlines()
    assert lines[0] == "# seed=5"
    rows = read_csv(tmp_path / "t1" / "trace.csv")
    assert len(rows) == 2 and {"epoch", "loss", "cdf", "mean_error", "val_ade", "val_fde"} <= set(rows[0])
    r = rows[-1]
    assert float(r["loss"]) == pytest.approx(2 * float(r["cdf"]) + float(r["mean_error"]))


def test_cdf_beats_nll_on_calibration(tmp_path):
    assert run("ingest", "--synthetic", 1000, "--noise", 0.2, "--seed", 1, "--out", tmp_path / "d") == 0
    cache = tmp_path / "d" / "cache.json"
    scores = {}
    for loss in ("nll", "cdf"):
        assert run("train", "--cache", cache, "--loss", loss, "--epochs", 300, "--out", tmp_path / loss) == 0
        ckpt = tmp_path / loss / "checkpoint.json"
        assert run("eval", "--cache", cache, "--predictor", f"mlp:{ckpt}", "--out", tmp_path / f"e_{loss}") == 0
        scores[loss] = json.loads((tmp_path / f"e_{loss}" / "metrics.json").read_text())["mean_abs_delta_esv"]
    assert scores["cdf"] < scores["nll"]


def test_eval_perfect_predictor(tmp_path, capsys):
    # noise-free straight lines: the constant-velocity means are exact
    assert run("ingest", "--synthetic", 100, "--noise", 0, "--out", tmp_path / "d") == 0
    out = tmp_path / "e"
    assert run("eval", "--cache", tmp_path / "d" / "cache.json", "--predictor", "cv", "--bon", 4, "--out", out) == 0
    m = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(m, schema("metrics"))
    assert m["ade"] == pytest.approx(0.0, abs=1e-9) and m["fde"] == pytest.approx(0.0, abs=1e-9)
    assert m["delta_esv_1"] == pytest.approx(0.6065, abs=1e-4)
    assert m["bon_n"] == 4 and m["bon_ade"] is not None
    assert len(read_csv(out / "calibration.csv")) == 100
    assert read_csv(out / "metrics.csv")[0]["label"] == "cv"


def test_eval_empty_test_set(tmp_path, capsys):
    f = tmp_path / "empty.txt"
    f.write_text("")
    assert run("ingest", f, "--out", tmp_path / "d") == 0
    assert run("eval", "--cache", tmp_path / "d" / "cache.json", "--out", tmp_path / "e") != 0
    assert "no windows" in capsys.readouterr().err


def test_missing_checkpoint_fails(tmp_path, synthetic_cache):
    code = run("eval", "--cache", synthetic_cache, "--predictor", f"mlp:{tmp_path / 'nope.json'}", "--out", tmp_path)
    assert code != 0


# -- scenarios / plan / report -------------------------------------------------------


def test_plan_empty_scene_smoke(tmp_path):
    assert run("make-scenarios", "--empty", 2, "--out", tmp_path / "s") == 0
    scn = tmp_path / "s" / "scenarios.json"
    jsonschema.validate(json.loads(scn.read_text()), schema("scenarios"))
    assert run("plan", "--scenarios", scn, "--out", tmp_path / "p") == 0
    agg = json.loads((tmp_path / "p" / "aggregate.json").read_text())
    jsonschema.validate(agg, schema("plan_aggregate"))
    assert agg["sr"] == 1.0
    assert agg["mpc"]["p_col"] == 0.2


def _typed(row):
    out = {}
    for k, v in row.items():
        if v == "":
            out[k] = None
        elif k in ("nav_time_steps", "n_steps"):
            out[k] = int(v)
        elif k in ("scenario_id", "outcome", "replay_sha256"):
            out[k] = v
        else:
            out[k] = float(v)
    return out


def test_plan_deterministic_and_replay_shared(tmp_path, synthetic_cache):
    assert run("make-scenarios", "--synthetic", 3, "--n-peds", 6, "--seed", 2, "--out", tmp_path / "s") == 0
    scn = tmp_path / "s" / "scenarios.json"
    assert run("train", "--cache", synthetic_cache, "--epochs", 1, "--out", tmp_path / "m") == 0
    ckpt = tmp_path / "m" / "checkpoint.json"
    for name in ("a", "b"):
        assert run("plan", "--scenarios", scn, "--seed", 4, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "plan.csv").read_bytes() == (tmp_path / "b" / "plan.csv").read_bytes()
    assert run("plan", "--scenarios", scn, "--seed", 4, "--predictor", f"mlp:{ckpt}", "--out", tmp_path / "c") == 0
    cv_rows = read_csv(tmp_path / "a" / "plan.csv")
    mlp_rows = read_csv(tmp_path / "c" / "plan.csv")
    assert [r["replay_sha256"] for r in cv_rows] == [r["replay_sha256"] for r in mlp_rows]
    for r in cv_rows:
        jsonschema.validate(_typed(r), schema("plan_row"))
    assert (tmp_path / "a" / "plan.csv").read_text().startswith("# seed=4\n")


def test_report_tables(tmp_path, capsys):
    assert run("ingest", "--synthetic", 60, "--out", tmp_path / "d") == 0
    assert run("eval", "--cache", tmp_path / "d" / "cache.json", "--label", "CV", "--out", tmp_path / "e") == 0
    assert run("make-scenarios", "--empty", 1, "--out", tmp_path / "s") == 0
    assert run("plan", "--scenarios", tmp_path / "s" / "scenarios.json", "--out", tmp_path / "p") == 0
    code = run(
        "report",
        "--metrics",
        tmp_path / "e" / "metrics.json",
        "--plans",
        tmp_path / "p" / "aggregate.json",
        "--out",
        tmp_path / "r",
    )
    assert code == 0
    text = (tmp_path / "r" / "report.md").read_text()
    assert "| CV |" in text and "SR / CR / TR" in text and "ADE / FDE" in text
    assert read_csv(tmp_path / "r" / "prediction.csv")[0]["label"] == "CV"
    assert read_csv(tmp_path / "r" / "planning.csv")[0]["sr"] == "1.0"
    assert run("report", "--out", tmp_path / "r2") != 0
