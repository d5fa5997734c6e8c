import csv
import json
import subprocess
import sys

import pytest

from ehrsepsis import cli
from ehrsepsis.cohort import InsufficientNegatives, SchemaError
from ehrsepsis.evaluation import MetricError
from ehrsepsis.nn.serialize import ModelFormatError
from ehrsepsis.nn.train import TrainingDiverged
from ehrsepsis.synth import ConfigError

TINY = """
[cohort]
n_admissions = 300
seed = 2
[prepare]
min_support = 5
neg_ratio = none
[gb]
n_trees = 10
[evaluate]
tau = 0.3
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv(cli.ENV_SEED, raising=False)
    monkeypatch.delenv(cli.ENV_WORKERS, raising=False)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> prepare -> train gb -> evaluate -> seraip -> report on a tiny cohort."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY)
    steps = [("synth", "--config", ini, "--out", root / "synth"),
             ("prepare", root / "synth" / "cohort.jsonl", "--config", ini, "--out", root / "prep"),
             ("train", root / "prep", "--model", "gb", "--config", ini, "--out", root / "gb"),
             ("evaluate", root / "prep", root / "gb" / "model.json", "--config", ini, "--out", root / "eval"),
             ("seraip", root / "prep", root / "gb" / "model.json", "--config", ini, "--out", root / "seraip",
              "--cases", root / "eval" / "cases.jsonl"),
             ("report", root / "eval", root / "seraip", "--out", root / "report")]
    codes = [run(*s) for s in steps]
    return root, ini, codes


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


# -- happy path -------------------------------------------------------------------

def test_chain_succeeds(chain):
    _, _, codes = chain
    assert codes == [cli.EXIT_OK] * 6


def test_manifest_contents(chain):
    root, _, _ = chain
    m = _manifest(root / "prep")
    for key in ("command", "argv", "version", "seed", "config", "inputs", "outputs", "duration_s"):
        assert key in m
    assert m["command"] == "prepare" and m["version"] == cli.__version__
    assert m["outputs"] == cli.hash_tree(root / "prep")
    assert m["inputs"]["cohort"]["sha256"] == cli.hash_tree(root / "synth" / "cohort.jsonl")
    assert "manifest.json" not in m["outputs"]


def test_one_manifest_per_run_and_no_error_file(chain):
    root, _, _ = chain
    for d in ("synth", "prep", "gb", "eval", "seraip", "report"):
        assert (root / d / "manifest.json").is_file()
        assert not (root / d / "error.json").exists()


def test_csv_outputs_parse_strictly(chain):
    root, _, _ = chain
    files = list((root / "eval").glob("*.csv")) + [root / "seraip" / "seraip.csv", root / "report" / "report.csv",
                                                   root / "prep" / "flow.csv", root / "gb" / "history.csv"]
    assert len(files) > 5
    for f in files:
        with open(f, newline="") as fh:
            rows = list(csv.reader(fh, strict=True))
        assert rows and all(len(r) == len(rows[0]) for r in rows), f


def test_seraip_header(chain):
    root, _, _ = chain
    with open(root / "seraip" / "seraip.csv", newline="") as fh:
        header = next(csv.reader(fh))
    for col in ("SEN", "SPE", "FP/TP", "TP_no_int"):
        assert col in header


def test_inputs_are_not_mutated(chain, tmp_path):
    root, ini, _ = chain
    src = root / "synth" / "cohort.jsonl"
    before = cli.hash_tree(root / "synth")
    assert run("prepare", src, "--config", ini, "--out", tmp_path / "p2") == cli.EXIT_OK
    assert cli.hash_tree(root / "synth") == before


def test_out_dir_inside_an_input_is_refused(chain):
    root, ini, _ = chain
    before = cli.hash_tree(root / "prep")
    code = run("train", root / "prep", "--model", "gb", "--config", ini, "--out", root / "prep" / "nested")
    assert code == cli.EXIT_CONFIG
    assert cli.hash_tree(root / "prep") == before


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "ehrsepsis.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and cli.__version__ in out.stdout


# -- exit codes -------------------------------------------------------------------------

def test_missing_input(tmp_path):
    assert run("prepare", tmp_path / "nope.jsonl", "--out", tmp_path / "o") == cli.EXIT_MISSING_INPUT
    err = json.loads((tmp_path / "o" / "error.json").read_text())
    assert err["code"] == cli.EXIT_MISSING_INPUT and err["command"] == "prepare"
    assert not (tmp_path / "o" / "manifest.json").exists()
    assert run("synth", "--config", tmp_path / "nope.ini", "--out", tmp_path / "s") == cli.EXIT_MISSING_INPUT


def test_bad_config(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[gb]\nbogus = 1\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "a") == cli.EXIT_CONFIG
    ini.write_text("[nonsense]\nx = 1\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "b") == cli.EXIT_CONFIG
    ini.write_text("[cohort]\nprofile = nope\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "c") == cli.EXIT_CONFIG


def test_schema_errors(chain, tmp_path):
    root, ini, _ = chain
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"not": "an admissions header"}\n')
    assert run("prepare", bad, "--out", tmp_path / "a") == cli.EXIT_SCHEMA
    model = tmp_path / "model.bin"
    model.write_bytes(b"garbage")
    assert run("evaluate", root / "prep", model, "--config", ini, "--out", tmp_path / "b") == cli.EXIT_SCHEMA


def test_insufficient_negatives(chain, tmp_path):
    root, _, _ = chain
    ini = tmp_path / "ratio.ini"
    ini.write_text("[prepare]\nneg_ratio = 500\n")
    code = run("prepare", root / "synth" / "cohort.jsonl", "--config", ini, "--out", tmp_path / "o")
    assert code == cli.EXIT_INSUFFICIENT_DATA


def test_bad_tau(chain, tmp_path):
    root, ini, _ = chain
    code = run("seraip", root / "prep", root / "gb" / "model.json", "--tau", 1.5, "--out", tmp_path / "o")
    assert code == cli.EXIT_CONFIG


@pytest.mark.parametrize("exc, code", [
    (cli.CliError(cli.EXIT_SCHEMA, "x"), cli.EXIT_SCHEMA),
    (ConfigError("x"), cli.EXIT_CONFIG),
    (FileNotFoundError("x"), cli.EXIT_MISSING_INPUT),
    (SchemaError("x"), cli.EXIT_SCHEMA),
    (ModelFormatError("x"), cli.EXIT_SCHEMA),
    (TrainingDiverged("x"), cli.EXIT_DIVERGED),
    (InsufficientNegatives(10, 2), cli.EXIT_INSUFFICIENT_DATA),
    (MetricError("x"), cli.EXIT_INSUFFICIENT_DATA),
    (RuntimeError("x"), cli.EXIT_ERROR),
])
def test_exit_code_mapping(exc, code):
    assert cli.exit_code_for(exc) == code


def test_divergence_exit_code(chain, tmp_path, monkeypatch):
    root, ini, _ = chain
    import ehrsepsis.pipeline as pipeline

    def boom(*a, **k):
        raise TrainingDiverged("loss is nan at epoch 1")
    monkeypatch.setattr(pipeline, "train_model", boom)
    assert run("train", root / "prep", "--model", "mlp", "--out", tmp_path / "o") == cli.EXIT_DIVERGED
    assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "TrainingDiverged"


# -- environment ------------------------------------------------------------------------

def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_SEED, "17")
    assert run("synth", "--n", 20, "--out", tmp_path / "a") == cli.EXIT_OK
    assert _manifest(tmp_path / "a")["seed"] == 17
    assert run("synth", "--n", 20, "--seed", 4, "--out", tmp_path / "b") == cli.EXIT_OK
    assert _manifest(tmp_path / "b")["seed"] == 4
    monkeypatch.setenv(cli.ENV_SEED, "x")
    assert run("synth", "--n", 20, "--out", tmp_path / "c") == cli.EXIT_CONFIG


def test_workers_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_WORKERS, "2")
    assert run("synth", "--n", 20, "--out", tmp_path / "a") == cli.EXIT_OK
    assert _manifest(tmp_path / "a")["workers"] == 2
    assert run("synth", "--n", 20, "--deterministic", "--out", tmp_path / "b") == cli.EXIT_OK
    assert _manifest(tmp_path / "b")["workers"] == 1
    monkeypatch.setenv(cli.ENV_WORKERS, "0")
    assert run("synth", "--n", 20, "--out", tmp_path / "c") == cli.EXIT_CONFIG


def test_same_seed_same_cohort_hash(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--n", 50, "--seed", 3, "--deterministic", "--out", tmp_path / d) == cli.EXIT_OK
    assert _manifest(tmp_path / "a")["outputs"] == _manifest(tmp_path / "b")["outputs"]


def test_out_dir_beside_an_input_file_is_allowed(chain):
    root, ini, _ = chain
    src = root / "synth" / "cohort.jsonl"
    assert run("prepare", src, "--config", ini, "--out", root / "synth") == cli.EXIT_CONFIG
    assert run("prepare", src, "--config", ini, "--out", root / "synth" / "prep") == cli.EXIT_OK
