import json

import pytest
from filelock import FileLock

from cipher.cli import main, split_overrides
from cipher.config import ConfigError, load_config, parse_config_text
from cipher.dataio import LabeledDataset
from cipher.evalharness import write_registry
from cipher.toydata import make_toy_faces

TINY = ["--config", "desk", "--gan.iters_per_stage", "6", "--gan.fade_iters", "3", "--diff.iterations", "4",
        "--diff.batch_size", "4", "--ddim.n", "40", "--ddim.steps", "3", "--data.n_per_class", "30",
        "--ft.epochs", "1", "--ft.batch_size", "16"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.setenv("CIPHER_RUNS_DIR", str(root / "runs"))
    make_toy_faces(root / "real", 40, size=32)
    args = TINY + ["--real", str(root / "real")]
    codes = {cmd: main([cmd] + args) for cmd in
             ("train-gan", "train-diffusion", "generate", "prepare", "finetune", "evaluate")}
    yield root, args, codes
    mp.undo()


def test_pipeline_commands_succeed(pipeline):
    root, _, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)
    run = root / "runs" / "desk"
    for sub in ("gan", "diffusion", "fakes", "data", "detector"):
        assert (run / sub / "config.cfg").is_file(), sub
    assert len(list((run / "fakes").glob("fake_*.png"))) == 40
    reports = list((run / "reports").glob("*/*.json"))
    assert len(reports) == 1
    report = json.loads(reports[0].read_text())
    assert list(report["corpora"]) == ["held-out"]
    assert (run / "events.log").is_file()


def test_detect_prints_probabilities(pipeline, capsys):
    root, args, _ = pipeline
    image = root / "real" / "face_00003.png"
    assert main(["detect", str(image)] + args) == 0
    path, prob, decision = capsys.readouterr().out.strip().split("\t")
    assert path == str(image)
    assert 0.0 <= float(prob) <= 1.0
    assert decision == ("fake" if float(prob) >= 0.5 else "real")


def test_detect_ensemble_of_two_checkpoints(pipeline, capsys):
    root, args, _ = pipeline
    det = root / "runs" / "desk" / "detector"
    image = str(root / "real" / "face_00001.png")
    main(["detect", image, "--detector", str(det / "best.safetensors")] + args)
    single = float(capsys.readouterr().out.split("\t")[1])
    code = main(["detect", image, "--detector", str(det / "best.safetensors"),
                 "--detector", str(det / "best.safetensors")] + args)
    assert code == 0
    assert float(capsys.readouterr().out.split("\t")[1]) == pytest.approx(single)


def test_evaluate_nine_corpus_registry(pipeline, capsys, tmp_path):
    root, args, _ = pipeline
    manifest = root / "runs" / "desk" / "data" / "manifest.tsv"
    names = [f"corpus{i}" for i in range(9)]
    registry = write_registry(tmp_path / "registry.tsv", {n: manifest for n in names})
    assert main(["evaluate", "--eval.registry", str(registry)] + args) == 0
    out = capsys.readouterr().out
    header = out.splitlines()[0]
    assert header.count(" Acc |") == 10
    assert "Average Acc" in header and header.index("corpus8 Acc") < header.index("Average Acc")


def test_prepare_counts_and_replay(tmp_path, monkeypatch):
    monkeypatch.setenv("CIPHER_RUNS_DIR", str(tmp_path / "runs"))
    make_toy_faces(tmp_path / "real", 110, size=16)
    make_toy_faces(tmp_path / "fake", 105, size=16, seed=1)
    common = ["--real", str(tmp_path / "real"), "--fake", str(tmp_path / "fake"), "--n", "100"]
    assert main(["prepare", "--name", "a"] + common) == 0
    assert main(["prepare", "--name", "b"] + common) == 0
    a = tmp_path / "runs" / "a" / "data" / "manifest.tsv"
    b = tmp_path / "runs" / "b" / "data" / "manifest.tsv"
    ds = LabeledDataset.load_manifest(a)
    assert len(ds) == 200 and ds.is_balanced
    assert a.read_bytes() == b.read_bytes()


def test_prepare_deficit_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CIPHER_RUNS_DIR", str(tmp_path / "runs"))
    make_toy_faces(tmp_path / "real", 5, size=16)
    make_toy_faces(tmp_path / "fake", 3, size=16, seed=1)
    code = main(["prepare", "--real", str(tmp_path / "real"), "--fake", str(tmp_path / "fake"), "--n", "4"])
    assert code != 0
    assert "deficit 1" in capsys.readouterr().err


def test_missing_upstream_names_path(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CIPHER_RUNS_DIR", str(tmp_path / "runs"))
    assert main(["finetune", "--name", "empty"]) != 0
    err = capsys.readouterr().err
    assert str(tmp_path / "runs" / "empty" / "gan" / "discriminator.safetensors") in err
    assert "train-gan" in err


def test_stage_count_must_match_resolution(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CIPHER_RUNS_DIR", str(tmp_path / "runs"))
    make_toy_faces(tmp_path / "real", 4, size=16)
    code = main(["train-gan", "--config", "desk", "--real", str(tmp_path / "real"), "--gan.stages", "2"])
    assert code != 0
    assert "data.resolution" in capsys.readouterr().err


def test_lock_blocks_concurrent_commands(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CIPHER_RUNS_DIR", str(tmp_path / "runs"))
    run_dir = tmp_path / "runs" / "locked"
    run_dir.mkdir(parents=True)
    with FileLock(str(run_dir / ".lock")):
        assert main(["evaluate", "--name", "locked"]) != 0
    assert "lock" in capsys.readouterr().err


def test_overrides_and_config_precedence(tmp_path):
    rest, overrides = split_overrides(["train-gan", "--config", "x.cfg", "--gan.lr", "0.5", "--seed=7",
                                       "--n", "12"])
    assert rest == ["train-gan", "--config", "x.cfg"]
    assert overrides == {"gan.lr": "0.5", "run.seed": "7", "data.n_per_class": "12"}
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("[gan]\nlr = 0.01\nseed =\n[run]\nseed = 5\n")
    cfg = load_config(cfg_file, {"gan.lr": "0.5"})
    assert cfg["gan.lr"] == 0.5
    assert cfg["gan.seed"] == 5 and cfg["ft.seed"] == 5
    assert load_config(cfg_file)["gan.lr"] == 0.01
    assert load_config()["run.seed"] == 42


def test_presets_load():
    desk = load_config("desk")
    assert desk["data.resolution"] == 16 and desk["diff.T"] == 200 and desk["diff.iterations"] == 2000
    assert desk["ddim.n"] == 500 and desk["ft.epochs"] == 5
    paper = load_config("paper")
    assert paper["gan.iters_per_stage"] == 50000 and paper["diff.multipliers"] == [1, 2, 4]
    assert paper["data.n_per_class"] == 15000


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_text("[gan]\nnot_a_key = 1\n")
    with pytest.raises(ConfigError):
        load_config(None, {"gan.lr": "fast"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_frozen_config_round_trips(tmp_path):
    cfg = load_config("desk", {"run.seed": "9"})
    path = cfg.freeze(tmp_path / "config.cfg")
    again = load_config(path)
    assert again.to_text() == cfg.to_text()
    assert again.hash() == cfg.hash()
