import json

import pytest

from idnorm.cli import main
from idnorm.io import write_config
from test_experiment import TINY


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    write_config(path, TINY.to_flat())
    return path


def test_gen_data(tmp_path, tiny_config, capsys):
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    files = sorted((tmp_path / "data").glob("*.jsonl"))
    assert len(files) == 2
    head = json.loads(files[0].read_text().splitlines()[0])
    assert head["format_version"] == 1 and head["config_hash"] == TINY.hash


def test_output_root_from_environment(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("IDNORM_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(tiny_config), "--task", "au-detect"]) == 0
    assert list((tmp_path / "env" / "data").glob("au-detect_seed0_*.jsonl"))


def test_train_eval_report_cycle(tmp_path, tiny_config, capsys):
    out = str(tmp_path)
    assert main(["train-classifier", "--config", str(tiny_config), "--out", out,
                 "--variant", "no-idn", "--seed", "1"]) == 0
    run = tmp_path / "fer__no-idn__full" / "seed_1"
    assert (run / "metrics.json").exists()
    assert main(["eval", str(run)]) == 0
    assert "matches saved report" in capsys.readouterr().out
    assert main(["report", out]) == 0
    assert "no-idn/full" in capsys.readouterr().out


def test_train_normalizer_then_reuse(tmp_path, tiny_config):
    out = str(tmp_path)
    assert main(["train-normalizer", "--config", str(tiny_config), "--out", out]) == 0
    ckpt = tmp_path / "normalizer" / "seed_0" / "normalizer.json"
    assert ckpt.exists()
    assert main(["train-classifier", "--config", str(tiny_config), "--out", out,
                 "--variant", "idn-trained", "--normalizer", str(ckpt)]) == 0


def test_ablate_single_variant(tmp_path, tiny_config, capsys):
    assert main(["ablate", "--config", str(tiny_config), "--out", str(tmp_path),
                 "--variant", "m=0"]) == 0
    assert "idn-oracle/m=0" in capsys.readouterr().out
    assert (tmp_path / "ablation_fer" / "report.csv").exists()


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no completed runs" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train-classifier", "--task", "speech"])
