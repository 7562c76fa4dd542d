import subprocess
import sys

import pytest

from crossdd.cli import main
from crossdd.config import ConfigFileError, parse_run_config

TINY_CONFIG = """\
benchmark.sizes = 8,8,6
benchmark.n_tokens = 4
benchmark.latent_dim = 3
benchmark.dims.face = 4
benchmark.dims.behavior = 3
benchmark.dims.audio = 4
trainer.epochs = 1
trainer.batch_size = 4
trainer.alpha = 0.05
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG + f"output.dir = {tmp_path / 'runs'}\n")
    return path


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "bench", "report"):
        assert cmd in out


def test_console_module_runs():
    proc = subprocess.run([sys.executable, "-m", "crossdd.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "crossdd" in proc.stdout


def test_invalid_strategy_lists_choices(capsys, config):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(config), "--strategy", "foo"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for name in ("simultaneous", "alternating", "bydomain"):
        assert name in err


def test_gen_writes_files_and_refuses_overwrite(tmp_path, config, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--config", str(config), "--out", str(data)]) == 0
    files = sorted(p.name for p in data.iterdir())
    assert files == ["S1.xdg", "S1.xdg.manifest", "S2.xdg", "S2.xdg.manifest", "S3.xdg",
                     "S3.xdg.manifest", "benchmark.manifest"]
    before = (data / "S1.xdg").read_bytes()
    assert main(["gen", "--config", str(config), "--out", str(data)]) == 1
    assert "--force" in capsys.readouterr().err
    assert main(["gen", "--config", str(config), "--out", str(data), "--seed", "7", "--force"]) == 0
    assert len(list(data.iterdir())) == len(files)
    assert (data / "S1.xdg").read_bytes() != before


def test_gen_unwritable_location(tmp_path, config, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", "--config", str(config), "--out", str(blocker / "sub")]) == 1
    assert str(blocker) in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(ConfigFileError, match="trainer.lrr"):
        parse_run_config("trainer.lrr = 0.1\n")
    path = tmp_path / "bad.cfg"
    path.write_text("bogus = 1\n")
    assert main(["gen", "--config", str(path)]) == 1


def test_config_values_parse():
    cfg = parse_run_config(TINY_CONFIG + "protocol.a.kind = multi\nprotocol.a.train = S2,S3\n"
                           "protocol.a.test = S1\nprotocol.a.trainer = mm-idgm\nprotocol.a.seeds = 0,1\n")
    assert cfg.benchmark.sizes == (8, 8, 6) and cfg.benchmark.dims["behavior"] == 3
    assert cfg.trainer.alpha == 0.05 and cfg.trainer.epochs == 1
    assert cfg.protocols["a"].seeds == (0, 1) and cfg.protocols["a"].trainer.value == "mm-idgm"


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("XDG_BENCH_OUT", str(tmp_path / "envout"))
    assert str(parse_run_config("").output_dir) == str(tmp_path / "envout")


def test_train_without_data_fails_cleanly(config, capsys):
    assert main(["train", "--config", str(config), "--train", "S2", "--test", "S1"]) == 1
    assert "crossdd gen" in capsys.readouterr().err


def test_train_bench_report_end_to_end(tmp_path, config, capsys):
    runs = tmp_path / "runs"
    assert main(["gen", "--config", str(config)]) == 0
    assert main(["train", "--config", str(config), "--train", "S2,S3", "--test", "S1",
                 "--trainer", "idgm", "--seed", "0", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("accuracy=") == 2
    assert main(["bench", "--config", str(config), "--strategy", "alternating",
                 "--trainer", "mm-idgm", "--fusion", "average", "--format", "md"]) == 0
    assert (runs / "report.md").exists()
    capsys.readouterr()
    assert main(["report", "--config", str(config), "--format", "csv"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].startswith("Strategy,Trainer,Modalities,Fusion,S2&S3 to S1")
    assert any(line.startswith("alternating,mm-idgm") for line in table)
    assert any(line.startswith("simultaneous,idgm") for line in table)


def test_failed_run_gives_nonzero_exit(tmp_path, config, capsys):
    assert main(["gen", "--config", str(config)]) == 0
    bad = tmp_path / "bad.cfg"
    bad.write_text(config.read_text() + "trainer.mm_idgm_modalities = face,nose\n")
    code = main(["train", "--config", str(bad), "--train", "S2,S3", "--test", "S1", "--trainer", "mm-idgm"])
    assert code == 1
    assert "failed" in capsys.readouterr().err


def test_report_missing_directory(tmp_path):
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 1
