import pytest

from fedfor.cli import main, metrics_name
from fedfor.config import ConfigError, ExperimentConfig, parse_config, serialize_config
from fedfor.metrics import read_csv

TINY = """\
methods = fedavg
rounds = 2
seeds = 0
n_classes = 3
dim = 4
n_per_class = 20
n_val_per_class = 10
hidden_sizes = 8
"""


def test_defaults():
    cfg = parse_config("methods = fedfor\nrounds = 5\n")
    assert cfg.alpha == 5.0 and cfg.lr == 0.01 and cfg.batch_size == 32
    assert cfg.mode == "cross-device" and len(cfg.seeds) == 3
    assert cfg.method_alpha("fedcurv") == 5.0


def test_comments_lists_and_bools():
    cfg = parse_config("methods = fedavg, scaffold  # two\nrounds=3\nnorm_layer = true\n"
                       "fedbn = true\nfedcurv_alpha = 0.5\n")
    assert cfg.methods == ("fedavg", "scaffold") and cfg.fedbn
    assert cfg.method_alpha("fedcurv") == 0.5 and cfg.method_alpha("fedfor") == 5.0


@pytest.mark.parametrize("text, key", [
    ("methods = fedavg\nrounds = 2\nalpha = -1\n", "alpha"),
    ("methods = fedavg\nrounds = 2\nbogus = 1\n", "bogus"),
    ("methods = fedavg\n", "rounds"),
    ("methods = fedavg\nrounds = two\n", "rounds"),
    ("methods = sgd\nrounds = 2\n", "methods"),
    ("methods = fedavg\nrounds = 2\nrounds = 3\n", "rounds"),
    ("methods = fedavg\nrounds = 2\nfedbn = yes\n", "fedbn"),
    ("methods = fedavg\nrounds = 2\nmode = cross-silo\nclients_per_round = 20\n",
     "clients_per_round"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == key and key in str(err.value)


def test_alpha_range_message():
    with pytest.raises(ConfigError, match=">= 0"):
        parse_config("methods = fedavg\nrounds = 2\nalpha = -1\n")


def test_serialize_round_trip():
    cfg = parse_config(TINY + "alpha = 0.25\nconcept_shift_rounds = 3,5\ndata_path = \n")
    assert parse_config(serialize_config(cfg)) == cfg


def test_digest_ignores_output_settings():
    a = parse_config(TINY)
    b = parse_config(TINY, {"out_dir": "elsewhere", "workers": "4"})
    c = parse_config(TINY, {"alpha": "1.0"})
    assert a.digest == b.digest != c.digest


def test_direct_construction_validated():
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("fedavg",), rounds=0)


def write_cfg(tmp_path, extra=""):
    path = tmp_path / "exp.cfg"
    path.write_text(TINY + extra)
    return path


def test_cli_smoke(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    digest, rows = read_csv(out / metrics_name("fedavg", 0))
    assert len(rows) == 2 and [r["round"] for r in rows] == [1, 2]
    assert digest == parse_config(TINY).digest
    s_digest, summary = read_csv(out / "summary.csv")
    assert s_digest == digest and summary[0]["method"] == "fedavg"
    assert (out / "config.cfg").exists()


def test_cli_reruns_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in (metrics_name("fedavg", 0), "summary.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_cli_parallel_matches_serial(tmp_path):
    cfg = write_cfg(tmp_path)
    args = ["run", "--config", str(cfg), "--override", "seeds=0,1"]
    assert main(args + ["--out", str(tmp_path / "s")]) == 0
    assert main(args + ["--out", str(tmp_path / "p"), "--workers", "2"]) == 0
    for name in (metrics_name("fedavg", 1), "summary.csv"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_cli_fedfor_alpha_zero_matches_fedavg(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(out),
                 "--override", "methods=fedavg,fedfor", "--override", "alpha=0",
                 "--override", "rounds=4"]) == 0
    _, a = read_csv(out / metrics_name("fedavg", 0))
    _, b = read_csv(out / metrics_name("fedfor", 0))
    assert [r["val_acc"] for r in a] == [r["val_acc"] for r in b]


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--override", "alpha=-1"]) == 2
    assert "alpha" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert main(["bogus"]) == 2
    # the run itself fails: the data file is missing
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "f"),
                 "--override", f"data_path={tmp_path / 'missing.csv'}"]) == 1


def test_cli_summarize(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
    before = (out / "summary.csv").read_bytes()
    (out / "summary.csv").unlink()
    assert main(["summarize", "--in", str(out)]) == 0
    assert (out / "summary.csv").read_bytes() == before
    assert "fedavg" in capsys.readouterr().out
    assert main(["summarize", "--in", str(tmp_path / "none")]) == 1
