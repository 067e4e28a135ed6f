import io
import subprocess
import sys

import numpy as np
import pytest

from arfsfr.cli import build_parser, main
from arfsfr.io import load_tensor

CONFIG = """
[data]
train_classes = 5
val_classes = 3
test_classes = 3
samples_per_class = 6
image_size = 8
seed = 7

[encoder]
widths = 4, 4

[train]
way = 3
shot = 1
query = 2
epochs = 2
episodes_per_epoch = 2
schedule = cosine
snapshots = 2
val_every = 0

[eval]
way = 3
shot = 1
query = 3
episodes = 5
"""


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(CONFIG)
    code, text = run("gen-data", "--config", str(root / "run.cfg"), "--out", str(root / "data"))
    assert code == 0 and "wrote 66 samples" in text
    code, text = run("train", "--config", str(root / "run.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "run"))
    assert code == 0, text
    return root


def test_train_outputs(workspace):
    lines = (workspace / "run" / "train.log").read_text().splitlines()
    assert len(lines) == 4
    assert all(len(line.split("\t")) == 4 for line in lines)
    assert (workspace / "run" / "snapshot1.arfc").exists() and (workspace / "run" / "snapshot2.arfc").exists()


def test_train_is_idempotent(workspace):
    code, _ = run("train", "--config", str(workspace / "run.cfg"), "--data", str(workspace / "data"),
                  "--out", str(workspace / "again"))
    assert code == 0
    for name in ("train.log", "snapshot1.arfc", "snapshot2.arfc"):
        assert (workspace / "again" / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_eval_and_oracle(workspace):
    cfg, data = str(workspace / "run.cfg"), str(workspace / "data")
    code, text = run("eval", "--config", cfg, "--oracle", "--data", data)
    assert code == 0 and text.strip() == "100.00 ± 0.00"
    code, first = run("eval", "--config", cfg, "--checkpoint", str(workspace / "run" / "snapshot2.arfc"), "--data", data)
    assert code == 0
    mean, ci = first.strip().split(" ± ")
    assert 0 <= float(mean) <= 100 and float(ci) >= 0
    assert run("eval", "--config", cfg, "--checkpoint", str(workspace / "run" / "snapshot2.arfc"),
               "--data", data)[1] == first


def test_ensemble_eval(workspace):
    ckpts = ",".join(str(workspace / "run" / f"snapshot{i}.arfc") for i in (1, 2))
    code, text = run("ensemble-eval", "--config", str(workspace / "run.cfg"), "--checkpoints", ckpts,
                     "--data", str(workspace / "data"))
    assert code == 0 and " ± " in text


def test_export_maps(workspace, tmp_path):
    from arfsfr.io import save_tensor
    sample = load_tensor(workspace / "data" / "test" / "c0008" / "s0000.arft")
    assert sample.shape == (3, 8, 8)
    save_tensor(tmp_path / "s.arft", sample)
    code, text = run("export-maps", "--config", str(workspace / "run.cfg"), "--checkpoint",
                     str(workspace / "run" / "snapshot2.arfc"), "--sample", str(tmp_path / "s.arft"),
                     "--out", str(tmp_path / "maps"))
    assert code == 0
    w_s, w_f = load_tensor(tmp_path / "maps" / "W_s.arft"), load_tensor(tmp_path / "maps" / "W_f.arft")
    assert w_s.shape == (2, 2)
    np.testing.assert_allclose(w_s + w_f, 1.0, atol=1e-6)
    assert load_tensor(tmp_path / "maps" / "Omega_f.arft").shape == (3, 8, 8)


def test_show_rf(workspace):
    code, text = run("show-rf", "--config", str(workspace / "run.cfg"), "--checkpoint",
                     str(workspace / "run" / "snapshot1.arfc"), "--data", str(workspace / "data"))
    assert code == 0
    rows = text.strip().splitlines()[1:]
    assert len(rows) == 4
    assert {r.split()[1] for r in rows} == {"spatial", "frequency"}
    assert all(" x " in r and r.endswith("%") for r in rows)


def test_gradcheck_command():
    code, text = run("gradcheck", "--module", "spectral")
    assert code == 0 and "PASS" in text and "FAIL" not in text


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["foo"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_errors_map_to_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nepochs = -\n")
    assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "d"))[0] == 2
    assert "line 2" in capsys.readouterr().err
    assert run("eval", "--config", str(workspace / "run.cfg"), "--checkpoint", str(tmp_path / "none.arfc"),
               "--data", str(workspace / "data"))[0] == 1
    assert run("eval", "--config", str(workspace / "run.cfg"), "--oracle", "--data", str(workspace / "data"),
               "--split", "holdout")[0] == 2
    other = tmp_path / "other.cfg"
    other.write_text(CONFIG.replace("widths = 4, 4", "widths = 4, 6"))
    assert run("eval", "--config", str(other), "--checkpoint", str(workspace / "run" / "snapshot1.arfc"),
               "--data", str(workspace / "data"))[0] == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-data", "train", "eval", "ensemble-eval", "gradcheck", "export-maps", "show-rf"}
    for name, subparser in sub.choices.items():
        text = subparser.format_help()
        for action in subparser._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "arfsfr", "eval", "--help"], capture_output=True, text=True)
    assert result.returncode == 0 and "--checkpoint" in result.stdout and "--oracle" in result.stdout
