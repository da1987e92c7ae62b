import json

import numpy as np
import pytest

from mscl import losses
from mscl.cli import cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, git_blob_hash, main
from mscl.config import RunConfig, load_config, parse_config, serialize_config
from mscl.dataset import load_interactions
from mscl.encoder import EmbeddingTable, load_checkpoint, save_checkpoint
from mscl.errors import ConfigError
from mscl.trainer import read_history_csv

SMALL_RUN = """\
train_path = data/train.txt
test_path = data/test.txt
encoder = lightgcn_mean
num_layers = 2
loss = mscl
num_positives = 3
embedding_dim = 8
batch_size = 128
epochs = 3
eval_every = 1
learning_rate = 0.01
seed = 9
"""


def test_round_trip_keeps_every_field():
    cfg = RunConfig(layer_weights=(0.5, 0.25, 0.25), num_layers=2, early_stop_patience=3,
                    temperature=0.15, filter_true_positives=False, num_items=17)
    back = parse_config(serialize_config(cfg))
    assert back == cfg


def test_comments_blank_lines_and_none():
    cfg = parse_config("# heading\n\nepochs = 7  # trailing\nsingle_layer = none\n")
    assert cfg.epochs == 7 and cfg.single_layer is None


@pytest.mark.parametrize("text, needle", [
    ("epoch = 3\n", "unknown key"),
    ("epochs = 3\nepochs = 4\n", "duplicate"),
    ("epochs = three\n", "epochs"),
    ("epochs\n", "key = value"),
    ("positive_weight = 1.5\n", "positive_weight"),
    ("encoder = gcn\n", "encoder"),
])
def test_bad_configs_rejected(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


@pytest.fixture
def workspace(tmp_path):
    assert cmd_synth(tmp_path / "data", seed=3) == 0
    (tmp_path / "run.cfg").write_text(SMALL_RUN)
    return tmp_path


def test_train_writes_outputs(workspace, capsys):
    assert cmd_train(workspace / "run.cfg", out=workspace / "out") == 0
    out = workspace / "out"
    for name in ("embeddings.bin", "base_embeddings.bin", "history.csv", "config.txt",
                 "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert manifest["inputs"]["train"]["git_blob_sha1"] == git_blob_hash(workspace / "data/train.txt")
    rows = read_history_csv((out / "history.csv").read_text())
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert all(r["seconds"] == 0.0 for r in rows)
    assert load_config(out / "config.txt").epochs == 3
    assert "recall=" in capsys.readouterr().out


def test_train_rejects_bad_weight(workspace, capsys):
    (workspace / "bad.cfg").write_text(SMALL_RUN + "positive_weight = 1.5\n")
    assert cmd_train(workspace / "bad.cfg") == 2
    assert "positive_weight" in capsys.readouterr().err


def test_train_missing_input(workspace):
    (workspace / "missing.cfg").write_text(SMALL_RUN.replace("data/train.txt", "nope.txt"))
    assert cmd_train(workspace / "missing.cfg") == 2


def test_seed_override_changes_run(workspace):
    assert cmd_train(workspace / "run.cfg", out=workspace / "a") == 0
    assert cmd_train(workspace / "run.cfg", out=workspace / "b", seed=10) == 0
    assert (workspace / "a/embeddings.bin").read_bytes() != (workspace / "b/embeddings.bin").read_bytes()


def test_eval_matches_last_history_row(workspace, capsys):
    assert cmd_train(workspace / "run.cfg", out=workspace / "out") == 0
    last = read_history_csv((workspace / "out/history.csv").read_text())[-1]
    capsys.readouterr()
    code = cmd_eval(workspace / "out/embeddings.bin", workspace / "data/train.txt",
                    workspace / "data/test.txt")
    assert code == 0
    printed = dict(part.split("=") for part in capsys.readouterr().out.split())
    assert abs(float(printed["recall"]) - last["recall"]) <= 1e-12
    assert abs(float(printed["ndcg"]) - last["ndcg"]) <= 1e-12
    assert (workspace / "out/eval.csv").read_text().startswith("epoch,loss,recall,ndcg,seconds")


def test_eval_with_oracle_checkpoint(tmp_path, capsys):
    (tmp_path / "train.txt").write_text("0 0\n1 1\n2 2\n")
    (tmp_path / "test.txt").write_text("0 3\n1 4\n2 3\n")
    ds = load_interactions(tmp_path / "train.txt", tmp_path / "test.txt")
    items = np.eye(ds.num_items)
    users = np.vstack([items[ds.test_positives[u][0]] for u in range(ds.num_users)])
    save_checkpoint(EmbeddingTable(users, items), tmp_path / "oracle.bin")
    assert cmd_eval(tmp_path / "oracle.bin", tmp_path / "train.txt", tmp_path / "test.txt", k=1) == 0
    assert capsys.readouterr().out.strip() == "recall=1.0 ndcg=1.0"


def test_eval_rejects_truncated_checkpoint(workspace):
    assert cmd_train(workspace / "run.cfg", out=workspace / "out") == 0
    path = workspace / "out/embeddings.bin"
    path.write_bytes(path.read_bytes()[:-5])
    assert cmd_eval(path, workspace / "data/train.txt", workspace / "data/test.txt") == 2


def test_checkpoint_holds_final_embeddings(workspace):
    assert cmd_train(workspace / "run.cfg", out=workspace / "out") == 0
    final = load_checkpoint(workspace / "out/embeddings.bin")
    base = load_checkpoint(workspace / "out/base_embeddings.bin")
    assert final.user_emb.shape == base.user_emb.shape
    assert not np.array_equal(final.user_emb, base.user_emb)


def _gradcheck_cfg(tmp_path, extra):
    path = tmp_path / "g.cfg"
    path.write_text("encoder = lightgcn_mean\nnum_layers = 2\n" + extra)
    return path


def test_gradcheck_cl_passes(tmp_path, capsys):
    assert cmd_gradcheck(_gradcheck_cfg(tmp_path, "loss = cl\n"), num_trials=100) == 0
    assert "max_rel_error" in capsys.readouterr().out


def test_gradcheck_mscl_passes(tmp_path):
    assert cmd_gradcheck(_gradcheck_cfg(tmp_path, "loss = mscl\nnum_positives = 5\n"),
                         num_trials=30) == 0


def test_gradcheck_catches_wrong_gradient(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(losses, "_POSITIVE_GRAD_SCALE", 1.01)
    assert cmd_gradcheck(_gradcheck_cfg(tmp_path, "loss = mscl\n"), num_trials=10) == 1
    assert "worst coordinate" in capsys.readouterr().out


def test_gradcheck_bad_config(tmp_path):
    assert cmd_gradcheck(_gradcheck_cfg(tmp_path, "loss = hinge\n")) == 2


def test_synth_round_trip_and_determinism(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "4",
                 "--noise-density", "0"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "4",
                 "--noise-density", "0"]) == 0
    for name in ("train.txt", "test.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ds = load_interactions(tmp_path / "a/train.txt", tmp_path / "a/test.txt")
    assert ds.num_users == 200 and ds.num_items <= 160
    for u in range(ds.num_users):
        assert np.all(ds.train_positives[u] // 40 == u // 50)
        assert np.all(ds.test_positives[u] // 40 == u // 50)


def test_main_dispatches_train(workspace):
    code = main(["train", "--config", str(workspace / "run.cfg"), "--out", str(workspace / "m")])
    assert code == 0
    assert (workspace / "m/history.csv").exists()
