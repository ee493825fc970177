import numpy as np
import pytest

from lldn import cli
from lldn.checkpoint import (Checkpoint, CheckpointError, decode_records, encode_records,
                             load_checkpoint, save_checkpoint)
from lldn.config import ConfigError, RunConfig, parse_config
from lldn.synth import read_manifest
from lldn.viz import (VizError, attention_overlay, heatmaps, minmax, read_pnm, write_pgm,
                      write_ppm)

# -- checkpoints ---------------------------------------------------------------


def sample_checkpoint():
    rng = np.random.default_rng(0)
    tensors = {"b.w": rng.standard_normal((3, 4)).astype(np.float32),
               "a.b": np.zeros(4, np.float32), "s": np.array(2.5, np.float32)}
    adam = {"t": 7, "m": {k: v * 0.1 for k, v in tensors.items()}, "v": {k: v * v for k, v in tensors.items()}}
    return Checkpoint(RunConfig().to_text(), tensors, 12, {"counter": [1, 2, 3, 4]}, adam, {"best": 0.5})


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    ck = sample_checkpoint()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.epoch == 12 and back.rng_state == {"counter": [1, 2, 3, 4]} and back.extra == {"best": 0.5}
    assert back.config_text == ck.config_text and back.adam["t"] == 7
    for k, v in ck.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)


def test_records_sorted_by_name():
    raw = encode_records({"zz": np.ones(1), "aa": np.ones(2)})
    assert raw.index(b"aa") < raw.index(b"zz")
    assert list(decode_records(raw)) == ["aa", "zz"]


def test_tampered_checkpoint(tmp_path):
    save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"LLDN2" + raw[5:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")


# -- viz -----------------------------------------------------------------------

def test_pnm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), np.rint(img * 255))
    rgb = np.random.default_rng(0).random((2, 5, 3))
    write_ppm(tmp_path / "a.ppm", rgb)
    assert read_pnm(tmp_path / "a.ppm").shape == (2, 5, 3)
    with pytest.raises(VizError):
        write_ppm(tmp_path / "x.ppm", img)


def test_minmax_constant_channel():
    assert not minmax(np.full((3, 3), 4.0)).any()
    np.testing.assert_allclose(minmax(np.array([1.0, 3.0])), [0, 1])


def test_heatmap_channel_range():
    act = np.random.default_rng(1).random((4, 4, 2))
    maps = heatmaps(act, [0, 1])
    assert all(m.min() == 0 and m.max() == 1 for m in maps)
    with pytest.raises(VizError):
        heatmaps(act, [2])


def test_attention_overlay():
    scores = np.full((4, 4), 0.25)
    img = attention_overlay(scores, 3, (8, 8), 4, np.zeros((8, 8)))
    assert img.shape == (8, 8, 3)
    np.testing.assert_array_equal(img[4, 4], [1, 1, 0])  # query patch outline
    with pytest.raises(VizError):
        attention_overlay(scores * 2, 0, (8, 8), 4, np.zeros((8, 8)))
    with pytest.raises(VizError):
        attention_overlay(scores, 4, (8, 8), 4, np.zeros((8, 8)))


# -- config --------------------------------------------------------------------

def test_config_profiles_and_overrides():
    cfg = parse_config("[model]\nprofile = proj28-gfc-t3\nhidden = 256\n[train]\nepochs = 3\n")
    assert cfg.model.encoder == "projector" and cfg.model.depth == 3 and cfg.model.hidden == 256
    assert cfg.train.epochs == 3 and cfg.train.lr == 2e-4 and cfg.train.batch == 4
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", [
    "[model]\nbogus = 1\n", "[extra]\nx = 1\n", "[model]\nprofile = nope\n",
    "[model]\npatch = 5\n", "[eval]\nsigma_conf = 1.5\n", "[train]\nepochs = many\n",
    "[model]\nbackbone = rnf-s\n[grid]\nrows = 48\n", "not a config",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


# -- cli -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["generate", "--out", str(data), "--frames", "8", "--seed", "4", "--points", "3000"]) == 0
    (root / "t.ini").write_text("[model]\nprofile = pillars-gfc-t\n[train]\nepochs = 1\nval_frames = 2\n")
    assert cli.main(["train", "--config", str(root / "t.ini"), "--data", str(data),
                     "--out", str(root / "run")]) == 0
    return root


def test_generate_manifest_and_histogram(workspace, capsys):
    entries = read_manifest(workspace / "data" / "manifest.txt")
    assert [s for _, s in entries] == ["train", "test"] * 4
    cli.main(["generate", "--out", str(workspace / "d2"), "--frames", "5"])
    out = capsys.readouterr().out
    assert "occlusion-4-6  1" in out


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "train_log.csv", "training.png"):
        assert (run / name).exists()
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,f1_conf,f1_cls,seconds" and len(log) == 2
    assert load_checkpoint(run / "last.ckpt").adam["t"] == 1


def test_eval_writes_csv_and_png(workspace, capsys):
    out = workspace / "rep.csv"
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                     "--data", str(workspace / "data"), "--out", str(out), "--threads", "2"]) == 0
    assert out.read_text().startswith("slice,frames") and out.with_suffix(".png").exists()
    assert "fps" in capsys.readouterr().out


def test_oracle_eval_is_perfect(workspace):
    out = workspace / "oracle.csv"
    assert cli.main(["eval", "--oracle", "--data", str(workspace / "data"), "--out", str(out)]) == 0
    total = [l for l in out.read_text().splitlines() if l.startswith("total,")][0]
    assert total.endswith(",1.000000") and ",1.000000," in total


def test_infer_and_viz(workspace):
    ck = str(workspace / "run" / "last.ckpt")
    frame = str(workspace / "data" / "frame_00000.klnf")
    assert cli.main(["infer", "--checkpoint", ck, "--frame", frame, "--out", str(workspace / "inf")]) == 0
    assert read_pnm(workspace / "inf" / "confidence.pgm").shape == (32, 32)
    assert cli.main(["viz", "--checkpoint", ck, "--frame", frame, "--kind", "attention", "--block", "2",
                     "--head", "1", "--query", "5", "--out", str(workspace / "viz")]) == 0
    assert read_pnm(workspace / "viz" / "attention_b2_h1_q5.ppm").shape == (32, 32, 3)
    assert cli.main(["viz", "--checkpoint", ck, "--frame", frame, "--kind", "heatmap", "--block", "1",
                     "--channels", "0,3", "--out", str(workspace / "viz")]) == 0
    assert (workspace / "viz" / "heatmap_b1_c3.pgm").exists()


def test_exit_codes(workspace, tmp_path):
    data = str(workspace / "data")
    ck = str(workspace / "run" / "last.ckpt")
    frame = str(workspace / "data" / "frame_00000.klnf")
    assert cli.main(["eval", "--heuristic", "--data", str(tmp_path)]) == cli.EXIT_DATA
    (tmp_path / "bad.ini").write_text("[model]\nwhat = 1\n")
    assert cli.main(["train", "--config", str(tmp_path / "bad.ini"), "--data", data]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--heuristic", "--data", data, "--sigma-conf", "1.0"]) == cli.EXIT_CONFIG
    assert cli.main(["viz", "--checkpoint", ck, "--frame", frame, "--kind", "attention", "--block", "9",
                     "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    (tmp_path / "x.klnf").write_bytes(b"garbage")
    assert cli.main(["infer", "--checkpoint", ck, "--frame", str(tmp_path / "x.klnf"),
                     "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_checkpoint_config_mismatch(workspace, tmp_path):
    ck = load_checkpoint(workspace / "run" / "last.ckpt")
    ck.config_text = ck.config_text.replace("hidden = 64", "hidden = 32")
    save_checkpoint(ck, tmp_path / "m.ckpt")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"),
                     "--data", str(workspace / "data")]) == cli.EXIT_CONFIG


def test_numeric_failure_exit(workspace, tmp_path):
    (tmp_path / "nan.ini").write_text("[model]\nprofile = pillars-gfc-m\n[train]\nepochs = 2\nlr = 1e30\n"
                                      "val_frames = 2\n")
    code = cli.main(["train", "--config", str(tmp_path / "nan.ini"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_NUMERIC
