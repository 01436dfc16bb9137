import hashlib

import numpy as np
import pytest

from bandnet import cli, features
from bandnet.model import build_model, ModelConfig, save_model


def run_cli(*args):
    return cli.main([str(a) for a in args])


def checksum_tree(root):
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def write_scenario_config(path, variant="baseline", epochs=1, extra_model=""):
    path.write_text(
        f"""
[scenario]
name = AM3
variant = {variant}
epochs = {epochs}
batch_size = 64
lr = 0.05
frame_stride = 2
seed = 5

[model]
variant = {variant}
conv1_filters = 2
conv2_filters = 2
dense_units = 8
bottleneck_units = 4
n_classes = 8
embedding_dim = 4
{extra_model}
"""
    )


@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    spec = root / "corpus.cfg"
    spec.write_text(
        """
[corpus]
n_train_utts = 14
n_test_wb = 2
n_test_nb = 2
utt_seconds = 0.7, 1.0
seed = 9
"""
    )
    out = root / "data"
    assert run_cli("synth", "--spec", spec, "--out", out, "--seed", 9) == 0
    return {"root": root, "data": out, "spec": spec}


class TestSynth:
    def test_outputs_exist(self, mini_corpus):
        data = mini_corpus["data"]
        assert (data / "train.tsv").is_file()
        assert (data / "test.tsv").is_file()
        assert len(list((data / "wav").glob("*.wav"))) == 18
        assert len(list((data / "labels").glob("*.txt"))) == 18

    def test_seeded_determinism(self, mini_corpus, tmp_path):
        out2 = tmp_path / "again"
        assert run_cli("synth", "--spec", mini_corpus["spec"], "--out", out2, "--seed", 9) == 0
        assert checksum_tree(out2) == checksum_tree(mini_corpus["data"])

    def test_missing_spec_exits_2(self, tmp_path):
        assert run_cli("synth", "--spec", tmp_path / "nope.cfg", "--out", tmp_path / "o") == 2


class TestFeaturize:
    def test_writes_feature_file(self, mini_corpus, tmp_path):
        out = tmp_path / "train.bnft"
        code = run_cli(
            "featurize", "--manifest", mini_corpus["data"] / "train.tsv",
            "--scenario", "native", "--out", out,
        )
        assert code == 0
        tensors, scenario = features.read_features(out)
        assert scenario == "native"
        assert len(tensors) == 14
        assert all(t.labels is not None for t in tensors)

    def test_rerun_byte_identical(self, mini_corpus, tmp_path):
        a, b = tmp_path / "a.bnft", tmp_path / "b.bnft"
        man = mini_corpus["data"] / "train.tsv"
        run_cli("featurize", "--manifest", man, "--scenario", "native", "--out", a)
        run_cli("featurize", "--manifest", man, "--scenario", "native", "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_wav_names_utterance(self, mini_corpus, tmp_path, capsys, caplog):
        data = mini_corpus["data"]
        man = tmp_path / "bad.tsv"
        man.write_text("bad_utt.wav\t0\tlabels/x.txt\n")
        (tmp_path / "bad_utt.wav").write_bytes(b"garbage!")
        (tmp_path / "labels").mkdir()
        (tmp_path / "labels/x.txt").write_text("0\n")
        code = run_cli("featurize", "--manifest", man, "--scenario", "native", "--out", tmp_path / "o.bnft")
        assert code == 1
        assert "bad_utt" in caplog.text


@pytest.fixture(scope="module")
def trained(mini_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("clitrain")
    feats = root / "train.bnft"
    run_cli("featurize", "--manifest", mini_corpus["data"] / "train.tsv",
            "--scenario", "native", "--out", feats)
    cfg = root / "scenario.cfg"
    write_scenario_config(cfg, epochs=2)
    out = root / "run"
    assert run_cli("train", "--config", cfg, "--features", feats, "--out", out) == 0
    return {"root": root, "features": feats, "config": cfg, "run": out,
            "ckpt": out / "final.bnmd"}


class TestTrain:
    def test_outputs(self, trained):
        assert trained["ckpt"].is_file()
        metrics = (trained["run"] / "metrics.tsv").read_text().splitlines()
        assert metrics[0] == "epoch\tloss\twb_frame_acc\tnb_frame_acc"
        assert len(metrics) == 3

    def test_resume_continues(self, trained, tmp_path):
        cfg = tmp_path / "s3.cfg"
        write_scenario_config(cfg, epochs=3)
        out = tmp_path / "resumed"
        code = run_cli(
            "train", "--config", cfg, "--features", trained["features"], "--out", out,
            "--resume", trained["run"] / "ckpt_epoch2.bnmd",
        )
        assert code == 0
        rows = (out / "metrics.tsv").read_text().strip().splitlines()
        assert rows[-1].startswith("3\t")

    def test_invalid_variant_exits_2(self, trained, tmp_path, caplog):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[scenario]\nvariant = flux\n")
        code = run_cli("train", "--config", cfg, "--features", trained["features"], "--out", tmp_path / "o")
        assert code == 2
        assert "baseline" in caplog.text  # lists valid variants

    def test_scenario_mismatch_exits_2(self, trained, tmp_path):
        cfg = tmp_path / "am4.cfg"
        cfg.write_text(
            "[scenario]\nname = AM4\nvariant = baseline\nepochs = 1\n\n"
            "[model]\nconv1_filters = 2\nconv2_filters = 2\ndense_units = 8\n"
            "bottleneck_units = 4\nn_classes = 8\n"
        )
        code = run_cli("train", "--config", cfg, "--features", trained["features"], "--out", tmp_path / "o")
        assert code == 2


class TestEval:
    def test_report_layout(self, trained, mini_corpus, tmp_path, capsys):
        out = tmp_path / "rep"
        code = run_cli(
            "eval", "--checkpoint", trained["ckpt"],
            "--manifest", mini_corpus["data"] / "test.tsv", "--out", out,
        )
        assert code == 0
        text = (out / "report.txt").read_text()
        assert "WB TER%" in text and "NB TER%" in text
        tsv = (out / "report.tsv").read_text().splitlines()
        assert tsv[0].startswith("scenario\t")

    def test_wb_only_manifest_renders_dash(self, trained, mini_corpus, tmp_path):
        entries = features.read_manifest(mini_corpus["data"] / "test.tsv")
        man = mini_corpus["data"] / "wbonly.tsv"
        rows = [
            (str(e.wav_path.relative_to(mini_corpus["data"])), e.bandwidth,
             str(e.label_path.relative_to(mini_corpus["data"])))
            for e in entries if e.bandwidth == 0
        ]
        features.write_manifest(man, rows)
        out = tmp_path / "rep"
        assert run_cli("eval", "--checkpoint", trained["ckpt"], "--manifest", man, "--out", out) == 0
        assert "—" in (out / "report.txt").read_text()

    def test_scenario_mismatch_refused(self, trained, mini_corpus, caplog):
        code = run_cli(
            "eval", "--checkpoint", trained["ckpt"],
            "--manifest", mini_corpus["data"] / "test.tsv", "--scenario", "upsample16k",
        )
        assert code == 2
        assert "refusing" in caplog.text

    def test_plain_model_checkpoint_needs_no_meta(self, mini_corpus, tmp_path):
        cfg = ModelConfig(variant="baseline", conv1_filters=2, conv2_filters=2,
                          dense_units=8, bottleneck_units=4, n_classes=8)
        save_model(build_model(cfg, seed=0, dtype=np.float32), tmp_path / "m.bnmd")
        code = run_cli("eval", "--checkpoint", tmp_path / "m.bnmd",
                       "--manifest", mini_corpus["data"] / "test.tsv")
        assert code == 0


class TestGradcheck:
    def test_passes_at_reduced_dims(self, capsys):
        assert run_cli("gradcheck", "--seed", 1) == 0
        out = capsys.readouterr().out
        assert "embedding.e0" in out
        assert out.count("== variant") == 4

    def test_corrupted_backward_detected(self, capsys):
        assert run_cli("gradcheck", "--seed", 1, "--corrupt", "dense1.weight") == 1
        out = capsys.readouterr().out
        assert "dense1.weight" in out

    def test_reports_every_tensor(self, capsys):
        run_cli("gradcheck", "--seed", 2)
        out = capsys.readouterr().out
        for name in ("conv1.filters", "conv2.bias", "bottleneck.weight", "output.bias",
                     "embedding.v", "wb.conv1.filters", "nb.conv2.filters"):
            assert name in out


class TestSweep:
    def test_single_dim_single_row(self, mini_corpus, tmp_path):
        cfg = tmp_path / "sweep.cfg"
        write_scenario_config(cfg, variant="embeddings", epochs=1)
        out = tmp_path / "sweep"
        code = run_cli("sweep", "--dims", "4", "--corpus", mini_corpus["data"],
                       "--out", out, "--config", cfg)
        assert code == 0
        tsv = (out / "sweep.tsv").read_text().strip().splitlines()
        assert tsv[0] == "dim\twb_ter\tnb_ter"
        assert len(tsv) == 2
        assert tsv[1].startswith("4\t")


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["definitely-not-a-command"])
        assert err.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as err:
            cli.main(["--version"])
        assert err.value.code == 0
