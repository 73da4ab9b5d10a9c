"""End-to-end command-line tests: outputs, determinism, exit codes."""

import numpy as np
import pytest

from capstext import synth
from capstext.checkpoint import load_model
from capstext.cli import main


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    manifest = synth.write_corpus(root, synth.toy_corpus())
    return manifest


@pytest.fixture(scope="module")
def toy_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.cfg"
    path.write_text(
        "num_classes = 2\nbatch_size = 8\nl2_gate = 0.001\nfilters = 8\n"
        "filter_size = 2\nlr = 0.01\ncapsules = 2\ncaps_dim = 4\n"
        "class_caps_dim = 4\ndropout = 0.3\nepochs = 25\nembed_dim = 8\n",
        encoding="utf-8",
    )
    return path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, toy_data, toy_cfg):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                 "--routing", "static", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out


class TestTrain:
    def test_writes_checkpoint_and_csv(self, trained_dir):
        assert (trained_dir / "model.ckpt").exists()
        csv = (trained_dir / "run.csv").read_text(encoding="utf-8")
        assert csv.startswith("epoch,train_loss,val_acc,lr\n")
        assert "summary,best_epoch=" in csv

    def test_dynamic_routing_flag(self, tmp_path, toy_data, toy_cfg):
        code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                     "--routing", "dynamic", "--route-iters", "3", "--seed", "0",
                     "--out", str(tmp_path)])
        assert code == 0
        model = load_model(tmp_path / "model.ckpt")
        assert model.cfg.routing == "dynamic" and model.cfg.route_iters == 3

    def test_identical_flags_identical_outputs(self, tmp_path, toy_data, toy_cfg):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                         "--seed", "3", "--out", str(out)])
            assert code == 0
            outs.append(out)
        assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
        assert (outs[0] / "run.csv").read_bytes() == (outs[1] / "run.csv").read_bytes()

    def test_missing_embeddings_with_pretrained_exits_2(self, tmp_path, toy_data, toy_cfg):
        code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                     "--pretrained", "--out", str(tmp_path)])
        assert code == 2

    def test_pretrained_vectors_used(self, tmp_path, toy_data, toy_cfg):
        vectors = tmp_path / "vectors.txt"
        rng = np.random.default_rng(0)
        words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "tau", "rho"]
        lines = [
            w + " " + " ".join(f"{v:.4f}" for v in rng.normal(size=8)) for w in words
        ]
        vectors.write_text("\n".join(lines) + "\n", encoding="utf-8")
        out = tmp_path / "run"
        code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                     "--pretrained", "--embeddings", str(vectors), "--out", str(out)])
        assert code == 0

    def test_bad_config_exits_2(self, tmp_path, toy_data):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs = maybe\n", encoding="utf-8")
        assert main(["train", "--config", str(bad), "--dataset", str(toy_data),
                     "--out", str(tmp_path)]) == 2

    def test_missing_dataset_exits_2(self, tmp_path, toy_cfg):
        assert main(["train", "--config", str(toy_cfg), "--out", str(tmp_path)]) == 2

    def test_divergence_exits_3(self, tmp_path, toy_data, toy_cfg):
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                         "--out", str(tmp_path), "--epochs", "2",
                         "--seed", "0", "--frontend", "elu_gate",
                         "--route-iters", "1", "--precision", "f32",
                         "--embed-dim", "8"] + ["--routing", "static"]
                        + _lr_bomb(tmp_path))
        assert code == 3


def _lr_bomb(tmp_path):
    cfg = tmp_path / "bomb.cfg"
    cfg.write_text(
        "num_classes = 2\nbatch_size = 8\nl2_gate = 1e30\nfilters = 8\n"
        "filter_size = 2\nlr = 1e30\ncapsules = 2\ncaps_dim = 4\n"
        "class_caps_dim = 4\ndropout = 0.0\nepochs = 2\nembed_dim = 8\n",
        encoding="utf-8",
    )
    return ["--config", str(cfg)]


class TestEval:
    def test_memorized_split_prints_one(self, capsys, toy_data, trained_dir):
        code = main(["eval", "--checkpoint", str(trained_dir / "model.ckpt"),
                     "--dataset", str(toy_data), "--split", "train"])
        assert code == 0
        assert capsys.readouterr().out.strip() == "1.0000"

    def test_wrong_dataset_exits_2(self, tmp_path, trained_dir):
        other = synth.write_corpus(tmp_path, {
            "train": [(0, "aa bb"), (1, "cc dd")],
            "val": [(0, "aa"), (1, "cc")],
            "test": [(0, "bb"), (1, "dd")],
        })
        assert main(["eval", "--checkpoint", str(trained_dir / "model.ckpt"),
                     "--dataset", str(other)]) == 2


class TestNeighbors:
    def test_prints_k_tokens(self, capsys, toy_data, trained_dir):
        code = main(["neighbors", "--checkpoint", str(trained_dir / "model.ckpt"),
                     "--dataset", str(toy_data), "--word", "alpha", "--k", "5"])
        assert code == 0
        out = capsys.readouterr().out.strip().split("\n")
        assert len(out) == 5 and "alpha" not in out

    def test_unknown_word_exits_2(self, toy_data, trained_dir):
        assert main(["neighbors", "--checkpoint", str(trained_dir / "model.ckpt"),
                     "--dataset", str(toy_data), "--word", "zeppelin"]) == 2


@pytest.fixture(scope="module")
def decoder_run(tmp_path_factory, toy_data, toy_cfg):
    out = tmp_path_factory.mktemp("decrun")
    code = main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                 "--with-decoder", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


class TestReconstructCommand:
    def test_emits_table_rows(self, capsys, toy_data, decoder_run):
        code = main(["reconstruct", "--checkpoint", str(decoder_run / "model.ckpt"),
                     "--dataset", str(toy_data), "--sentence", "alpha beta gamma",
                     "--dim", "1", "--noise", "0.3"])
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "dim\tnoise\tsentence"
        assert len(lines) == 3  # header, baseline, one perturbed row

    def test_no_decoder_exits_2(self, toy_data, trained_dir):
        assert main(["reconstruct", "--checkpoint", str(trained_dir / "model.ckpt"),
                     "--dataset", str(toy_data), "--sentence", "alpha"]) == 2


class TestPerturbOrderCommand:
    def test_report_files(self, capsys, tmp_path, toy_data, toy_cfg, trained_dir):
        dyn = tmp_path / "dyn"
        assert main(["train", "--config", str(toy_cfg), "--dataset", str(toy_data),
                     "--routing", "dynamic", "--seed", "0", "--out", str(dyn)]) == 0
        rewrites = tmp_path / "rewrites.tsv"
        rewrites.write_text("alpha beta gamma\tgamma beta alpha\n", encoding="utf-8")
        out = tmp_path / "report"
        code = main(["perturb-order",
                     "--static-checkpoint", str(trained_dir / "model.ckpt"),
                     "--dynamic-checkpoint", str(dyn / "model.ckpt"),
                     "--rewrites", str(rewrites), "--dataset", str(toy_data),
                     "--out", str(out)])
        assert code == 0
        assert (out / "perturbation.tsv").exists()
        assert "perturbed accuracy" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_passes_and_prints_layers(self, capsys):
        code = main(["gradcheck", "--seeds", "2"])
        out = capsys.readouterr().out
        assert code == 0
        for name in ("elu_gate", "dynamic_routing_end_to_end", "decoder"):
            assert name in out


class TestUsageErrors:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["eval"])
        assert info.value.code == 2
