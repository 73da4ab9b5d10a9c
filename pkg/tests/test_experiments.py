"""Training loop, evaluation, and analysis-harness tests."""

import dataclasses

import numpy as np
import pytest

from capstext import experiments as ex
from capstext import model as mdl
from capstext import synth
from capstext.config import ModelConfig
from capstext.data import load_bundle, load_rewrite_rows
from capstext.errors import ConfigError, DivergenceError


@pytest.fixture(scope="module")
def toy_bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = synth.write_corpus(root, synth.toy_corpus())
    return load_bundle(manifest, min_len=2)


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        num_classes=2, batch_size=8, l2_gate=0.001, filters=8, filter_size=2,
        lr=0.01, capsules=2, caps_dim=4, class_caps_dim=4, dropout=0.3,
        epochs=25, seed=0, embed_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


class TestRunTraining:
    @pytest.mark.parametrize("routing", ["static", "dynamic"])
    def test_separable_toy_reaches_full_train_accuracy(self, toy_bundle, routing):
        cfg = toy_config(routing=routing, epochs=50)
        record, model = ex.run_training(cfg, toy_bundle)
        assert ex.train_accuracy(model, toy_bundle) == 1.0
        assert record.test_acc == 1.0

    def test_fixed_seed_reproduces_run_record(self, toy_bundle):
        cfg = toy_config(epochs=6)
        first, _ = ex.run_training(cfg, toy_bundle)
        second, _ = ex.run_training(cfg, toy_bundle)
        assert first.to_csv() == second.to_csv()
        assert [r.train_loss for r in first.rows] == [r.train_loss for r in second.rows]

    def test_different_seed_changes_trajectory(self, toy_bundle):
        a, _ = ex.run_training(toy_config(epochs=4), toy_bundle)
        b, _ = ex.run_training(toy_config(epochs=4, seed=1), toy_bundle)
        assert [r.train_loss for r in a.rows] != [r.train_loss for r in b.rows]

    def test_best_checkpoint_is_max_val_accuracy(self, toy_bundle):
        record, _ = ex.run_training(toy_config(epochs=10), toy_bundle)
        best = max(row.val_acc for row in record.rows)
        assert record.rows[record.best_epoch].val_acc == best
        assert record.best_val_acc == best

    def test_epochs_contiguous_and_lr_decays(self, toy_bundle):
        record, _ = ex.run_training(toy_config(epochs=5), toy_bundle)
        assert [row.epoch for row in record.rows] == list(range(5))
        rates = [row.lr for row in record.rows]
        assert all(a > b for a, b in zip(rates, rates[1:]))
        assert rates[0] == pytest.approx(0.01)

    def test_csv_shape(self, toy_bundle):
        record, _ = ex.run_training(toy_config(epochs=3), toy_bundle)
        lines = record.to_csv().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_acc,lr"
        assert len(lines) == 1 + 3 + 1
        assert lines[-1].startswith("summary,best_epoch=")

    def test_class_count_mismatch_rejected(self, toy_bundle):
        cfg = toy_config()
        bad = dataclasses.replace(toy_bundle.train, num_classes=5)
        bundle = dataclasses.replace(toy_bundle, train=bad, num_classes=5)
        with pytest.raises(ConfigError, match="classes"):
            ex.run_training(cfg, bundle)

    def test_divergence_reports_epoch_and_step(self, toy_bundle):
        cfg = toy_config(lr=1e30, epochs=2, l2_gate=1e30)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError, match="epoch"):
                ex.run_training(cfg, toy_bundle)


class TestEvaluateAccuracy:
    def test_memorized_toy_split_scores_one(self, toy_bundle):
        _, model = ex.run_training(toy_config(epochs=50), toy_bundle)
        assert ex.evaluate_accuracy(model, toy_bundle.train) == 1.0

    def test_untrained_model_near_chance_on_balanced_data(self):
        rng = np.random.default_rng(0)
        k = 6
        cfg = toy_config(num_classes=k, capsules=3, embed_dim=6, epochs=1)
        from capstext.data import TextDataset

        n = 1200
        dataset = TextDataset(
            labels=[int(rng.integers(k)) for _ in range(n)],
            token_ids=[[int(rng.integers(2, 40)) for _ in range(4)] for _ in range(n)],
            split="test", max_len=4, num_classes=k,
        )
        model = mdl.CapsTextModel(cfg, vocab_size=40, max_len=4)
        acc = ex.evaluate_accuracy(model, dataset)
        # an untrained model is label-agnostic: binomial(n, 1/k) puts
        # accuracy within 5 sigma of 1/k
        sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
        assert abs(acc - 1 / k) < 5 * sigma

    def test_invariant_to_example_order(self, toy_bundle):
        _, model = ex.run_training(toy_config(epochs=5), toy_bundle)
        flipped = dataclasses.replace(
            toy_bundle.test,
            labels=list(reversed(toy_bundle.test.labels)),
            token_ids=list(reversed(toy_bundle.test.token_ids)),
        )
        assert ex.evaluate_accuracy(model, toy_bundle.test) == pytest.approx(
            ex.evaluate_accuracy(model, flipped)
        )

    def test_length_mismatch_rejected(self, toy_bundle):
        _, model = ex.run_training(toy_config(epochs=1), toy_bundle)
        stretched = dataclasses.replace(toy_bundle.test, max_len=9)
        with pytest.raises(ConfigError, match="padded"):
            ex.evaluate_accuracy(model, stretched)


class TestAblation:
    def test_all_variants_learn_toy(self, toy_bundle):
        cfg = toy_config(epochs=40, max_len=7)
        bundle = load_bundle_with_len(toy_bundle, 7)
        cells = ex.run_ablation(
            cfg, bundle,
            frontends=("elu_gate", "conv_plain", "multi_filter", "multi_filter_maxpool"),
            routings=("static",), seeds=(0,),
        )
        for cell in cells:
            assert cell.mean == 1.0, f"{cell.frontend} failed to fit the toy"

    def test_mean_is_arithmetic_mean_of_seeds(self, toy_bundle):
        cfg = toy_config(epochs=3)
        cells = ex.run_ablation(cfg, toy_bundle, frontends=("elu_gate",),
                                routings=("static",), seeds=(0, 1, 2))
        cell = cells[0]
        assert len(cell.per_seed) == 3
        assert cell.mean == pytest.approx(float(np.mean(cell.per_seed)))

    def test_table_format(self, toy_bundle):
        cfg = toy_config(epochs=2)
        cells = ex.run_ablation(cfg, toy_bundle, frontends=("elu_gate",),
                                routings=("static", "dynamic"), seeds=(0,))
        table = ex.ablation_table(cells, dataset="trec-qa")
        lines = table.strip().split("\n")
        assert lines[0].startswith("frontend\trouting")
        assert len(lines) == 3
        assert "94.80" in lines[1]  # full-scale reference column

    def test_thread_env_var_does_not_change_results(self, toy_bundle, monkeypatch):
        cfg = toy_config(epochs=3)
        sequential = ex.run_ablation(cfg, toy_bundle, frontends=("elu_gate",),
                                     routings=("static",), seeds=(0, 1))
        monkeypatch.setenv(ex.THREADS_ENV_VAR, "2")
        threaded = ex.run_ablation(cfg, toy_bundle, frontends=("elu_gate",),
                                   routings=("static",), seeds=(0, 1))
        assert [c.per_seed for c in sequential] == [c.per_seed for c in threaded]

    def test_bad_thread_env_var_rejected(self, monkeypatch):
        monkeypatch.setenv(ex.THREADS_ENV_VAR, "many")
        with pytest.raises(ConfigError, match="CAPSTEXT_THREADS"):
            ex.worker_count()


def load_bundle_with_len(bundle, max_len):
    return dataclasses.replace(
        bundle,
        max_len=max_len,
        train=dataclasses.replace(bundle.train, max_len=max_len),
        val=dataclasses.replace(bundle.val, max_len=max_len),
        test=dataclasses.replace(bundle.test, max_len=max_len),
    )


@pytest.fixture(scope="module")
def trained_pair(toy_bundle):
    _, model_s = ex.run_training(toy_config(epochs=40), toy_bundle)
    _, model_d = ex.run_training(toy_config(epochs=40, routing="dynamic"), toy_bundle)
    return model_s, model_d


@pytest.fixture(scope="module")
def decoder_model(toy_bundle):
    cfg = toy_config(epochs=30, with_decoder=True, decoder_hidden=(16, 24))
    record, model = ex.run_training(cfg, toy_bundle)
    return record, model


class TestOrderPerturbation:
    def test_identity_perturbation_equals_plain_eval(self, toy_bundle, trained_pair):
        model_s, model_d = trained_pair
        texts = {}
        for label, ids in zip(toy_bundle.test.labels, toy_bundle.test.token_ids):
            text = " ".join(toy_bundle.vocab.token(i) for i in ids)
            texts[text] = label
        rows = [(text, text) for text in texts]
        report = ex.run_order_perturbation(model_s, model_d, rows, toy_bundle)
        assert report.static_accuracy == pytest.approx(
            ex.evaluate_accuracy(model_s, toy_bundle.test)
        )
        assert report.dynamic_accuracy == pytest.approx(
            ex.evaluate_accuracy(model_d, toy_bundle.test)
        )
        assert report.static_accuracy == report.static_original_accuracy

    def test_aggregate_equals_mean_of_rows(self, toy_bundle, trained_pair):
        model_s, model_d = trained_pair
        rows = [("alpha beta gamma", "gamma beta alpha"),
                ("omega sigma tau", "tau sigma omega")]
        report = ex.run_order_perturbation(model_s, model_d, rows, toy_bundle)
        manual = np.mean([ex_.static_variant_pred == ex_.actual for ex_ in report.examples])
        assert report.static_accuracy == pytest.approx(float(manual))
        tsv = report.to_tsv()
        assert tsv.startswith("original\tvariant\tactual")
        assert len(tsv.strip().split("\n")) == 3

    def test_unknown_original_raises(self, toy_bundle, trained_pair):
        model_s, model_d = trained_pair
        with pytest.raises(LookupError, match="not found"):
            ex.run_order_perturbation(model_s, model_d,
                                      [("nonexistent sentence", "x")], toy_bundle)


class TestReconstructionNoise:
    def test_recon_mse_tracked_per_epoch(self, decoder_model):
        record, _ = decoder_model
        assert record.recon_mse is not None
        assert len(record.recon_mse) == len(record.rows)
        assert all(np.isfinite(v) for v in record.recon_mse)

    def test_zero_noise_row_matches_baseline(self, toy_bundle, decoder_model):
        _, model = decoder_model
        rows = ex.run_reconstruction_noise(model, toy_bundle.vocab,
                                           "alpha beta gamma", dims=[0], noises=[0.0, 0.2])
        baseline = rows[0]
        assert baseline.dim is None
        zero_noise = [r for r in rows if r.dim == 0 and r.noise == 0.0][0]
        assert zero_noise.sentence == baseline.sentence

    def test_sentences_keep_padded_length(self, toy_bundle, decoder_model):
        _, model = decoder_model
        rows = ex.run_reconstruction_noise(model, toy_bundle.vocab, "alpha beta",
                                           dims=[0, 1], noises=[-0.3, 0.3])
        for row in rows:
            assert len(row.sentence.split()) == model.max_len

    def test_decoder_required(self, toy_bundle):
        _, model = ex.run_training(toy_config(epochs=1), toy_bundle)
        with pytest.raises(ConfigError, match="decoder"):
            ex.run_reconstruction_noise(model, toy_bundle.vocab, "alpha", [0], [0.1])


class TestGradientSuite:
    def test_all_layers_under_tolerance(self):
        results = ex.gradient_check_suite(seeds=(0, 1, 2))
        expected = {"elu_gate", "primary_capsules", "static_routing_end_to_end",
                    "dynamic_routing_end_to_end", "margin_loss", "decoder"}
        assert set(results) == expected
        for name, err in results.items():
            assert err < 1e-4, f"{name} gradient error {err}"

    def test_gate_layer_tight_tolerance(self):
        # the gate layer alone is smooth; its error is far below the gate
        results = ex.gradient_check_suite(seeds=(0, 1, 2, 3, 4))
        assert results["elu_gate"] < 1e-5


class TestNearestReport:
    def test_report_lines(self, toy_bundle):
        _, model = ex.run_training(toy_config(epochs=2), toy_bundle)
        report = ex.nearest_report(ex.model_embedding_matrix(model),
                                   toy_bundle.vocab, "alpha", 3)
        lines = report.strip().split("\n")
        assert len(lines) == 3
        assert "alpha" not in lines
