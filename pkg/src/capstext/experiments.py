"""Training, evaluation, and the analysis harnesses.

Harnesses: front-end ablations, word-order perturbation comparison
between routing modes, embedding nearest-neighbor reports, capsule
perturbation/reconstruction sweeps, and the per-layer gradient check
suite.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .config import ModelConfig
from .data import (DataBundle, EmbeddingMatrix, TextDataset, Vocabulary,
                   dataset_batches, nearest_words, pad_ids, tokenize)
from .errors import ConfigError, DivergenceError
from .optim import AdamState, adam_step, lr_schedule

# Accuracy (%) reference points from full-scale runs: 300-dim pretrained
# vectors, mean of five consecutive runs.  Reported for context next to
# desk-scale results; never used as pass/fail gates.
REFERENCE_FULL_SCALE_ACCURACY = {
    ("20news", "static"): 87.17, ("20news", "dynamic"): 86.45,
    ("reuters10", "static"): 87.52, ("reuters10", "dynamic"): 86.72,
    ("mr2004", "static"): 89.6, ("mr2004", "dynamic"): 88.1,
    ("mr2005", "static"): 80.98, ("mr2005", "dynamic"): 81.00,
    ("trec-qa", "static"): 94.84, ("trec-qa", "dynamic"): 93.80,
    ("mpqa", "static"): 90.57, ("mpqa", "dynamic"): 89.60,
    ("imdb", "static"): 89.72, ("imdb", "dynamic"): 89.80,
}

# Same caveats, for the front-end ablation grid.
REFERENCE_ABLATION_ACCURACY = {
    "static": {
        "multi_filter": {"trec-qa": 93.47, "mpqa": 88.68, "20news": 85.76, "mr2004": 85.89},
        "multi_filter_maxpool": {"trec-qa": 93.84, "mpqa": 89.28, "20news": 86.08, "mr2004": 85.69},
        "conv_plain": {"trec-qa": 93.99, "mpqa": 90.07, "20news": 85.40, "mr2004": 85.29},
        "elu_gate": {"trec-qa": 94.80, "mpqa": 90.57, "20news": 87.17, "mr2004": 89.60},
    },
    "dynamic": {
        "multi_filter": {"trec-qa": 91.95, "mpqa": 88.82, "20news": 85.56, "mr2004": 84.59},
        "multi_filter_maxpool": {"trec-qa": 92.63, "mpqa": 89.43, "20news": 85.69, "mr2004": 87.29},
        "conv_plain": {"trec-qa": 93.07, "mpqa": 90.26, "20news": 85.60, "mr2004": 85.29},
        "elu_gate": {"trec-qa": 93.80, "mpqa": 89.60, "20news": 86.45, "mr2004": 88.10},
    },
}

# Word-order robustness reference (%): accuracy on rewritten questions.
REFERENCE_ORDER_PERTURBATION = {
    "pretrained": {"static": 87.0, "dynamic": 64.0},
    "random_init": {"static": 74.0, "dynamic": 65.0},
}

THREADS_ENV_VAR = "CAPSTEXT_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc


def min_doc_len(cfg: ModelConfig) -> int:
    """Shortest padded length the configured front-end can convolve."""
    if cfg.frontend in ("elu_gate", "conv_plain"):
        return cfg.filter_size
    return 6 if cfg.frontend == "multi_filter_maxpool" else 5


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class RunRecord:
    """One training run: per-epoch trajectory plus the final test score."""

    rows: list[EpochRow]
    test_acc: float
    best_epoch: int
    config: dict
    seed: int
    recon_mse: list[float] | None = None

    @property
    def best_val_acc(self) -> float:
        return max(row.val_acc for row in self.rows)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_acc,lr"]
        for row in self.rows:
            lines.append(f"{row.epoch},{row.train_loss:.6f},{row.val_acc:.6f},{row.lr:.8f}")
        lines.append(f"summary,best_epoch={self.best_epoch},test_acc={self.test_acc:.6f},"
                     f"seed={self.seed}")
        return "\n".join(lines) + "\n"


def write_run_csv(record: RunRecord, path) -> None:
    Path(path).write_text(record.to_csv(), encoding="utf-8")


def evaluate_accuracy(model: mdl.CapsTextModel, dataset: TextDataset,
                      batch_size: int | None = None) -> float:
    """Fraction of argmax-correct predictions over a split."""
    if dataset.num_classes > model.cfg.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model only "
            f"{model.cfg.num_classes}"
        )
    if dataset.max_len != model.max_len:
        raise ConfigError(
            f"dataset padded to {dataset.max_len}, model expects {model.max_len}"
        )
    size = batch_size or model.cfg.batch_size
    correct = 0
    for ids, labels in dataset_batches(dataset, size):
        correct += int((model.predict(ids) == labels).sum())
    return correct / len(dataset)


def run_training(cfg: ModelConfig, bundle: DataBundle,
                 embedding: EmbeddingMatrix | None = None,
                 log: Callable[[str], None] | None = None,
                 ) -> tuple[RunRecord, mdl.CapsTextModel]:
    """Train on the bundle's train split, selecting by validation accuracy.

    Random-vector initialization is used unless an embedding matrix is
    supplied.  Everything (weight init, batch order, dropout) derives from
    ``cfg.seed``, so a rerun reproduces the RunRecord bit for bit.
    """
    cfg = cfg.validate()
    if bundle.num_classes > cfg.num_classes:
        raise ConfigError(
            f"bundle has {bundle.num_classes} classes but config allows "
            f"{cfg.num_classes}"
        )
    if embedding is not None and embedding.dim != cfg.embed_dim:
        raise ConfigError(
            f"embedding dimension {embedding.dim} != configured {cfg.embed_dim}"
        )
    init_seed, dropout_seed, order_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    model = mdl.CapsTextModel(
        cfg, vocab_size=len(bundle.vocab), max_len=bundle.max_len,
        rng=np.random.default_rng(init_seed),
        embedding=None if embedding is None else embedding.vectors,
    )
    params = model.named_tensors()
    state = AdamState.for_params(params)
    dropout_rng = np.random.default_rng(dropout_seed)
    order_rng = np.random.default_rng(order_seed)

    rows: list[EpochRow] = []
    recon_track: list[float] | None = [] if cfg.with_decoder else None
    best_acc, best_epoch = -1.0, 0
    best_tensors = {k: v.copy() for k, v in params.items()}
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr, epoch)
        order = order_rng.permutation(len(bundle.train))
        losses: list[float] = []
        recon_losses: list[float] = []
        for step, (ids, labels) in enumerate(
            dataset_batches(bundle.train, cfg.batch_size, order=order)
        ):
            tape = ad.Tape()
            bound = model.bind(tape)
            result = model.forward(ids, bound, train=True, dropout_rng=dropout_rng,
                                   mask_labels=labels)
            loss = model.loss(result, labels, bound)
            loss_value = float(ad._value(loss))
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}"
                )
            grads = tape.backward(loss)
            try:
                adam_step(params, grads, state, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
            losses.append(loss_value)
            if result.reconstruction is not None:
                target = np.asarray(ad._value(result.doc))
                decoded = np.asarray(ad._value(result.reconstruction))
                recon_losses.append(float(np.mean((target - decoded) ** 2)))
        val_acc = evaluate_accuracy(model, bundle.val)
        rows.append(EpochRow(epoch=epoch, train_loss=float(np.mean(losses)),
                             val_acc=val_acc, lr=lr))
        if recon_track is not None:
            recon_track.append(float(np.mean(recon_losses)))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_tensors = {k: v.copy() for k, v in params.items()}
        if log is not None:
            log(f"epoch {epoch}: loss {rows[-1].train_loss:.4f} "
                f"val_acc {val_acc:.4f} lr {lr:.6f}")
    model.load_tensors(best_tensors)
    record = RunRecord(rows=rows, test_acc=evaluate_accuracy(model, bundle.test),
                       best_epoch=best_epoch, config=cfg.to_dict(), seed=cfg.seed,
                       recon_mse=recon_track)
    return record, model


def train_accuracy(model: mdl.CapsTextModel, bundle: DataBundle) -> float:
    return evaluate_accuracy(model, bundle.train)


# ---------------------------------------------------------------------------
# Front-end ablation grid
# ---------------------------------------------------------------------------


@dataclass
class AblationCell:
    frontend: str
    routing: str
    per_seed: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))


def run_ablation(cfg: ModelConfig, bundle: DataBundle,
                 frontends: Sequence[str],
                 routings: Sequence[str] = ("static", "dynamic"),
                 seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 embedding: EmbeddingMatrix | None = None,
                 log: Callable[[str], None] | None = None) -> list[AblationCell]:
    """Mean test accuracy per (front-end, routing) over the given seeds.

    Independent runs may execute on a small thread pool capped by the
    CAPSTEXT_THREADS environment variable; aggregation is order-free.
    """
    jobs = []
    for frontend in frontends:
        for routing in routings:
            for seed in seeds:
                jobs.append((frontend, routing, seed))

    def one(job):
        frontend, routing, seed = job
        run_cfg = dataclasses.replace(cfg, frontend=frontend, routing=routing, seed=seed)
        record, _ = run_training(run_cfg, bundle, embedding=embedding)
        if log is not None:
            log(f"{frontend}/{routing} seed {seed}: test_acc {record.test_acc:.4f}")
        return record.test_acc

    workers = min(worker_count(), len(jobs)) or 1
    if workers == 1:
        scores = [one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(one, jobs))

    cells = []
    index = 0
    for frontend in frontends:
        for routing in routings:
            per_seed = scores[index : index + len(seeds)]
            index += len(seeds)
            cells.append(AblationCell(frontend=frontend, routing=routing, per_seed=per_seed))
    return cells


def ablation_table(cells: list[AblationCell], dataset: str = "") -> str:
    lines = ["frontend\trouting\tmean_acc\tper_seed\treference_full_scale"]
    for cell in cells:
        ref = REFERENCE_ABLATION_ACCURACY.get(cell.routing, {}).get(cell.frontend, {})
        ref_txt = f"{ref[dataset]:.2f}" if dataset in ref else "-"
        seeds_txt = ",".join(f"{v:.4f}" for v in cell.per_seed)
        lines.append(f"{cell.frontend}\t{cell.routing}\t{cell.mean:.4f}\t{seeds_txt}\t{ref_txt}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Word-order perturbation harness
# ---------------------------------------------------------------------------


@dataclass
class PerturbedExample:
    original: str
    variant: str
    actual: int
    static_original_pred: int
    static_variant_pred: int
    dynamic_original_pred: int
    dynamic_variant_pred: int


@dataclass
class PerturbationReport:
    examples: list[PerturbedExample]

    def _mean(self, getter) -> float:
        return float(np.mean([getter(ex) for ex in self.examples]))

    @property
    def static_accuracy(self) -> float:
        return self._mean(lambda ex: ex.static_variant_pred == ex.actual)

    @property
    def dynamic_accuracy(self) -> float:
        return self._mean(lambda ex: ex.dynamic_variant_pred == ex.actual)

    @property
    def static_original_accuracy(self) -> float:
        return self._mean(lambda ex: ex.static_original_pred == ex.actual)

    @property
    def dynamic_original_accuracy(self) -> float:
        return self._mean(lambda ex: ex.dynamic_original_pred == ex.actual)

    def disagreements(self) -> list[PerturbedExample]:
        return [ex for ex in self.examples
                if ex.static_variant_pred != ex.dynamic_variant_pred]

    def to_tsv(self) -> str:
        lines = ["original\tvariant\tactual\tstatic_pred\tdynamic_pred"]
        for ex in self.examples:
            lines.append(f"{ex.original}\t{ex.variant}\t{ex.actual}\t"
                         f"{ex.static_variant_pred}\t{ex.dynamic_variant_pred}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        ref = REFERENCE_ORDER_PERTURBATION
        out = [
            f"perturbed accuracy: static {self.static_accuracy:.4f} "
            f"dynamic {self.dynamic_accuracy:.4f}",
            f"original accuracy:  static {self.static_original_accuracy:.4f} "
            f"dynamic {self.dynamic_original_accuracy:.4f}",
            f"disagreements: {len(self.disagreements())} of {len(self.examples)}",
            "full-scale reference (rewritten questions): "
            f"pretrained static {ref['pretrained']['static']:.0f}% vs "
            f"dynamic {ref['pretrained']['dynamic']:.0f}%; "
            f"random-init static {ref['random_init']['static']:.0f}% vs "
            f"dynamic {ref['random_init']['dynamic']:.0f}%",
        ]
        return "\n".join(out) + "\n"


def _label_index(dataset: TextDataset) -> dict[tuple[int, ...], int]:
    return {tuple(ids): label for label, ids in zip(dataset.labels, dataset.token_ids)}


def run_order_perturbation(model_static: mdl.CapsTextModel,
                           model_dynamic: mdl.CapsTextModel,
                           rewrites: Sequence[tuple[str, str]],
                           bundle: DataBundle) -> PerturbationReport:
    """Classify each (original, variant) pair with both routing models.

    Labels come from the bundle's test split (falling back to train and
    validation); an original sentence absent everywhere is an error.
    """
    if model_static.max_len != model_dynamic.max_len:
        raise ConfigError("the two checkpoints disagree on sequence length")
    lookup: dict[tuple[int, ...], int] = {}
    for split in (bundle.train, bundle.val, bundle.test):
        for key, label in _label_index(split).items():
            lookup.setdefault(key, label)

    examples = []
    for original, variant in rewrites:
        orig_ids = bundle.vocab.encode(tokenize(original))
        key = tuple(orig_ids)
        if key not in lookup:
            raise LookupError(f"original sentence not found in any split: {original!r}")
        actual = lookup[key]
        var_ids = bundle.vocab.encode(tokenize(variant))
        orig_padded = np.array([pad_ids(orig_ids, model_static.max_len)])
        var_padded = np.array([pad_ids(var_ids, model_static.max_len)])
        examples.append(PerturbedExample(
            original=original, variant=variant, actual=actual,
            static_original_pred=int(model_static.predict(orig_padded)[0]),
            static_variant_pred=int(model_static.predict(var_padded)[0]),
            dynamic_original_pred=int(model_dynamic.predict(orig_padded)[0]),
            dynamic_variant_pred=int(model_dynamic.predict(var_padded)[0]),
        ))
    return PerturbationReport(examples=examples)


# ---------------------------------------------------------------------------
# Nearest-neighbor and reconstruction reports
# ---------------------------------------------------------------------------


def model_embedding_matrix(model: mdl.CapsTextModel) -> EmbeddingMatrix:
    """The model's trained embeddings wrapped for neighbor queries."""
    vectors = np.array(model.params.embedding)
    provenance = ["pad"] + ["random"] * (vectors.shape[0] - 1)
    return EmbeddingMatrix(vectors=vectors, provenance=provenance)


def nearest_report(embedding: EmbeddingMatrix, vocab: Vocabulary, word: str,
                   top_k: int = 5) -> str:
    """One neighbor per line, nearest first."""
    ranked = nearest_words(embedding, vocab, word, top_k=top_k)
    return "".join(f"{token}\n" for token in ranked)


@dataclass
class ReconstructionRow:
    dim: int | None   # None marks the unperturbed baseline
    noise: float
    sentence: str


def decode_rows_to_tokens(decoded: np.ndarray, embedding: np.ndarray,
                          vocab: Vocabulary) -> list[str]:
    """Map each decoded row to the vocabulary token with highest cosine."""
    table = embedding.astype(np.float64)
    norms = np.linalg.norm(table, axis=1)
    usable = norms > 0
    tokens = []
    for row in np.asarray(decoded, dtype=np.float64):
        rn = np.linalg.norm(row)
        if rn == 0:
            tokens.append(vocab.token(0))
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            sims = (table @ row) / (norms * rn)
        sims[~usable] = -np.inf
        tokens.append(vocab.token(int(sims.argmax())))
    return tokens


def run_reconstruction_noise(model: mdl.CapsTextModel, vocab: Vocabulary,
                             sentence: str, dims: Sequence[int],
                             noises: Sequence[float]) -> list[ReconstructionRow]:
    """Perturb the activated class capsule and decode each variant.

    Emits the unperturbed decoding first, then one row per (dimension,
    noise) pair.  Decoded sentences always have the model's padded length.
    """
    if model.params.decoder is None:
        raise ConfigError("model has no reconstruction decoder")
    ids = np.array([pad_ids(vocab.encode(tokenize(sentence)), model.max_len)])
    result = model.forward(ids)
    capsules = np.asarray(ad._value(result.capsules))[0]
    predicted = int(mdl.classify(capsules))
    embedding = np.asarray(model.params.embedding)

    def decode(v: np.ndarray) -> str:
        decoded = ad._value(mdl.reconstruct_forward(v, predicted, model.params.decoder))
        return " ".join(decode_rows_to_tokens(decoded, embedding, vocab))

    rows = [ReconstructionRow(dim=None, noise=0.0, sentence=decode(capsules))]
    for dim in dims:
        for noise in noises:
            perturbed = mdl.capsule_dim_perturb(capsules, predicted, dim, noise)
            rows.append(ReconstructionRow(dim=dim, noise=noise, sentence=decode(perturbed)))
    return rows


def reconstruction_table(rows: list[ReconstructionRow]) -> str:
    lines = ["dim\tnoise\tsentence"]
    for row in rows:
        dim = "-" if row.dim is None else str(row.dim)
        lines.append(f"{dim}\t{row.noise:+.2f}\t{row.sentence}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Gradient check suite
# ---------------------------------------------------------------------------


def _suite_config(routing: str, with_decoder: bool = False) -> ModelConfig:
    return ModelConfig(
        dataset="custom", num_classes=2, batch_size=2, l2_gate=0.001,
        filters=2, filter_size=2, lr=0.01, capsules=2, caps_dim=2,
        class_caps_dim=2, dropout=0.0, epochs=1, embed_dim=2, max_len=5,
        routing=routing, route_iters=3, with_decoder=with_decoder,
        decoder_hidden=(4, 5), precision="f64",
    ).validate()


def _scaled(rng: np.random.Generator, shapes: dict[str, np.ndarray],
            sigma: float = 0.8) -> dict[str, np.ndarray]:
    out = {k: rng.normal(0.0, sigma, size=v.shape) for k, v in shapes.items()}
    if "embedding" in out:
        out["embedding"][0] = 0.0
    return out


def _end_to_end_check(routing: str, seed: int) -> float:
    cfg = _suite_config(routing)
    ids = np.array([[1, 2, 3, 4, 5]])
    labels = np.array([1])
    shapes = mdl.CapsTextModel(cfg, vocab_size=7, max_len=5).named_tensors()
    params = _scaled(np.random.default_rng(seed), shapes)

    def f(nodes):
        skeleton = mdl.CapsTextModel(cfg, vocab_size=7, max_len=5)
        bound = skeleton._rebuild(lambda name, _: nodes[name])
        result = skeleton.forward(ids, bound)
        return mdl.margin_loss(result.capsules, labels)

    return ad.grad_check(f, params)


def gradient_check_suite(seeds: Sequence[int] = tuple(range(20)),
                         log: Callable[[str], None] | None = None) -> dict[str, float]:
    """Max relative gradient error per layer over seeded random instances.

    Instances are drawn at scales that keep capsule norms and gate
    activations in their responsive ranges; near-zero activations leave
    central differences nothing to measure.
    """
    results: dict[str, float] = {}

    def run(name: str, check: Callable[[int], float]) -> None:
        worst = max(check(seed) for seed in seeds)
        results[name] = worst
        if log is not None:
            log(f"{name}: max relative error {worst:.3e}")

    def gate_check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        doc = rng.normal(size=(10, 8))
        params = {
            "W": rng.normal(0, 0.5, size=(3, 8, 2)), "V": rng.normal(0, 0.5, size=(3, 8, 2)),
            "b": rng.normal(size=2), "c": rng.normal(size=2),
        }

        def f(p):
            out = mdl.elu_gate_forward(doc, mdl.GateConvParams(**p))
            return ad.sum(ad.square(out))

        return ad.grad_check(f, params)

    def primary_check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(4, 3))
        params = {"kernel": rng.normal(0, 0.8, size=(4, 1, 3, 6)),
                  "bias": rng.normal(0, 0.3, size=6)}

        def f(p):
            caps = mdl.primary_capsules_forward(
                feats, mdl.PrimaryCapsuleParams(kernel=p["kernel"], bias=p["bias"],
                                                count=2, dim=3)
            )
            return ad.sum(ad.square(caps))

        return ad.grad_check(f, params)

    def margin_check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        params = {"v": rng.normal(0, 0.5, size=(3, 4))}
        return ad.grad_check(lambda p: mdl.margin_loss(p["v"], 1), params)

    def decoder_check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        v = rng.normal(0, 0.5, size=(2, 3))
        target = rng.normal(size=(4, 2))
        params = {
            "W1": rng.normal(0, 0.5, size=(6, 4)), "b1": rng.normal(size=4),
            "W2": rng.normal(0, 0.5, size=(4, 5)), "b2": rng.normal(size=5),
            "W3": rng.normal(0, 0.5, size=(5, 8)), "b3": rng.normal(size=8),
        }

        def f(p):
            decoder = mdl.DecoderParams(out_rows=4, out_cols=2, **p)
            decoded = mdl.reconstruct_forward(v, 1, decoder)
            return mdl.reconstruction_mse(target, decoded)

        return ad.grad_check(f, params)

    run("elu_gate", gate_check)
    run("primary_capsules", primary_check)
    run("static_routing_end_to_end", lambda s: _end_to_end_check("static", s))
    run("dynamic_routing_end_to_end", lambda s: _end_to_end_check("dynamic", s))
    run("margin_loss", margin_check)
    run("decoder", decoder_check)
    return results
