"""Experiment harness: configured runs producing CSV tables.

Every experiment writes three deterministic files into the output directory
(results.csv, loss_history.csv, transcript_summary.csv) and one
non-deterministic file (timings.csv). Determinism means byte-identical
output for identical config and seed, so anything wall-clock flavored is
quarantined in timings.csv.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .baselines import train_linear_svm, train_logistic, train_sae_classifier
from .datasets import (
    CsvSchema,
    FederationSplit,
    fit_standardizer,
    load_csv,
    standardize,
    synth_two_view,
    vertical_split,
    weighted_f1,
)
from .nets import autoencoder_pretrain, init_network
from .plain import TrainingConfig, predict_plain, train_plain
from .protocol import predict_encrypted, train_encrypted
from .transport import (
    DIR_SOURCE_TO_TARGET,
    DIR_TARGET_TO_SOURCE,
    MsgType,
    loopback_pair,
    measure_cost,
    tcp_pair,
)
from .paillier import ciphertext_wire_size
from .trcv import make_folds, run_trcv, self_learning_safeguard

EXPERIMENT_KINDS = ("taylor-vs-exact", "ftl-vs-self", "overlap-sweep",
                    "trcv-vs-cv", "scaling-sweep")


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs, flat and file-loadable."""

    kind: str = "taylor-vs-exact"
    dataset: str = "synth"
    csv_label_column: str = "label"
    overlap_fraction: float = 0.5
    label_fraction: float = 0.2
    n: int = 120
    d_source_features: int = 6
    d_target_features: int = 5
    latent_dim: int = 4
    hidden: int = 8
    noise: float = 0.02
    noise_target: float = -1.0
    margin: float = 0.0
    n_overlap: int = 0
    n_labeled: int = 0
    n_eval: int = 0
    learning_rate: float = 1.0
    gamma: float = 0.05
    weight_decay: float = 0.005
    max_iterations: int = 100
    tolerance: float = 0.0
    alignment: str = "inner"
    loss_mode: str = "taylor"
    key_bits: int = 512
    frac_bits: int = 40
    seed: int = 0
    seeds: int = 3
    engine: str = "plain"
    transport: str = "loopback"
    port: int = 0
    trcv_k: int = 4
    pretrain_epochs: int = 0
    sweep: tuple = ()
    dim_sweep: tuple = ()
    out_dir: str = "results"

    def validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.dataset != "synth" and not os.path.exists(self.dataset):
            raise ValueError(f"dataset file {self.dataset!r} does not exist")
        if self.engine not in ("plain", "encrypted"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.transport not in ("loopback", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.hidden < 1:
            raise ValueError("shared representation needs at least one unit")

    def training(self, loss_mode: str | None = None) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate, gamma=self.gamma,
            weight_decay=self.weight_decay, max_iterations=self.max_iterations,
            tolerance=self.tolerance, alignment=self.alignment,
            loss_mode=loss_mode or self.loss_mode)

    def dims(self) -> tuple[list[int], list[int]]:
        """Layer dims per party; both end at the shared representation size."""
        return ([self.d_source_features, self.hidden],
                [self.d_target_features, self.hidden])


_COERCE = {str: str, int: int, float: float}


def parse_config_text(text: str) -> ExperimentConfig:
    """key=value lines, # comments; sweeps are comma-separated integers."""
    values: dict[str, object] = {}
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in by_name:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, tuple):
            values[key] = tuple(int(v) for v in value.split(",") if v.strip())
        elif isinstance(current, bool):
            values[key] = value.lower() in ("1", "true", "yes")
        else:
            values[key] = type(current)(value)
    return replace(defaults, **values)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


@dataclass
class RunResult:
    """What an experiment hands back besides its CSV files."""

    loss_history: list[float] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    iteration_seconds: list[float] = field(default_factory=list)
    bytes_by_direction: dict[str, int] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# data and channel helpers

def build_split(cfg: ExperimentConfig, seed: int, n: int | None = None,
                n_overlap: int | None = None,
                n_labeled: int | None = None) -> FederationSplit:
    if cfg.dataset != "synth":
        x, labels, _names = load_csv(cfg.dataset, CsvSchema(cfg.csv_label_column))
        mean, std = fit_standardizer(x)
        x = standardize(x, mean, std)
        columns_source = list(range(x.shape[1] // 2))
        return vertical_split(x, labels, columns_source, cfg.overlap_fraction,
                              cfg.label_fraction, rng=seed)
    return synth_two_view(
        n=n or cfg.n, d_source=cfg.d_source_features,
        d_target=cfg.d_target_features, noise=cfg.noise, seed=seed,
        latent_dim=cfg.latent_dim, margin=cfg.margin,
        noise_target=None if cfg.noise_target < 0 else cfg.noise_target,
        n_overlap=n_overlap or (cfg.n_overlap or None),
        n_labeled=n_labeled or (cfg.n_labeled or None),
        n_eval=cfg.n_eval or None)


def open_channels(cfg: ExperimentConfig):
    if cfg.transport == "tcp":
        return tcp_pair(cfg.port)
    return loopback_pair()


def _train_and_eval(cfg: ExperimentConfig, split: FederationSplit, seed: int,
                    loss_mode: str | None = None):
    """One engine run; returns (loss_history, eval F1, transcript or None)."""
    dims_a, dims_b = cfg.dims()
    net_a = init_network(dims_a, seed=seed)
    net_b = init_network(dims_b, seed=seed + 1)
    if cfg.pretrain_epochs:
        net_a = autoencoder_pretrain(net_a, split.x_source,
                                     epochs=cfg.pretrain_epochs, learning_rate=0.1)
        net_b = autoencoder_pretrain(net_b, split.x_target,
                                     epochs=cfg.pretrain_epochs, learning_rate=0.1)
    training = cfg.training(loss_mode)
    transcript = None
    if cfg.engine == "encrypted":
        run = train_encrypted(split, net_a, net_b, training, key_bits=cfg.key_bits,
                              frac_bits=cfg.frac_bits, seed=seed,
                              channels=open_channels(cfg))
        history, transcript = run.result.loss_history, run.transcript
        predicted = predict_encrypted(split, net_a, net_b, split.eval_ids,
                                      key_bits=cfg.key_bits, frac_bits=cfg.frac_bits,
                                      seed=seed, channels=open_channels(cfg)).labels
    else:
        history = train_plain(split, net_a, net_b, training).loss_history
        predicted = predict_plain(split, net_a, net_b, split.eval_ids)
    score = weighted_f1(predicted, split.labels_eval).weighted_f1
    return history, score, transcript


# ---------------------------------------------------------------------------
# experiment kinds

def _run_taylor_vs_exact(cfg: ExperimentConfig, result: RunResult, loss_rows: list):
    finals: dict[str, list[float]] = {"taylor": [], "exact": []}
    for s in range(cfg.seeds):
        seed = cfg.seed + s
        split = build_split(cfg, seed)
        for mode in ("taylor", "exact"):
            history, score, _ = _train_and_eval(cfg, split, seed, loss_mode=mode)
            finals[mode].append(score)
            result.rows.append({
                "seed": seed, "loss_mode": mode,
                "initial_loss": f"{history[0]:.6f}",
                "final_loss": f"{history[-1]:.6f}",
                "eval_f1": f"{score:.6f}"})
            for it, value in enumerate(history, start=1):
                loss_rows.append({"seed": seed, "variant": mode, "iteration": it,
                                  "loss": f"{value:.6f}"})
            if s == 0 and mode == cfg.loss_mode:
                result.loss_history = history
    for mode, scores in finals.items():
        result.metrics[f"f1_{mode}"] = sum(scores) / len(scores)
    result.metrics["f1_gap"] = abs(result.metrics["f1_taylor"]
                                   - result.metrics["f1_exact"])


def _run_ftl_vs_self(cfg: ExperimentConfig, result: RunResult, loss_rows: list):
    per_model: dict[str, list[float]] = {}
    for s in range(cfg.seeds):
        seed = cfg.seed + s
        split = build_split(cfg, seed)
        x_c = split.x_target[split.target_rows(split.labeled_ids)]
        y_c = split.labels_for(split.labeled_ids)
        x_eval = split.x_target[split.target_rows(split.eval_ids)]
        scores: dict[str, float] = {}
        for mode, name in (("taylor", "ftl_taylor"), ("exact", "ftl_exact")):
            history, score, _ = _train_and_eval(cfg, split, seed, loss_mode=mode)
            scores[name] = score
            if s == 0 and mode == cfg.loss_mode:
                result.loss_history = history
                for it, value in enumerate(history, start=1):
                    loss_rows.append({"seed": seed, "variant": name, "iteration": it,
                                      "loss": f"{value:.6f}"})
        lr_model = train_logistic(x_c, y_c, seed=seed)
        svm_model = train_linear_svm(x_c, y_c, seed=seed)
        sae_model = train_sae_classifier(x_c, y_c, cfg.dims()[1], seed=seed)
        scores["self_lr"] = weighted_f1(lr_model.predict(x_eval),
                                        split.labels_eval).weighted_f1
        scores["self_svm"] = weighted_f1(svm_model.predict(x_eval),
                                         split.labels_eval).weighted_f1
        scores["self_sae"] = weighted_f1(sae_model.predict(x_eval),
                                         split.labels_eval).weighted_f1
        for name, score in scores.items():
            per_model.setdefault(name, []).append(score)
            result.rows.append({"seed": seed, "model": name, "eval_f1": f"{score:.6f}"})
    for name, values in per_model.items():
        result.metrics[f"f1_{name}"] = sum(values) / len(values)


def _run_overlap_sweep(cfg: ExperimentConfig, result: RunResult, loss_rows: list):
    sweep = cfg.sweep or (25, 100, 250)
    for n_ab in sweep:
        scores = []
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            split = build_split(cfg, seed, n_overlap=int(n_ab))
            history, score, _ = _train_and_eval(cfg, split, seed)
            scores.append(score)
            result.rows.append({"n_overlap": n_ab, "seed": seed,
                                "eval_f1": f"{score:.6f}"})
            if not result.loss_history:
                result.loss_history = history
        result.metrics[f"f1_overlap_{n_ab}"] = sum(scores) / len(scores)


def _run_trcv_vs_cv(cfg: ExperimentConfig, result: RunResult, loss_rows: list):
    split = build_split(cfg, cfg.seed)
    dims_a, dims_b = cfg.dims()
    x_c = split.x_target[split.target_rows(split.labeled_ids)]
    y_c = split.labels_for(split.labeled_ids)
    best_trcv_score = 0.0
    for k in (cfg.sweep or (2, 3, 4, 5)):
        k = int(k)
        report = run_trcv(split, [cfg.training()], k, dims_a, dims_b,
                          engine=cfg.engine, key_bits=cfg.key_bits,
                          frac_bits=cfg.frac_bits, seed=cfg.seed,
                          pretrain_epochs=cfg.pretrain_epochs)
        best_trcv_score = max(best_trcv_score, report.mean)
        result.rows.append({"k": k, "method": "trcv", "score": f"{report.mean:.6f}"})
        result.metrics[f"trcv_k{k}"] = report.mean
        plan = make_folds(np.arange(len(y_c)), min(k, len(y_c)), cfg.seed)
        local = []
        for fold in plan.folds:
            rows = np.setdiff1d(np.arange(len(y_c)), fold)
            model = train_logistic(x_c[rows], y_c[rows], seed=cfg.seed)
            local.append(weighted_f1(model.predict(x_c[fold]),
                                     y_c[fold]).weighted_f1)
        local_mean = sum(local) / len(local)
        result.rows.append({"k": k, "method": "local-cv", "score": f"{local_mean:.6f}"})
        result.metrics[f"local_cv_k{k}"] = local_mean
    decision = self_learning_safeguard(x_c, y_c, best_trcv_score,
                                       k=min(3, len(y_c)), seed=cfg.seed)
    result.metrics["safeguard_transfer"] = float(decision.transfer)
    result.rows.append({"k": "safeguard", "method": "transfer" if decision.transfer
                        else "no-transfer", "score": f"{decision.baseline_score:.6f}"})


def _run_scaling_sweep(cfg: ExperimentConfig, result: RunResult, loss_rows: list,
                       timing_rows: list):
    """Encrypted runs across overlap sizes and representation widths."""
    ct_bytes = ciphertext_wire_size(cfg.key_bits)

    def one(axis: str, value: int, n_overlap: int, hidden: int):
        run_cfg = replace(cfg, hidden=hidden, engine="encrypted")
        split = build_split(run_cfg, cfg.seed, n_overlap=n_overlap)
        dims_a, dims_b = run_cfg.dims()
        net_a = init_network(dims_a, seed=cfg.seed)
        net_b = init_network(dims_b, seed=cfg.seed + 1)
        started = time.perf_counter()
        run = train_encrypted(split, net_a, net_b, run_cfg.training(),
                              key_bits=cfg.key_bits, frac_bits=cfg.frac_bits,
                              seed=cfg.seed, channels=open_channels(run_cfg))
        elapsed = time.perf_counter() - started
        iterations = len(run.result.loss_history)
        per_iter = elapsed / iterations
        measured = (measure_cost(run.transcript, DIR_SOURCE_TO_TARGET)
                    + measure_cost(run.transcript, DIR_TARGET_TO_SOURCE))
        # Both directions ship n_c quadratic-and-linear components per
        # iteration: n_c (d^2 + d) ciphertexts each way.
        d = hidden
        formula = iterations * 2 * len(split.labeled_ids) * (d * d + d) * ct_bytes
        result.rows.append({
            "axis": axis, "value": value, "iterations": iterations,
            "components_bytes": measured, "formula_bytes": formula})
        timing_rows.append({"axis": axis, "value": value,
                            "seconds_per_iteration": f"{per_iter:.4f}"})
        result.iteration_seconds.append(per_iter)
        result.metrics[f"{axis}_{value}_seconds"] = per_iter
        result.metrics[f"{axis}_{value}_bytes"] = float(measured)
        for direction in (DIR_SOURCE_TO_TARGET, DIR_TARGET_TO_SOURCE):
            result.bytes_by_direction[direction] = (
                result.bytes_by_direction.get(direction, 0)
                + run.transcript.payload_bytes(direction))

    for n_ab in (cfg.sweep or (4, 8, 16, 32)):
        one("overlap", int(n_ab), int(n_ab), cfg.hidden)
    for d in (cfg.dim_sweep or (2, 4, 8, 16)):
        one("dim", int(d), cfg.n_overlap or 8, int(d))


# ---------------------------------------------------------------------------
# output plumbing

def _write_csv(path: str, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(col, "")) for col in columns) + "\n")


def _transcript_rows(transcript) -> list[dict]:
    rows = []
    for direction in (DIR_SOURCE_TO_TARGET, DIR_TARGET_TO_SOURCE):
        digest = hashlib.sha256()
        for record in transcript.frames(direction=direction):
            digest.update(record.payload)
        for msg_type in MsgType:
            frames = transcript.frames(direction=direction, msg_type=msg_type)
            if frames:
                rows.append({"direction": direction, "msg_type": msg_type.name,
                             "frames": len(frames),
                             "payload_bytes": sum(len(f.payload) for f in frames)})
        rows.append({"direction": direction, "msg_type": "ALL",
                     "frames": len(transcript.frames(direction=direction)),
                     "payload_bytes": transcript.payload_bytes(direction),
                     "sha256": digest.hexdigest()})
    return rows


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Dispatch one experiment kind and write its CSV files."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = RunResult()
    loss_rows: list[dict] = []
    timing_rows: list[dict] = []
    transcript = None

    if cfg.kind == "taylor-vs-exact":
        _run_taylor_vs_exact(cfg, result, loss_rows)
    elif cfg.kind == "ftl-vs-self":
        _run_ftl_vs_self(cfg, result, loss_rows)
    elif cfg.kind == "overlap-sweep":
        _run_overlap_sweep(cfg, result, loss_rows)
    elif cfg.kind == "trcv-vs-cv":
        _run_trcv_vs_cv(cfg, result, loss_rows)
    else:
        _run_scaling_sweep(cfg, result, loss_rows, timing_rows)

    if cfg.engine == "encrypted" and cfg.kind != "scaling-sweep":
        # One reference encrypted run to publish a transcript summary.
        split = build_split(cfg, cfg.seed)
        dims_a, dims_b = cfg.dims()
        run = train_encrypted(split, init_network(dims_a, seed=cfg.seed),
                              init_network(dims_b, seed=cfg.seed + 1),
                              cfg.training(), key_bits=cfg.key_bits,
                              frac_bits=cfg.frac_bits, seed=cfg.seed,
                              channels=open_channels(cfg))
        transcript = run.transcript
        for direction in (DIR_SOURCE_TO_TARGET, DIR_TARGET_TO_SOURCE):
            result.bytes_by_direction[direction] = run.transcript.payload_bytes(direction)

    columns = sorted({key for row in result.rows for key in row})
    _write_csv(os.path.join(cfg.out_dir, "results.csv"), result.rows, columns)
    _write_csv(os.path.join(cfg.out_dir, "loss_history.csv"), loss_rows,
               ["seed", "variant", "iteration", "loss"])
    transcript_rows = _transcript_rows(transcript) if transcript is not None else []
    _write_csv(os.path.join(cfg.out_dir, "transcript_summary.csv"), transcript_rows,
               ["direction", "msg_type", "frames", "payload_bytes", "sha256"])
    _write_csv(os.path.join(cfg.out_dir, "timings.csv"), timing_rows,
               ["axis", "value", "seconds_per_iteration"])
    return result


def run_baselines(cfg: ExperimentConfig) -> dict[str, float]:
    """Self-learning baselines on the labeled pool, scored on held-out rows."""
    split = build_split(cfg, cfg.seed)
    x_c = split.x_target[split.target_rows(split.labeled_ids)]
    y_c = split.labels_for(split.labeled_ids)
    x_eval = split.x_target[split.target_rows(split.eval_ids)]
    models = {
        "lr": train_logistic(x_c, y_c, seed=cfg.seed),
        "svm": train_linear_svm(x_c, y_c, seed=cfg.seed),
        "sae": train_sae_classifier(x_c, y_c, cfg.dims()[1], seed=cfg.seed),
    }
    return {name: weighted_f1(model.predict(x_eval), split.labels_eval).weighted_f1
            for name, model in models.items()}
