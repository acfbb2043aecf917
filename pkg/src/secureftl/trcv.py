"""Transfer cross-validation: score the federated model on source-side labels.

The source party holds the only trustworthy labels, so model selection works
by K-fold validation on its rows: train on the complement of a fold, push
pseudo-labels to the target's unlabeled rows, retrain with the parties'
roles swapped (the pseudo-labeled target now acts as the label holder), and
let the retrained target-side prototype label the held-out source rows. A
config whose transferred knowledge is real survives the round trip; one that
overfits the overlap does not.

Held-out labels never enter any training phase: fold rows are dropped from
the phase-one complement and re-enter the mirrored world only as unlabeled
prediction queries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .baselines import train_logistic
from .datasets import FederationSplit, weighted_f1
from .nets import Network, autoencoder_pretrain, init_network
from .plain import TrainingConfig, predict_plain, train_plain
from .protocol import predict_encrypted, train_encrypted


@dataclass
class FoldPlan:
    """A seeded partition of the source party's rows into K shares."""

    k: int
    folds: list[np.ndarray]

    def validate(self, ids: np.ndarray):
        if self.k != len(self.folds):
            raise ValueError("fold count disagrees with K")
        if any(len(fold) == 0 for fold in self.folds):
            raise ValueError("empty fold")
        merged = np.concatenate(self.folds)
        if len(merged) != len(set(merged.tolist())):
            raise ValueError("folds are not disjoint")
        if set(merged.tolist()) != set(np.asarray(ids).tolist()):
            raise ValueError("folds do not cover the id set")
        sizes = [len(fold) for fold in self.folds]
        if max(sizes) - min(sizes) > 1:
            raise ValueError("fold sizes differ by more than one")


def make_folds(ids, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle once with the seed, then cut into K contiguous shares."""
    ids = np.asarray(ids, dtype=int)
    if k < 2:
        raise ValueError("need at least two folds")
    if k > len(ids):
        raise ValueError(f"cannot cut {len(ids)} rows into {k} non-empty folds")
    rng = np.random.default_rng(seed)
    plan = FoldPlan(k, list(np.array_split(rng.permutation(ids), k)))
    plan.validate(ids)
    return plan


@dataclass
class CandidateResult:
    config_id: int
    per_fold: list[float]

    @property
    def mean(self) -> float:
        return sum(self.per_fold) / len(self.per_fold)


@dataclass
class FoldReport:
    candidates: list[CandidateResult]
    selected: int

    @property
    def per_fold(self) -> list[float]:
        return self.candidates[self.selected].per_fold

    @property
    def mean(self) -> float:
        return self.candidates[self.selected].mean


def restrict_source(split: FederationSplit, drop_ids) -> FederationSplit:
    """The training complement: source rows and pairs outside the fold."""
    drop = np.asarray(drop_ids, dtype=int)
    keep = ~np.isin(split.ids_source, drop)
    return FederationSplit(
        ids_source=split.ids_source[keep],
        x_source=split.x_source[keep],
        labels_source=split.labels_source[keep],
        ids_target=split.ids_target,
        x_target=split.x_target,
        overlap_ids=split.overlap_ids[~np.isin(split.overlap_ids, drop)],
        labeled_ids=split.labeled_ids[~np.isin(split.labeled_ids, drop)],
        eval_ids=split.eval_ids,
        labels_eval=split.labels_eval,
    )


def mirror_split(split: FederationSplit, labels_target: np.ndarray,
                 heldout_ids) -> FederationSplit:
    """Swap the parties: the target, now fully (pseudo-)labeled, becomes the
    label-rich side; the source becomes the featureless-label side whose
    held-out rows want predictions."""
    heldout = np.asarray(heldout_ids, dtype=int)
    return FederationSplit(
        ids_source=split.ids_target,
        x_source=split.x_target,
        labels_source=labels_target,
        ids_target=split.ids_source,
        x_target=split.x_source,
        overlap_ids=split.overlap_ids[~np.isin(split.overlap_ids, heldout)],
        labeled_ids=split.labeled_ids[~np.isin(split.labeled_ids, heldout)],
        eval_ids=heldout,
        labels_eval=split.labels_for(heldout),
    )


def cross_predict(mirrored: FederationSplit, net_source: Network, net_target: Network,
                  query_ids, engine: str = "plain", key_bits: int = 512,
                  frac_bits: int = 40, seed: int = 0) -> np.ndarray:
    """Label held-out rows of the original source via the swapped roles.

    Identical machinery to forward prediction; only the split is mirrored.
    """
    if engine == "plain":
        return predict_plain(mirrored, net_source, net_target, query_ids)
    return predict_encrypted(mirrored, net_source, net_target, query_ids,
                             key_bits=key_bits, frac_bits=frac_bits, seed=seed).labels


def _train(split, net_source, net_target, cfg, engine, key_bits, frac_bits, seed):
    if engine == "plain":
        return train_plain(split, net_source, net_target, cfg)
    return train_encrypted(split, net_source, net_target, cfg, key_bits=key_bits,
                           frac_bits=frac_bits, seed=seed).result


def _predict(split, net_source, net_target, query_ids, engine, key_bits, frac_bits, seed):
    if engine == "plain":
        return predict_plain(split, net_source, net_target, query_ids)
    return predict_encrypted(split, net_source, net_target, query_ids,
                             key_bits=key_bits, frac_bits=frac_bits, seed=seed).labels


def _fresh_net(dims: list[int], seed: int, x: np.ndarray, pretrain_epochs: int) -> Network:
    net = init_network(dims, seed=seed)
    if pretrain_epochs:
        net = autoencoder_pretrain(net, x, epochs=pretrain_epochs, learning_rate=0.1)
    return net


def run_fold(split: FederationSplit, fold_ids: np.ndarray, cfg: TrainingConfig,
             dims_source: list[int], dims_target: list[int], engine: str = "plain",
             key_bits: int = 512, frac_bits: int = 40, seed: int = 0,
             pretrain_epochs: int = 0) -> float:
    """One fold: train on the complement, pseudo-label, retrain mirrored,
    score the held-out source rows. Returns the weighted F1."""
    if len(fold_ids) == 0:
        raise ValueError("empty fold")
    sub = restrict_source(split, fold_ids)
    net_a = _fresh_net(dims_source, seed, sub.x_source, pretrain_epochs)
    net_b = _fresh_net(dims_target, seed + 1, sub.x_target, pretrain_epochs)
    _train(sub, net_a, net_b, cfg, engine, key_bits, frac_bits, seed)

    # Pseudo-label every target row whose true label is not safely usable:
    # the never-labeled rows plus any labeled pair the fold holds out.
    labeled_keep = sub.labeled_ids
    needs_pseudo = ~np.isin(split.ids_target, labeled_keep)
    pseudo = _predict(sub, net_a, net_b, split.ids_target[needs_pseudo],
                      engine, key_bits, frac_bits, seed)
    labels_target = np.empty(len(split.ids_target), dtype=int)
    labels_target[~needs_pseudo] = split.labels_for(split.ids_target[~needs_pseudo])
    labels_target[needs_pseudo] = pseudo

    mirrored = mirror_split(split, labels_target, fold_ids)
    net_b2 = _fresh_net(dims_target, seed + 2, mirrored.x_source, pretrain_epochs)
    net_a2 = _fresh_net(dims_source, seed + 3, mirrored.x_target, pretrain_epochs)
    _train(mirrored, net_b2, net_a2, cfg, engine, key_bits, frac_bits, seed + 1)
    predicted = cross_predict(mirrored, net_b2, net_a2, fold_ids, engine,
                              key_bits, frac_bits, seed + 1)
    return weighted_f1(predicted, split.labels_for(fold_ids)).weighted_f1


def run_trcv(split: FederationSplit, candidates: list[TrainingConfig], k: int,
             dims_source: list[int], dims_target: list[int], engine: str = "plain",
             key_bits: int = 512, frac_bits: int = 40, seed: int = 0,
             pretrain_epochs: int = 0) -> FoldReport:
    """Score every candidate config by K-fold transfer validation and select
    the best mean; ties break toward the first candidate."""
    if not candidates:
        raise ValueError("no candidate configs")
    plan = make_folds(split.ids_source, k, seed)
    results = []
    for ci, cfg in enumerate(candidates):
        scores = [run_fold(split, fold, cfg, dims_source, dims_target, engine,
                           key_bits, frac_bits, seed + 100 * ci + fi, pretrain_epochs)
                  for fi, fold in enumerate(plan.folds)]
        results.append(CandidateResult(ci, scores))
    means = [r.mean for r in results]
    return FoldReport(results, int(np.argmax(means)))


@dataclass
class SafeguardDecision:
    """Whether transferred knowledge beats learning from the labeled pool alone."""

    transfer: bool
    ftl_score: float
    baseline_score: float


def self_learning_safeguard(x_labeled: np.ndarray, labels: np.ndarray,
                            ftl_score: float, k: int = 3,
                            seed: int = 0) -> SafeguardDecision:
    """Compare the transfer model's validation score against logistic
    regression cross-validated on the labeled pool alone.

    Returns transfer=False when the transfer score is strictly worse; ties
    favor transfer. A single-class pool trains a majority-class predictor.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("labeled pool is empty")
    if len(labels) < 2:
        model = train_logistic(x_labeled, labels, seed=seed)
        baseline = weighted_f1(model.predict(x_labeled), labels).weighted_f1
    else:
        plan = make_folds(np.arange(len(labels)), min(k, len(labels)), seed)
        scores = []
        for fold in plan.folds:
            train_rows = np.setdiff1d(np.arange(len(labels)), fold)
            model = train_logistic(x_labeled[train_rows], labels[train_rows], seed=seed)
            scores.append(weighted_f1(model.predict(x_labeled[fold]), labels[fold]).weighted_f1)
        baseline = sum(scores) / len(scores)
    return SafeguardDecision(ftl_score >= baseline, ftl_score, baseline)


def fold_report_csv(report: FoldReport, path: str):
    """fold_index, score rows per config, a mean summary row per config,
    and a final selected row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "fold_index", "score"])
        for cand in report.candidates:
            for fi, score in enumerate(cand.per_fold):
                writer.writerow([cand.config_id, fi, f"{score:.6f}"])
            writer.writerow([cand.config_id, "mean", f"{cand.mean:.6f}"])
        writer.writerow([report.selected, "selected", f"{report.mean:.6f}"])
