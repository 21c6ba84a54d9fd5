"""Joint training, nested cross-validation, ensembling, and the evaluation
protocols built on top (graph-shuffle ablation, context-awareness scoring).

Training is full-batch per epoch: the survival term sees every training
slide at once so the partial likelihood is exact, and the reconstruction
term averages over slides. One optimizer step is taken per epoch.

The evaluation protocol is 5-fold nested cross-validation. For each outer
fold, every (learning rate, epochs) combination trains 5 inner splits x 3
repeats = 15 models; the combination with the best mean inner-validation
concordance wins and its 15 models form the outer fold's ensemble, whose
risk is the plain mean of member risks. Repeats reseed initialization
only; fold membership is fixed by the plan. Everything derives from the
master seed through counter-keyed seed sequences, so a rerun reproduces
the report byte for byte regardless of worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .deltacon import DeltaConConfig, deltacon
from .errors import DataError, SurvivalDataError
from .gae import preprocess_adjacency
from .graphs import SpatialGraph, TileSet, embedding_adjacency, shuffle_offdiagonal, spatial_adjacency
from .losses import SurvivalLabel, car_loss, concordance_index, cox_loss, total_loss
from .model import CarmilModel, ModelConfig
from .optim import Adam

LR_GRID = (0.001, 0.003, 0.01)
EPOCH_GRID = (20, 30)


@dataclass
class TrainConfig:
    beta: float = 0.5
    learning_rate: float = 0.001
    epochs: int = 20
    k: int = 8
    head: str = "meanpool"
    encoder_layers: int = 1
    decoder_layers: int = 1
    embed_dim: int | None = None
    use_encoder: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0 or self.epochs < 1 or self.k < 1:
            raise ValueError("learning rate, epochs, and k must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=feature_dim,
            embed_dim=self.embed_dim,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            head=self.head,
            use_encoder=self.use_encoder,
        )


@dataclass
class Bag:
    """One slide prepared for training: graph and propagation matrix cached."""

    tiles: TileSet
    label: SurvivalLabel
    graph: SpatialGraph
    a_pre: np.ndarray


def make_bags(dataset: Sequence[tuple[TileSet, SurvivalLabel]], k: int) -> list[Bag]:
    bags = []
    for tiles, label in dataset:
        graph = spatial_adjacency(tiles, k)
        bags.append(Bag(tiles=tiles, label=label, graph=graph, a_pre=preprocess_adjacency(graph)))
    return bags


def derive_seed(master: int, *key: int) -> int:
    """Counter-keyed child seed; stable regardless of call order."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# single-model training
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss_mil: float
    loss_car: float | None
    loss_total: float


@dataclass
class TrainResult:
    model: CarmilModel
    curves: list[EpochStats]


def train_one(model: CarmilModel, bags: Sequence[Bag], cfg: TrainConfig) -> TrainResult:
    """Minimize the blended loss over all slides, one Adam step per epoch."""
    labels = [b.label for b in bags]
    if not any(lab.event for lab in labels):
        raise SurvivalDataError("training set is entirely censored")
    if cfg.beta > 0.0 and model.decoder is None:
        raise ValueError("beta > 0 requires an encoder/decoder pipeline")

    adam = Adam(model.store, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    x_nodes = [ad.constant(b.tiles.features) for b in bags]
    curves: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        risks = []
        recon_terms = []
        for bag, x in zip(bags, x_nodes):
            z = model.embed(x, bag.a_pre)
            risks.append(model.risk(z))
            if model.decoder is not None:
                recon_terms.append(car_loss(model.reconstruct(z, bag.a_pre), bag.graph.adjacency))
        mil = cox_loss(ad.stack_scalars(risks), labels)
        recon = None
        if recon_terms:
            recon = ad.scale(ad.sum_all(ad.stack_scalars(recon_terms)), 1.0 / len(recon_terms))
        loss = total_loss(mil, recon, cfg.beta)

        model.store.zero_grad()
        ad.backward(loss, model.store)
        adam.step()
        curves.append(
            EpochStats(
                epoch=epoch,
                loss_mil=float(mil.value[0, 0]),
                loss_car=float(recon.value[0, 0]) if recon is not None else None,
                loss_total=float(loss.value[0, 0]),
            )
        )
    return TrainResult(model=model, curves=curves)


# ---------------------------------------------------------------------------
# cross-validation plan
# ---------------------------------------------------------------------------

@dataclass
class CvPlan:
    seed: int
    n_outer: int
    n_inner: int
    repeats: int
    outer: dict[str, int]
    inner: dict[int, dict[str, int]]


def make_cv_plan(
    slide_ids: Sequence[str], seed: int, n_outer: int = 5, n_inner: int = 5, repeats: int = 3
) -> CvPlan:
    """Partition slides into outer folds and per-outer-fold inner folds.

    Every slide lands in exactly one outer test fold; the inner folds of
    an outer fold partition everything outside it. Assignments depend
    only on (ids, seed).
    """
    ids = list(slide_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate slide ids in cross-validation plan")
    if len(ids) < n_outer * n_inner:
        raise DataError(f"{len(ids)} slides cannot support {n_outer}x{n_inner} nested folds")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    order = rng.permutation(len(ids))
    outer = {ids[o]: i % n_outer for i, o in enumerate(order)}

    inner: dict[int, dict[str, int]] = {}
    for f in range(n_outer):
        rest = [sid for sid in ids if outer[sid] != f]
        rng_f = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(1, f))))
        order_f = rng_f.permutation(len(rest))
        inner[f] = {rest[o]: i % n_inner for i, o in enumerate(order_f)}
    return CvPlan(seed=seed, n_outer=n_outer, n_inner=n_inner, repeats=repeats, outer=outer, inner=inner)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

@dataclass
class EnsembleMember:
    model: CarmilModel
    inner_fold: int
    repeat: int
    val_cindex: float


@dataclass
class EnsembleModel:
    """Inner-split x repeat models for one outer fold; risk is their mean."""

    members: list[EnsembleMember]

    def risks(self, bags: Sequence[Bag]) -> np.ndarray:
        out = np.empty(len(bags))
        for i, bag in enumerate(bags):
            out[i] = float(np.mean([m.model.risk_value(bag.tiles, bag.graph) for m in self.members]))
        return out

    @property
    def mean_val_cindex(self) -> float:
        return float(np.mean([m.val_cindex for m in self.members]))

    @property
    def best_member(self) -> EnsembleMember:
        scores = [m.val_cindex for m in self.members]
        return self.members[int(np.argmax(scores))]


def train_ensemble(
    bags: Sequence[Bag],
    inner_assignment: dict[str, int],
    cfg: TrainConfig,
    n_inner: int = 5,
    repeats: int = 3,
    seed_key: tuple[int, ...] = (),
) -> EnsembleModel:
    """Train the n_inner x repeats members over the given inner split."""
    feature_dim = bags[0].tiles.features.shape[1]
    members = []
    for fold in range(n_inner):
        train_bags = [b for b in bags if inner_assignment[b.tiles.slide_id] != fold]
        val_bags = [b for b in bags if inner_assignment[b.tiles.slide_id] == fold]
        if not train_bags or not val_bags:
            raise DataError(f"inner fold {fold} is degenerate")
        for rep in range(repeats):
            seed = derive_seed(cfg.seed, *seed_key, fold, rep)
            model = CarmilModel(cfg.model_config(feature_dim), seed)
            train_one(model, train_bags, cfg)
            val_risks = [model.risk_value(b.tiles, b.graph) for b in val_bags]
            val_c = concordance_index(val_risks, [b.label for b in val_bags])
            members.append(EnsembleMember(model=model, inner_fold=fold, repeat=rep, val_cindex=val_c))
    return EnsembleModel(members=members)


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

def ablate_shuffle(
    ensemble: EnsembleModel, bags: Sequence[Bag], seed: int
) -> tuple[float, float]:
    """Concordance with the real graphs vs. shuffled-adjacency graphs.

    Shuffling permutes each slide's off-diagonal adjacency entries at
    inference time only; the models are untouched. Per-slide shuffle
    seeds derive from the given seed.
    """
    labels = [b.label for b in bags]
    c_orig = concordance_index(ensemble.risks(bags), labels)
    shuffled = []
    for i, b in enumerate(bags):
        g = shuffle_offdiagonal(b.graph, derive_seed(seed, i))
        shuffled.append(Bag(tiles=b.tiles, label=b.label, graph=g, a_pre=preprocess_adjacency(g)))
    c_shuf = concordance_index(ensemble.risks(shuffled), labels)
    return c_orig, c_shuf


@dataclass
class ContextAwarenessRow:
    slide_id: str
    deltacon_features: float
    deltacon_embedding: float


@dataclass
class ContextAwarenessResult:
    rows: list[ContextAwarenessRow]
    k: int

    def summary(self) -> dict:
        dx = np.array([r.deltacon_features for r in self.rows])
        dz = np.array([r.deltacon_embedding for r in self.rows])
        return {
            "deltacon_features_mean": float(dx.mean()),
            "deltacon_features_std": float(dx.std()),
            "deltacon_embedding_mean": float(dz.mean()),
            "deltacon_embedding_std": float(dz.std()),
            "fraction_embedding_above_features": float(np.mean(dz > dx)),
        }


def evaluate_context_awareness(
    model_or_ensemble: CarmilModel | EnsembleModel, bags: Sequence[Bag], k: int = 8
) -> ContextAwarenessResult:
    """Per-slide similarity of the spatial graph to feature- and
    embedding-space graphs.

    For an ensemble the best inner-validation member supplies the
    embeddings. Higher embedding-side scores than feature-side scores
    mean the encoder retained spatial context the raw features lack.
    """
    model = (
        model_or_ensemble.best_member.model
        if isinstance(model_or_ensemble, EnsembleModel)
        else model_or_ensemble
    )
    cfg = DeltaConConfig(k=k)
    rows = []
    for bag in bags:
        a_x = embedding_adjacency(bag.tiles.features, k)
        z = model.embed_value(bag.tiles, bag.graph)
        a_z = embedding_adjacency(z, k)
        rows.append(
            ContextAwarenessRow(
                slide_id=bag.tiles.slide_id,
                deltacon_features=deltacon(bag.graph, a_x, cfg).score,
                deltacon_embedding=deltacon(bag.graph, a_z, cfg).score,
            )
        )
    return ContextAwarenessResult(rows=rows, k=k)


# ---------------------------------------------------------------------------
# nested cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    test_slides: list[str]
    chosen_learning_rate: float
    chosen_epochs: int
    inner_scores: dict[str, float]
    cindex: float
    n_members: int


@dataclass
class ShuffleRow:
    fold: int
    seed: int
    cindex_original: float
    cindex_shuffled: float


@dataclass
class ExperimentReport:
    config: dict
    folds: list[FoldReport]
    cindex_mean: float
    cindex_std: float
    context: dict | None = None
    shuffle: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "config": self.config,
            "folds": [
                {
                    "fold": f.fold,
                    "test_slides": f.test_slides,
                    "chosen_learning_rate": f.chosen_learning_rate,
                    "chosen_epochs": f.chosen_epochs,
                    "inner_scores": f.inner_scores,
                    "cindex": f.cindex,
                    "n_members": f.n_members,
                }
                for f in self.folds
            ],
            "cindex_mean": self.cindex_mean,
            "cindex_std": self.cindex_std,
            "context": self.context,
            "shuffle": self.shuffle,
        }
        return out

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = ["fold  n_test  lr      epochs  cindex"]
        for f in self.folds:
            lines.append(
                f"{f.fold:>4}  {len(f.test_slides):>6}  {f.chosen_learning_rate:<6g}  "
                f"{f.chosen_epochs:>6}  {f.cindex:.4f}"
            )
        lines.append(f"mean (std) C-index: {self.cindex_mean:.4f} ({self.cindex_std:.4f})")
        if self.context:
            lines.append(
                "context-awareness: features {deltacon_features_mean:.4f} ({deltacon_features_std:.4f})"
                "  embeddings {deltacon_embedding_mean:.4f} ({deltacon_embedding_std:.4f})"
                "  frac(emb>feat) {fraction_embedding_above_features:.2f}".format(**self.context["summary"])
            )
        if self.shuffle:
            lines.append(
                "shuffle ablation: original {cindex_original_mean:.4f}  shuffled {cindex_shuffled_mean:.4f}"
                "  delta {delta_mean:+.4f}".format(**self.shuffle["summary"])
            )
        return "\n".join(lines) + "\n"


@dataclass
class NestedCvOutcome:
    report: ExperimentReport
    ensembles: list[EnsembleModel] = field(default_factory=list)


def _grid(learning_rates, epoch_grid) -> list[tuple[float, int]]:
    return [(lr, ep) for lr in learning_rates for ep in epoch_grid]


def run_nested_cv(
    dataset: Sequence[tuple[TileSet, SurvivalLabel]],
    plan: CvPlan,
    base_cfg: TrainConfig,
    learning_rates: Sequence[float] = LR_GRID,
    epoch_grid: Sequence[int] = EPOCH_GRID,
    shuffle_seeds: Sequence[int] = (),
    context_awareness: bool = False,
    n_jobs: int = 1,
) -> NestedCvOutcome:
    """Full nested-CV protocol; returns the report plus per-fold ensembles.

    The inner loop scores every (learning rate, epochs) combination by
    mean inner-validation concordance and keeps the winner's 15 models as
    the outer fold's ensemble. Optional extras reuse those ensembles:
    shuffle ablation over the given seeds and context-awareness scoring
    on each test fold.
    """
    if len(dataset) < 25:
        raise DataError(f"nested CV needs at least 25 slides, got {len(dataset)}")
    bags = make_bags(dataset, base_cfg.k)
    by_id = {b.tiles.slide_id: b for b in bags}
    if set(by_id) != set(plan.outer):
        raise DataError("plan does not cover exactly the dataset's slide ids")
    combos = _grid(learning_rates, epoch_grid)

    def run_fold(fold: int) -> tuple[FoldReport, EnsembleModel, list[ShuffleRow], ContextAwarenessResult | None]:
        test_bags = [b for b in bags if plan.outer[b.tiles.slide_id] == fold]
        pool = [b for b in bags if plan.outer[b.tiles.slide_id] != fold]
        candidates: list[EnsembleModel] = []
        inner_scores: dict[str, float] = {}
        for ci, (lr, ep) in enumerate(combos):
            cfg_i = replace(base_cfg, learning_rate=lr, epochs=ep)
            ens = train_ensemble(
                pool, plan.inner[fold], cfg_i,
                n_inner=plan.n_inner, repeats=plan.repeats, seed_key=(fold,),
            )
            candidates.append(ens)
            inner_scores[f"lr={lr:g},epochs={ep}"] = ens.mean_val_cindex
        best_ci = int(np.argmax([e.mean_val_cindex for e in candidates]))
        ensemble = candidates[best_ci]
        cindex = concordance_index(ensemble.risks(test_bags), [b.label for b in test_bags])
        freport = FoldReport(
            fold=fold,
            test_slides=[b.tiles.slide_id for b in test_bags],
            chosen_learning_rate=combos[best_ci][0],
            chosen_epochs=combos[best_ci][1],
            inner_scores=inner_scores,
            cindex=cindex,
            n_members=len(ensemble.members),
        )
        shuffle_rows = []
        for s in shuffle_seeds:
            c_orig, c_shuf = ablate_shuffle(ensemble, test_bags, int(s))
            shuffle_rows.append(ShuffleRow(fold=fold, seed=int(s), cindex_original=c_orig, cindex_shuffled=c_shuf))
        ctx = evaluate_context_awareness(ensemble, test_bags, k=base_cfg.k) if context_awareness else None
        return freport, ensemble, shuffle_rows, ctx

    folds = list(range(plan.n_outer))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool_exec:
            results = list(pool_exec.map(run_fold, folds))
    else:
        results = [run_fold(f) for f in folds]

    fold_reports = [r[0] for r in results]
    ensembles = [r[1] for r in results]
    scores = np.array([f.cindex for f in fold_reports])

    context = None
    if context_awareness:
        all_rows = [row for r in results if r[3] is not None for row in r[3].rows]
        merged = ContextAwarenessResult(rows=all_rows, k=base_cfg.k)
        context = {
            "summary": merged.summary(),
            "per_slide": [
                {
                    "slide_id": row.slide_id,
                    "deltacon_features": row.deltacon_features,
                    "deltacon_embedding": row.deltacon_embedding,
                }
                for row in all_rows
            ],
        }

    shuffle = None
    rows = [sr for r in results for sr in r[2]]
    if rows:
        orig = np.array([sr.cindex_original for sr in rows])
        shuf = np.array([sr.cindex_shuffled for sr in rows])
        shuffle = {
            "summary": {
                "cindex_original_mean": float(orig.mean()),
                "cindex_shuffled_mean": float(shuf.mean()),
                "delta_mean": float((orig - shuf).mean()),
            },
            "rows": [
                {
                    "fold": sr.fold,
                    "seed": sr.seed,
                    "cindex_original": sr.cindex_original,
                    "cindex_shuffled": sr.cindex_shuffled,
                }
                for sr in rows
            ],
        }

    config_echo = {
        "beta": base_cfg.beta,
        "k": base_cfg.k,
        "head": base_cfg.head,
        "encoder_layers": base_cfg.encoder_layers,
        "decoder_layers": base_cfg.decoder_layers,
        "embed_dim": base_cfg.embed_dim,
        "use_encoder": base_cfg.use_encoder,
        "seed": base_cfg.seed,
        "learning_rate_grid": [float(lr) for lr in learning_rates],
        "epoch_grid": [int(e) for e in epoch_grid],
        "plan": {
            "seed": plan.seed,
            "n_outer": plan.n_outer,
            "n_inner": plan.n_inner,
            "repeats": plan.repeats,
        },
        "n_slides": len(dataset),
    }
    report = ExperimentReport(
        config=config_echo,
        folds=fold_reports,
        cindex_mean=float(scores.mean()),
        cindex_std=float(scores.std()),
        context=context,
        shuffle=shuffle,
    )
    return NestedCvOutcome(report=report, ensembles=ensembles)
