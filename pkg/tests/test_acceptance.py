"""Acceptance suite: one test per release criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. Each criterion pins its
tolerance here; several train real models, so the whole module takes a
few minutes.
"""

import time

import numpy as np
import pytest

import carmil.autodiff as ad
from carmil.autodiff import ParamStore, backward, constant, finite_difference_check
from carmil.data import SynthConfig, as_dataset, generate, permute_labels
from carmil.deltacon import DeltaConConfig, deltacon, resolve_epsilon
from carmil.graphs import (
    SpatialGraph,
    TileSet,
    embedding_adjacency,
    joint_normalize,
    mean_neighbor_distance,
    rewire_edges,
)
from carmil.losses import (
    SurvivalLabel,
    car_loss,
    concordance_index,
    cox_loss,
    edge_auc,
    total_loss,
)
from carmil.model import CarmilModel, ModelConfig
from carmil.training import (
    TrainConfig,
    ablate_shuffle,
    make_bags,
    make_cv_plan,
    run_nested_cv,
    train_ensemble,
    train_one,
)


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    print(f"\n[criterion {num:02d}] {'PASS' if ok else 'FAIL'}  {name}  {detail}")
    assert ok, f"criterion {num} failed: {name} {detail}"


def tiny_instance(seed: int, n_slides: int = 4, n: int = 12, d: int = 5):
    """Small random slides with positive features, away from ReLU kinks."""
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n_slides):
        cells = rng.choice(25, size=n, replace=False)
        coords = np.column_stack([cells % 5, cells // 5]).astype(float)
        tiles = TileSet(f"t{i}", coords, rng.uniform(0.5, 2.0, size=(n, d)))
        label = SurvivalLabel(time=float(rng.uniform(0.5, 4.0)), event=bool(i % 4 != 3))
        bags.append((tiles, label))
    return make_bags(bags, k=4)


def blended_loss(model: CarmilModel, bags, beta: float):
    risks, recon = [], []
    for b in bags:
        z = model.embed(constant(b.tiles.features), b.a_pre)
        risks.append(model.risk(z))
        if model.decoder is not None:
            recon.append(car_loss(model.reconstruct(z, b.a_pre), b.graph.adjacency))
    mil = cox_loss(ad.stack_scalars(risks), [b.label for b in bags])
    car = None
    if recon:
        car = ad.scale(ad.sum_all(ad.stack_scalars(recon)), 1.0 / len(recon))
    return total_loss(mil, car, beta)


# ---------------------------------------------------------------------------
# shared trained model for criteria 7 and 12
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_default_model():
    bags = make_bags(as_dataset(generate(SynthConfig(n_slides=200, seed=0))), k=8)
    cfg = TrainConfig(beta=0.5, learning_rate=0.003, epochs=30, seed=5)
    model = CarmilModel(cfg.model_config(32), 5)
    start = time.monotonic()
    train_one(model, bags, cfg)
    return model, bags, time.monotonic() - start


def test_criterion_01_full_gradient_check():
    start = time.monotonic()
    worst = 0.0
    for head in ("meanpool", "abmil", "chowder", "additive"):
        bags = tiny_instance(seed=31)
        cfg = ModelConfig(feature_dim=5, head=head, encoder_layers=1, decoder_layers=1)
        model = CarmilModel(cfg, seed=17)
        err = finite_difference_check(
            lambda: blended_loss(model, bags, beta=0.5), model.store, step=1e-6
        )
        worst = max(worst, err)
    elapsed = time.monotonic() - start
    report(
        1, "full blended-loss gradient vs finite differences",
        worst < 1e-4 and elapsed < 10.0,
        f"max rel err {worst:.2e} (<1e-4), {elapsed:.1f}s (<10s)",
    )


def test_criterion_02_deltacon_oracle_equivalence():
    def oracle_score(a1: np.ndarray, a2: np.ndarray, eps: float) -> float:
        def s_matrix(a):
            n = a.shape[0]
            deg = np.zeros(n)
            for p in range(n):
                for q in range(n):
                    if a[p, q] != 0.0:
                        deg[p] += 1.0
                        deg[q] += 1.0
            return np.linalg.inv(np.eye(n) + eps * eps * np.diag(deg) - eps * a)

        diff = s_matrix(a1) - s_matrix(a2)
        return 1.0 / (1.0 + np.sqrt((diff * diff).sum()))

    rng = np.random.default_rng(202)
    worst = 0.0
    identical_ok = True
    for trial in range(50):
        n = int(rng.integers(4, 21))
        if trial % 2 == 0:
            a1 = rng.uniform(0, 1, (n, n)) * (rng.random((n, n)) < 0.3)
            a2 = rng.uniform(0, 1, (n, n)) * (rng.random((n, n)) < 0.3)
            np.fill_diagonal(a1, 0.0)
            np.fill_diagonal(a2, 0.0)
            g1, g2 = SpatialGraph(a1, k=0), SpatialGraph(a2, k=0)
        else:
            k = int(rng.integers(1, min(6, n - 1) + 1))
            g1 = embedding_adjacency(rng.uniform(0, 10, (n, 2)), k)
            g2 = embedding_adjacency(rng.uniform(0, 10, (n, 2)), k)
        eps = resolve_epsilon(DeltaConConfig(), g1, g2)
        worst = max(worst, abs(deltacon(g1, g2).score - oracle_score(g1.adjacency, g2.adjacency, eps)))
        identical_ok &= deltacon(g1, g1).score == 1.0
    report(
        2, "DeltaCon matches independent dense-inversion oracle",
        worst < 1e-10 and identical_ok,
        f"max |diff| {worst:.2e} (<1e-10), identical graphs exactly 1.0: {identical_ok}",
    )


def test_criterion_03_deltacon_monotonic_in_rewiring():
    rng = np.random.default_rng(33)
    base = embedding_adjacency(rng.uniform(0, 12, size=(32, 2)), k=4)
    means = []
    for frac in (0.0, 0.25, 0.5, 1.0):
        scores = [deltacon(base, rewire_edges(base, frac, seed=s)).score for s in range(100)]
        means.append(float(np.mean(scores)))
    ok = means[0] > means[1] > means[2] > means[3]
    report(
        3, "mean DeltaCon strictly decreases with rewired fraction", ok,
        "means " + " > ".join(f"{m:.4f}" for m in means),
    )


def test_criterion_04_reconstruction_loss_sanity():
    rng = np.random.default_rng(44)
    a_soft = rng.uniform(0, 1, size=(20, 20))
    half = car_loss(constant(np.full((20, 20), 0.5)), a_soft).value[0, 0]
    log2_err = abs(half - np.log(2.0))

    a_bin = (rng.uniform(size=(20, 20)) < 0.2).astype(float)
    np.fill_diagonal(a_bin, 0.0)
    a_bin[0, 1] = 1.0
    perfect = car_loss(constant(a_bin), a_bin).value[0, 0]
    report(
        4, "reconstruction loss sanity",
        log2_err < 1e-12 and perfect < 1e-3,
        f"|loss(0.5) - log 2| = {log2_err:.2e} (<1e-12), perfect binary loss {perfect:.2e} (<1e-3)",
    )


def test_criterion_05_beta_endpoint_gradients_bitwise():
    bags = tiny_instance(seed=55)
    cfg = ModelConfig(feature_dim=5, head="meanpool")
    model = CarmilModel(cfg, seed=3)

    def grads(builder):
        model.store.zero_grad()
        backward(builder(), model.store)
        return {n: p.grad.copy() for n, p in model.store.items()}

    def mil_only():
        risks = [model.risk(model.embed(constant(b.tiles.features), b.a_pre)) for b in bags]
        return cox_loss(ad.stack_scalars(risks), [b.label for b in bags])

    def car_only():
        recon = [
            car_loss(
                model.reconstruct(model.embed(constant(b.tiles.features), b.a_pre), b.a_pre),
                b.graph.adjacency,
            )
            for b in bags
        ]
        return ad.scale(ad.sum_all(ad.stack_scalars(recon)), 1.0 / len(recon))

    bitwise = lambda a, b: all(a[n].tobytes() == b[n].tobytes() for n in a)
    ok0 = bitwise(grads(mil_only), grads(lambda: blended_loss(model, bags, 0.0)))
    ok1 = bitwise(grads(car_only), grads(lambda: blended_loss(model, bags, 1.0)))
    report(5, "beta endpoints reproduce single-term gradients bitwise", ok0 and ok1,
           f"beta=0: {ok0}, beta=1: {ok1}")


def test_criterion_06_gae_reconstruction_auc():
    start = time.monotonic()
    bags = make_bags(as_dataset(generate(SynthConfig(n_slides=10, snr=2.0, seed=11))), k=8)
    cfg = TrainConfig(beta=1.0, learning_rate=0.001, epochs=200, seed=3, embed_dim=192)
    model = CarmilModel(cfg.model_config(32), 3)
    train_one(model, bags, cfg)
    aucs = [
        edge_auc(
            model.reconstruct(model.embed(constant(b.tiles.features), b.a_pre), b.a_pre).value,
            b.graph.adjacency,
        )
        for b in bags
    ]
    mean_auc = float(np.mean(aucs))
    elapsed = time.monotonic() - start
    report(
        6, "edge AUC after 200 reconstruction-only steps",
        mean_auc > 0.9 and elapsed < 120.0,
        f"mean auc {mean_auc:.4f} (>0.9), {elapsed:.0f}s (<120s)",
    )


def test_criterion_07_context_awareness_trend(trained_default_model):
    model, bags, train_time = trained_default_model
    start = time.monotonic()
    cfg = DeltaConConfig(k=8)
    wins = 0
    for b in bags:
        dcx = deltacon(b.graph, embedding_adjacency(b.tiles.features, 8), cfg).score
        dcz = deltacon(b.graph, embedding_adjacency(model.embed_value(b.tiles, b.graph), 8), cfg).score
        wins += dcz > dcx
    frac = wins / len(bags)
    elapsed = train_time + (time.monotonic() - start)
    report(
        7, "embedding graphs beat feature graphs per slide",
        frac >= 0.9 and elapsed < 600.0,
        f"fraction {frac:.3f} (>=0.9) over {len(bags)} slides, {elapsed:.0f}s (<600s)",
    )


def test_criterion_08_shuffle_ablation_degrades():
    slides = generate(SynthConfig(n_slides=80, tiles_per_slide=36, grid_side=6,
                                  feature_dim=16, seed=21))
    bags = make_bags(as_dataset(slides), k=8)
    train_bags, test_bags = bags[:56], bags[56:]
    assignment = {b.tiles.slide_id: i % 5 for i, b in enumerate(train_bags)}
    cfg = TrainConfig(beta=0.5, learning_rate=0.003, epochs=15, seed=2, head="meanpool")
    ensemble = train_ensemble(train_bags, assignment, cfg)
    deltas = []
    for s in range(5):
        c_orig, c_shuf = ablate_shuffle(ensemble, test_bags, seed=s)
        deltas.append(c_orig - c_shuf)
    mean_delta = float(np.mean(deltas))
    report(
        8, "graph shuffle at inference hurts concordance",
        mean_delta > 0.0,
        f"mean (orig - shuffled) {mean_delta:+.4f} over {len(deltas)} seeds (>0)",
    )


def _nested_cindex(master: int, use_encoder: bool, permute: bool) -> float:
    slides = generate(SynthConfig(n_slides=100, tiles_per_slide=36, grid_side=6,
                                  feature_dim=32, seed=master))
    ds = as_dataset(slides)
    if permute:
        ds = permute_labels(ds, seed=master + 1000)
    plan = make_cv_plan([t.slide_id for t, _ in ds], seed=master)
    cfg = TrainConfig(beta=0.5 if use_encoder else 0.0, use_encoder=use_encoder,
                      learning_rate=0.003, epochs=15, seed=master)
    out = run_nested_cv(ds, plan, cfg, learning_rates=(0.003,), epoch_grid=(15,))
    return out.report.cindex_mean


def test_criterion_09_regularization_beats_plain_meanpool():
    gaps, nulls_car, nulls_plain = [], [], []
    for master in (0, 1, 2):
        car = _nested_cindex(master, use_encoder=True, permute=False)
        plain = _nested_cindex(master, use_encoder=False, permute=False)
        gaps.append(car - plain)
        nulls_car.append(_nested_cindex(master, use_encoder=True, permute=True))
        nulls_plain.append(_nested_cindex(master, use_encoder=False, permute=True))
    gap = float(np.mean(gaps))
    null_car = float(np.mean(nulls_car))
    null_plain = float(np.mean(nulls_plain))
    nulls_ok = abs(null_car - 0.5) <= 0.1 and abs(null_plain - 0.5) <= 0.1
    report(
        9, "context-aware MeanPool beats raw-feature MeanPool in nested CV",
        gap > 0.01 and nulls_ok,
        f"mean gap {gap:+.4f} (>0.01) over 3 seeds; permuted-label means "
        f"{null_car:.3f}/{null_plain:.3f} (in 0.5 +/- 0.1)",
    )


def test_criterion_10_protocol_fidelity():
    slides = generate(SynthConfig(n_slides=30, tiles_per_slide=16, grid_side=4,
                                  feature_dim=6, snr=2.0, censoring_fraction=0.0,
                                  cluster_radius=2.5, seed=77))
    ds = as_dataset(slides)
    plan = make_cv_plan([t.slide_id for t, _ in ds], seed=7)
    cfg = TrainConfig(beta=0.5, learning_rate=0.01, epochs=2, k=4, seed=7)

    def run():
        return run_nested_cv(ds, plan, cfg, learning_rates=(0.01,), epoch_grid=(2,)).report

    r1, r2 = run(), run()
    structure_ok = len(r1.folds) == 5 and all(f.n_members == 15 for f in r1.folds)
    byte_ok = r1.to_json() == r2.to_json()
    covered = sorted(sid for f in r1.folds for sid in f.test_slides)
    partition_ok = covered == sorted(t.slide_id for t, _ in ds)
    report(
        10, "nested CV shape and byte-identical reruns",
        structure_ok and byte_ok and partition_ok,
        f"5 outer folds x 15 members: {structure_ok}, rerun identical: {byte_ok}, "
        f"test folds partition dataset: {partition_ok}",
    )


def test_criterion_11_cox_loss_properties():
    rng = np.random.default_rng(111)
    r = rng.normal(size=8)
    labels = [SurvivalLabel(t, bool(e)) for t, e in
              zip(rng.uniform(0.5, 5.0, 8), [1, 0, 1, 1, 0, 1, 1, 0])]

    def value(risks):
        return cox_loss(ad.stack_scalars([constant([[float(v)]]) for v in risks]), labels).value[0, 0]

    shift_err = abs(value(r) - value(r + 5.0))
    singleton = cox_loss(
        ad.stack_scalars([constant([[0.9]])]), [SurvivalLabel(1.0, True)]
    ).value[0, 0]
    two = cox_loss(
        ad.stack_scalars([constant([[0.4]]), constant([[0.4]])]),
        [SurvivalLabel(1.0, True), SurvivalLabel(2.0, True)],
    ).value[0, 0]
    pair_err = abs(two - np.log(2.0) / 2.0)
    report(
        11, "Cox loss properties",
        shift_err < 1e-10 and singleton == 0.0 and pair_err < 1e-12,
        f"shift invariance {shift_err:.2e} (<1e-10), singleton {singleton} (=0), "
        f"two-sample |err| {pair_err:.2e} (<1e-12)",
    )


def test_criterion_12_heatmap_trend(trained_default_model):
    model, bags, _ = trained_default_model
    bag = bags[0]
    y_features = mean_neighbor_distance(bag.tiles.features, bag.graph)
    y_encoder = mean_neighbor_distance(model.embed_value(bag.tiles, bag.graph), bag.graph)
    nx, nz = joint_normalize(y_features, y_encoder)
    report(
        12, "encoder heatmap flatter than feature heatmap",
        float(nz.mean()) < float(nx.mean()),
        f"normalized means: encoder {nz.mean():.4f} < features {nx.mean():.4f}",
    )
