"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.
"""
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from aegem import autodiff as ad
from aegem.autoencoder import (AutoencoderConfig, ConvAutoencoder,
                               endmembers_from_decoder, patch_centers,
                               _padded_windows, patch_validity_masks,
                               reconstruction_loss)
from aegem.cli import main
from aegem.gcn import GcnConfig, GcnModel, bce_with_logits, forward, normalized_operator
from aegem.graph import (build_graph, build_kernel, laplacian,
                         normalized_laplacian, rbf_adjacency)
from aegem.hsi import HsiCube, SceneSpec, normalize, synthesize_scene
from aegem.metrics import sad
from aegem.pipeline import RunConfig, run_pipeline, write_config
from aegem.rng import SplitMix64

from oracles import ellipse_offsets_bruteforce, fcls_abundances, gradcheck

ACCEPTANCE_SCENE = SceneSpec(32, 32, 20, 3, snr_db=float("inf"), seed=0)
ACCEPTANCE_AE = AutoencoderConfig(encoder_filters=(32, 16, 8, 3),
                                  encoder_kernels=(5, 3, 3, 1),
                                  epochs=20, batch_size=64, learning_rate=1e-3)
ACCEPTANCE_GCN = GcnConfig(hidden=128, epochs=600, label_fraction=0.1)


def _line(criterion: str, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{criterion}: {detail}"


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    rc = RunConfig(scene=ACCEPTANCE_SCENE, ae=ACCEPTANCE_AE, gcn=ACCEPTANCE_GCN,
                   kernel_a=3, kernel_b=5,
                   out_dir=str(tmp_path_factory.mktemp("acceptance")), seed=0)
    t0 = time.perf_counter()
    report, out_dir = run_pipeline(rc, log=None)
    return report, out_dir, time.perf_counter() - t0


# -- criterion 1: gradient suite ------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    g = np.random.default_rng(101)
    worst = 0.0

    for i in range(20):
        # conv2d, both paddings, with bias
        x = g.uniform(-1, 1, size=(1, 2, 5, 5))
        w = g.uniform(-1, 1, size=(2, 2, 3, 3))
        b = g.uniform(-1, 1, size=2)
        proj = g.normal(size=(1, 2, 5, 5))
        pad = "same" if i % 2 else "valid"
        pshape = (1, 2, 5, 5) if pad == "same" else (1, 2, 3, 3)
        pr = g.normal(size=pshape)
        worst = max(worst, gradcheck(
            lambda xt, wt, bt: (ad.conv2d(xt, wt, bt, pad) * pr).sum(), [x, w, b]))

        # batch norm, train and inference modes
        xb = g.uniform(-1, 1, size=(3, 2, 3, 3))
        gamma = g.uniform(0.5, 1.5, size=2)
        beta = g.uniform(-0.5, 0.5, size=2)
        projb = g.normal(size=(3, 2, 3, 3))
        train = bool(i % 2)

        def bn_loss(xt, gt, bt):
            state = ad.BatchNormState(2)
            state.gamma, state.beta = gt, bt
            state.running_mean = np.array([0.05, -0.1])
            state.running_var = np.array([0.8, 1.2])
            return (ad.batch_norm(xt, state, train=train) * projb).sum()

        worst = max(worst, gradcheck(bn_loss, [xb, gamma, beta]))

        # activations and softmax
        xa = g.uniform(-0.9, 0.9, size=(3, 4))
        xa[np.abs(xa) < 1e-3] = 0.4
        pa = g.normal(size=(3, 4))
        worst = max(worst, gradcheck(lambda t: (ad.relu(t) * pa).sum(), [xa]))
        worst = max(worst, gradcheck(lambda t: (ad.leaky_relu(t, 0.01) * pa).sum(), [xa]))
        worst = max(worst, gradcheck(lambda t: (ad.sigmoid(t) * pa).sum(), [xa]))
        worst = max(worst, gradcheck(
            lambda t: (ad.scaled_softmax(t, 5.0, axis=1) * pa).sum(), [xa]))

        # GCN layers through the sparse operator
        cube = HsiCube(g.uniform(0.05, 1, size=(3, 4, 3)))
        op = normalized_operator(build_graph(cube, 1, 1))
        y = g.uniform(-1, 1, size=(12, 3))
        t_lab = g.uniform(0.1, 0.9, size=(12, 2))
        w1 = g.uniform(-1, 1, size=(3, 4))
        w2 = g.uniform(-1, 1, size=(4, 2))

        def gcn_loss(w1t, w2t):
            h = ad.relu(ad.sparse_matmul(op, ad.Tensor(y)) @ w1t)
            return bce_with_logits(ad.sparse_matmul(op, h) @ w2t, t_lab)

        worst = max(worst, gradcheck(gcn_loss, [w1, w2]))

        # autoencoder training loss (spectral angle + masked MSE)
        patch = g.uniform(0.05, 1, size=(2, 3, 5, 5))
        recon0 = g.uniform(0.05, 1, size=(2, 3, 5, 5))
        mask = np.ones((2, 1, 5, 5))
        mask[0, 0, :2] = 0.0
        worst = max(worst, gradcheck(
            lambda rt: reconstruction_loss(ad.Tensor(patch), rt, "sad_plus_mse",
                                           0.5, mask), [recon0]))

    elapsed = time.perf_counter() - t0
    _line("criterion-1 gradient-suite", worst <= 1e-6 and elapsed < 60,
          f"max rel err {worst:.2e}, {elapsed:.1f}s")


# -- criterion 2: constraint suite ----------------------------------------------------

def test_criterion_2_constraint_suite():
    g = np.random.default_rng(102)
    config = AutoencoderConfig(encoder_filters=(6, 4, 4, 3), encoder_kernels=(5, 3, 3, 1))
    worst_sum = 0.0
    worst_min = 1.0
    # 1000 encoder outputs across 10 random-weight models
    for trial in range(10):
        model = ConvAutoencoder(config, 4, SplitMix64(trial))
        for w in model.enc_weights:
            w.data = g.normal(size=w.shape)
        x = g.normal(size=(100, 4, 9, 9))
        with ad.no_grad():
            out = model.encode(x).data
        center = out[:, :, 4, 4]
        worst_sum = max(worst_sum, float(np.max(np.abs(center.sum(axis=1) - 1.0))))
        worst_min = min(worst_min, float(center.min()))

    # GCN forward sums
    cube = HsiCube(g.uniform(0.05, 1, size=(8, 8, 5)))
    op = normalized_operator(build_graph(cube, 2, 2))
    worst_gcn = 0.0
    for trial in range(50):
        model = GcnModel(op, 4, 8, 3, SplitMix64(1000 + trial))
        out = forward(model, g.normal(size=(64, 4)))
        worst_gcn = max(worst_gcn, float(np.max(np.abs(out.sum(axis=1) - 1.0))))

    # endmember non-negativity after every epoch of a real training loop
    cube, _ = synthesize_scene(SceneSpec(12, 12, 8, 3, smoothness=1.0, seed=5))
    ncube = normalize(cube)
    cfg = AutoencoderConfig(encoder_filters=(6, 4, 4, 3), encoder_kernels=(5, 3, 3, 1),
                            epochs=5, batch_size=64, seed=6)
    model = ConvAutoencoder(cfg, 8, SplitMix64(6))
    model.seed_decoder_columns(ncube.spectra())
    centers = patch_centers(12, 12, 1)
    win = _padded_windows(ncube, 9)
    masks = patch_validity_masks(12, 12, 9)
    opt = ad.Adam(model.parameters(), lr=cfg.learning_rate)
    shuffle = SplitMix64(7)
    min_endmember = 1.0
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(centers))
        for s in range(0, len(centers), cfg.batch_size):
            sel = centers[order[s : s + cfg.batch_size]]
            batch = ad.Tensor(np.ascontiguousarray(win[sel[:, 0], sel[:, 1]]))
            valid = masks[sel[:, 0], sel[:, 1]][:, None]
            _, recon = model.forward(batch, train=True)
            loss = reconstruction_loss(batch, recon, cfg.loss, cfg.mse_weight, valid)
            opt.step(ad.backward(loss))
            model.clamp_decoder()
        min_endmember = min(min_endmember, float(endmembers_from_decoder(model).min()))

    ok = worst_sum <= 1e-12 and worst_min >= 0.0 and worst_gcn <= 1e-9 and min_endmember >= 0.0
    _line("criterion-2 constraint-suite", ok,
          f"encoder sum err {worst_sum:.2e}, min {worst_min:.2e}, "
          f"gcn sum err {worst_gcn:.2e}, endmember min {min_endmember:.2e}")


# -- criterion 3: graph suite ---------------------------------------------------------

def test_criterion_3_graph_suite():
    # ellipse masks equal brute force on [1,6]^2
    masks_ok = all(
        set(build_kernel(a, b).offsets) == ellipse_offsets_bruteforce(a, b)
        for a in range(1, 7) for b in range(1, 7)
    )

    g = np.random.default_rng(103)
    # SAD edge weights: symmetric, scale-invariant, within [0, pi/2]
    cube = HsiCube(g.uniform(0.05, 1.0, size=(10, 10, 6)))
    graph = build_graph(cube, 2, 3)
    scaled = build_graph(HsiCube(cube.reflectance * 7.3), 2, 3)
    lookup = {(int(s), int(r)): w for (s, r), w in zip(graph.edges, graph.edge_weights)}
    sym_ok = all(abs(lookup[(r, s)] - w) < 1e-14
                 for (s, r), w in lookup.items() if (r, s) in lookup)
    weights_ok = (graph.edge_weights.min() >= 0.0
                  and graph.edge_weights.max() <= np.pi / 2 + 1e-12
                  and np.allclose(graph.edge_weights, scaled.edge_weights, atol=1e-12))

    # Laplacian row sums and normalized-Laplacian spectrum on 50 random graphs
    lap_ok = True
    eig_ok = True
    for trial in range(50):
        n = int(g.integers(5, 201))
        vecs = g.uniform(0, 1, size=(n, 4))
        a = rbf_adjacency(vecs, sigma=float(g.uniform(0.5, 2.0)))
        np.fill_diagonal(a, 0.0)
        a[g.uniform(size=(n, n)) < 0.5] = 0.0
        a = np.minimum(a, a.T)  # keep symmetric after sparsification
        lap_ok &= float(np.max(np.abs(laplacian(a).sum(axis=1)))) <= 1e-12
        evals = np.linalg.eigvalsh(normalized_laplacian(a))
        eig_ok &= evals.min() >= -1e-9 and evals.max() <= 2.0 + 1e-9

    ok = masks_ok and sym_ok and weights_ok and lap_ok and eig_ok
    _line("criterion-3 graph-suite", ok,
          f"masks={masks_ok} sad_sym={sym_ok} sad_range={weights_ok} "
          f"laplacian={lap_ok} eigenvalues={eig_ok}")


# -- criterion 4: synthetic recovery --------------------------------------------------

def test_criterion_4_synthetic_recovery(pipeline_run):
    report, out_dir, elapsed = pipeline_run
    # solvability gate: least squares with the true endmembers
    cube, truth = synthesize_scene(ACCEPTANCE_SCENE)
    ncube = normalize(cube)
    scale = cube.reflectance.max()
    oracle = fcls_abundances(ncube.spectra(), truth.endmembers / scale)
    oracle_rmse = float(np.sqrt(np.mean(
        (oracle.reshape(truth.abundances.shape) - truth.abundances) ** 2)))
    assert oracle_rmse <= 0.02, f"scene not solvable: oracle rmse {oracle_rmse}"

    ok = report.mean_rmse <= 0.15 and report.mean_sad <= 0.15 and elapsed <= 600
    _line("criterion-4 synthetic-recovery", ok,
          f"oracle rmse {oracle_rmse:.2e}, mean rmse {report.mean_rmse:.4f}, "
          f"mean sad {report.mean_sad:.4f}, {elapsed:.0f}s")


# -- criterion 5: ensemble optimality --------------------------------------------------

def test_criterion_5_ensemble_optimality(pipeline_run):
    report, _, _ = pipeline_run
    min_ok = np.allclose(report.val_rmse_final,
                         np.minimum(report.val_rmse_ae, report.val_rmse_gcn),
                         atol=1e-15)
    perturb = float(np.max(np.abs(report.val_rmse_final_renorm - report.val_rmse_final)))
    _line("criterion-5 ensemble-optimality", min_ok and perturb < 1e-6,
          f"per-channel min holds={min_ok}, renorm perturbation {perturb:.2e}")


# -- criterion 6: determinism ----------------------------------------------------------

def test_criterion_6_run_determinism(tmp_path):
    rc = RunConfig(
        scene=SceneSpec(16, 16, 10, 2, smoothness=1.2, snr_db=float("inf")),
        ae=AutoencoderConfig(encoder_filters=(8, 4, 4, 2), encoder_kernels=(5, 3, 3, 1),
                             epochs=4, batch_size=128, learning_rate=3e-3),
        gcn=GcnConfig(hidden=32, epochs=100, label_fraction=0.15),
        kernel_a=2, kernel_b=2, out_dir=str(tmp_path / "x"), seed=42)
    cfg = tmp_path / "c.ini"
    write_config(rc, cfg)
    blobs = []
    for sub in ("a", "b"):
        code = main(["run", "--config", str(cfg), "--seed", "42",
                     "--out", str(tmp_path / sub)])
        assert code == 0
        blobs.append((tmp_path / sub / "metrics.csv").read_bytes())
    _line("criterion-6 determinism", blobs[0] == blobs[1],
          f"metrics CSVs identical over two seeded runs ({len(blobs[0])} bytes)")


# -- criterion 7: optional benchmark ----------------------------------------------------

def test_criterion_7_samson_best_effort(tmp_path):
    path = os.environ.get("AEGEM_SAMSON_HSB")
    if not path:
        pytest.skip("set AEGEM_SAMSON_HSB to a 95x95x156 HSB cube (plus "
                    "truth_endmembers.csv/truth_abundances.csv beside it) to run")
    cube_path = Path(path)
    rc = RunConfig(
        input_path=str(cube_path),
        truth_endmembers=str(cube_path.parent / "truth_endmembers.csv"),
        truth_abundances=str(cube_path.parent / "truth_abundances.csv"),
        out_dir=str(tmp_path / "samson"), seed=0, repeat=10)
    from aegem.pipeline import run_repeated, samson_reference_text
    reports = run_repeated(rc, log=None)
    print(samson_reference_text())
    _line("criterion-7 samson-best-effort", len(reports) == 10,
          f"10-run mean rmse {np.mean([r.mean_rmse for r in reports]):.3f}")
