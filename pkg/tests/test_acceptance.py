"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, shown in the terminal summary under
"acceptance criteria".  The two desk trainings run once per session.
"""
import json
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from demorph.biometric import DEFAULT_TAU, ToyComparator, is_match
from demorph.cli import main as cli_main
from demorph.imaging import build_scenario1_split, generate_dataset, identity_seeds, render_bonafide
from demorph.losses import (LossConfig, crossroad_loss, decomposition_loss, default_lambda,
                            final_loss)
from demorph.metrics import (component_leakage, fid_from_features, psnr, restoration_accuracy,
                             ssim)
from demorph.nets import DESK_NETWORK, PAPER_NETWORK, NetworkConfig, init_params, latent_shape
from demorph.training import desk_recipe, run_decomposition, run_demorph, train_decomposition, \
    train_demorph

from oracles import crossroad_loop, decomposition_loss_loop, final_loss_loop, ssim_naive
from test_losses import _gradient_relative_error, kink_free

SEED = 0
TAU = DEFAULT_TAU


def record(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


@pytest.fixture(scope="session")
def decomposition_run():
    images = [render_bonafide(p, 0, 64) for p in identity_seeds(16, SEED)]
    start = time.process_time()
    report = train_decomposition(desk_recipe("decomposition", epochs=400, seed=SEED), images)
    return images, report, time.process_time() - start


@pytest.fixture(scope="session")
def demorph_run():
    samples = generate_dataset(6, 1, [0.5], 64, seed=SEED)
    split = build_scenario1_split(samples, 0.6, seed=SEED)
    start = time.process_time()
    report = train_demorph(desk_recipe("demorphing", epochs=400, seed=SEED), split)
    return samples, split, report, time.process_time() - start


def test_criterion_01_loss_correctness():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(101)
    cfg = LossConfig(k=3)
    worst = 0.0
    for _ in range(50):
        morph, rec, o1, o2, b1, b2, *comps = [
            torch.rand(3, 8, 8, generator=gen, dtype=torch.float64) for _ in range(9)]
        pairs = [
            (decomposition_loss(morph, rec, comps, cfg).item(),
             decomposition_loss_loop(morph, rec, comps, 0.25)),
            (crossroad_loss(o1, o2, b1, b2).item(), crossroad_loop(o1, o2, b1, b2)),
            (final_loss(morph, o1, o2, b1, b2, comps, cfg).item(),
             final_loss_loop(morph, o1, o2, b1, b2, comps, 0.25)),
        ]
        worst = max(worst, *(abs(a - b) for a, b in pairs))
    tensors = kink_free(torch.Generator().manual_seed(102), 8)
    grad_errors = [
        _gradient_relative_error(lambda i, r, a, b, c: decomposition_loss(i, r, [a, b, c], cfg),
                                 tensors[:5]),
        _gradient_relative_error(crossroad_loss, tensors[:4]),
        _gradient_relative_error(
            lambda m, p, q, x, y, a, b, c: final_loss(m, p, q, x, y, [a, b, c], cfg), tensors),
    ]
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and max(grad_errors) < 1e-3 and elapsed < 60
    record(1, ok, f"max oracle gap {worst:.1e} (<=1e-10), max grad rel err "
                  f"{max(grad_errors):.1e} (<1e-3), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_02_crossroad_invariances():
    gen = torch.Generator().manual_seed(202)
    ok = True
    for _ in range(100):
        o1, o2, b1, b2 = (torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
                          for _ in range(4))
        base = crossroad_loss(o1, o2, b1, b2).item()
        ok &= crossroad_loss(o2, o1, b1, b2).item() == base
        ok &= crossroad_loss(o1, o2, b2, b1).item() == base
        ok &= crossroad_loss(b1, b2, b1, b2).item() == 0.0
        ok &= crossroad_loss(b2, b1, b1, b2).item() == 0.0
    record(2, ok, "exact zero at recovery and exact swap invariance on 100 instances")
    assert ok


def test_criterion_03_lambda_rule():
    value = default_lambda(3)
    ok = value == 0.25 and LossConfig(k=3).lambda_ == 0.25
    record(3, ok, f"default_lambda(3) = {value!r}")
    assert ok


def test_criterion_04_shape_contract():
    paper = latent_shape(PAPER_NETWORK)
    desk = latent_shape(DESK_NETWORK)
    net = NetworkConfig(k=3, resolution=64, base_channels=16, heads=2)
    dec, mer = init_params(net, SEED)
    morph = render_bonafide(identity_seeds(1, SEED)[0], 0, 64)
    ((o1, o2, comps),) = run_demorph(dec, mer, [morph])
    ok = (paper == (1024, 14, 14) and desk == (256, 4, 4) and len(comps) == 3
          and all(c.shape == morph.shape for c in comps)
          and o1.shape == o2.shape == morph.shape)
    record(4, ok, f"paper latent {paper}, desk latent {desk}, {len(comps)} components, "
                  f"outputs {o1.shape}")
    assert ok


def test_criterion_05_decomposition_overfit(decomposition_run):
    images, report, cpu = decomposition_run
    comps, recon = run_decomposition(report.decomposer, report.merger, images)
    cmp = ToyComparator()
    rate = float(np.mean([is_match(cmp, a, r, TAU)[1] for a, r in zip(images, recon)]))
    l1_recon = float(np.mean([np.abs(a - r).mean() for a, r in zip(images, recon)]))
    l1_comp = [float(np.mean([np.abs(a - c[i]).mean() for a, c in zip(images, comps)]))
               for i in range(3)]
    ok = rate >= 0.95 and all(v > l1_recon for v in l1_comp) and cpu < 20 * 60
    record(5, ok, f"reconstruction match {rate:.3f} (>=0.95), l1(I,I_hat) {l1_recon:.4f} < "
                  f"l1(I,I_i) {[round(v, 4) for v in l1_comp]}, {cpu / 60:.1f} CPU-min (<20)")
    assert ok


def test_criterion_06_leakage(decomposition_run):
    images, report, _ = decomposition_run
    leak = component_leakage(report.decomposer, report.merger, images, ToyComparator(), TAU)
    ok = all(r <= 0.25 for r in leak.rates) and leak.reconstruction_rate >= 0.90
    record(6, ok, f"leak rates {[round(r, 3) for r in leak.rates]} (each <=0.25), "
                  f"full reconstruction {leak.reconstruction_rate:.3f} (>=0.90)")
    assert ok


def test_criterion_07_demorphing(demorph_run):
    _, split, report, cpu = demorph_run
    outputs = run_demorph(report.decomposer, report.merger, [s.morph for s in split.test])
    acc1, acc2, records = restoration_accuracy(
        [(o1, o2, s.bonafide1, s.bonafide2) for (o1, o2, _), s in zip(outputs, split.test)],
        ToyComparator(), TAU)
    # the rule: a subject counts only if its output matches it and not the other bonafide
    for r in records:
        out = ("o1", "o2") if r.pairing == "natural" else ("o2", "o1")
        for s, o in enumerate(out, start=1):
            sims = r.similarities
            assert r.correct[s - 1] == (sims[f"{o}_b{s}"] > TAU and not sims[f"{o}_b{3 - s}"] > TAU)
    train_out = run_demorph(report.decomposer, report.merger, [s.morph for s in split.train])
    train_acc = restoration_accuracy(
        [(o1, o2, s.bonafide1, s.bonafide2) for (o1, o2, _), s in zip(train_out, split.train)],
        ToyComparator(), TAU)[:2]
    train_crossroad = crossroad_loss(
        *(torch.as_tensor(np.stack(x)) for x in (
            [o[0] for o in train_out], [o[1] for o in train_out],
            [s.bonafide1 for s in split.train], [s.bonafide2 for s in split.train]))).item()
    ok = acc1 >= 0.90 and acc2 >= 0.90 and cpu < 30 * 60
    record(7, ok, f"test restoration subject1 {acc1:.3f}, subject2 {acc2:.3f} (both >=0.90) on "
                  f"{len(split.test)} held-out morphs; train restoration {train_acc[0]:.3f}/"
                  f"{train_acc[1]:.3f} on {len(split.train)}, train cross-road "
                  f"{train_crossroad:.4f}; {cpu / 60:.1f} CPU-min (<30)")
    assert ok


def test_criterion_08_non_morph_behaviour(demorph_run):
    _, _, report, _ = demorph_run
    # 20 bonafides of identities the demorpher never saw
    faces = [render_bonafide(p, 0, 64) for p in identity_seeds(20, SEED + 1000)]
    outputs = run_demorph(report.decomposer, report.merger, faces)
    cmp = ToyComparator()
    both = [is_match(cmp, o1, f, TAU)[1] and is_match(cmp, o2, f, TAU)[1]
            for (o1, o2, _), f in zip(outputs, faces)]
    rate = float(np.mean(both))
    ok = rate >= 0.90
    record(8, ok, f"both outputs match the non-morph input in {rate:.3f} of 20 cases (>=0.90)")
    assert ok


def test_criterion_09_metric_self_tests():
    rng = np.random.default_rng(909)
    a = rng.random((3, 64, 64))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    s_same, p_same = ssim(a, a), psnr(a, a)
    feats = rng.standard_normal((80, 8))
    d = rng.standard_normal(8)
    fid_same = fid_from_features(feats, feats)
    fid_shift = fid_from_features(feats, feats + d)
    small_a, small_b = a[:, :20, :24], b[:, :20, :24]
    ssim_gap = abs(ssim(small_a, small_b) - ssim_naive(small_a, small_b))
    ok = (abs(s_same - 1.0) <= 1e-12 and p_same == 100.0 and abs(fid_same) <= 1e-6
          and abs(fid_shift - d @ d) <= 1e-4 and ssim_gap <= 1e-6)
    record(9, ok, f"ssim(A,A)={s_same:.12f} psnr cap={p_same} fid(S,S)={fid_same:.1e} "
                  f"shift gap={abs(fid_shift - d @ d):.1e} ssim oracle gap={ssim_gap:.1e}")
    assert ok


REPRO_EPOCHS = 20


def _pipeline(root, capsys):
    root.mkdir()
    cfg = root / "config.json"
    cfg.write_text(json.dumps({"seed": SEED, "output_dir": str(root / "runs"),
                               "data": {"n_identities": 6},
                               "train": {"mode": "demorphing", "epochs": REPRO_EPOCHS}}))
    steps = [["gen-data", "--config", str(cfg), "--out", str(root / "data")]]
    steps.append(["train", "--config", str(cfg), "--data", str(root / "data/manifest.json"),
                  "--run-dir", str(root / "train")])
    steps.append(["evaluate", "--config", str(cfg), "--data", str(root / "data/manifest.json"),
                  "--checkpoint", str(root / "train/checkpoints/final"),
                  "--run-dir", str(root / "eval")])
    for argv in steps:
        assert cli_main(argv) == 0
    capsys.readouterr()
    return (root / "eval" / "report.json").read_bytes()


def test_criterion_10_reproducibility(tmp_path, capsys):
    first = _pipeline(tmp_path / "one", capsys)
    second = _pipeline(tmp_path / "two", capsys)
    ok = first == second
    record(10, ok, f"gen-data -> train ({REPRO_EPOCHS} epochs, desk net) -> evaluate twice: "
                   f"reports {'identical' if ok else 'differ'} ({len(first)} bytes)")
    assert ok
