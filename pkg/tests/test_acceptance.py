"""Acceptance criteria 1-9, one verdict line each (see the summary section of the pytest run).

Tolerances are pinned to the published criteria; nothing here is loosened to make a run pass.
"""
import math
import time

import numpy as np
import pytest

from nalsuper import attention as A
from nalsuper.cli import main
from nalsuper.imageio import quantize, read_image, write_image
from nalsuper.losses import mae, psnr, ssim
from nalsuper.network import (
    ModelConfig,
    checkpoint_bytes,
    forward,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from nalsuper.tensor import Tensor
from nalsuper.text import DEFAULT_PROMPTS, embed_prompts, init_tcm, load_embeddings, tcm_attention, write_embeddings
from nalsuper.training import evaluate, make_synthetic, train
from nalsuper.verify import MODEL_TOLERANCE, OP_CASES, OP_TOLERANCE, PRIMITIVE_OPS, op_tolerance

pytestmark = pytest.mark.slow

OVERFIT_STEPS = 1500
OVERFIT_LR = 1e-4
DATA_SEED = 7
ABLATION_SEEDS = (7, 8, 9)


def overfit_model(seed: int):
    cfg = ModelConfig(channels=8, num_blocks=3, seed=seed)
    return init_model(cfg, embed_prompts(DEFAULT_PROMPTS, cfg.d_tau, seed))


def overfit_run(seed: int, loss: str):
    pairs = make_synthetic(4, 32, seed=DATA_SEED)
    model = overfit_model(seed)
    embed_before = model.embeddings.matrix(np.float32).tobytes()
    text_before = model.text().data.tobytes()
    start = time.perf_counter()
    run = train(model, pairs, loss, steps=OVERFIT_STEPS, seed=seed, lr=OVERFIT_LR)
    elapsed = time.perf_counter() - start
    report = evaluate(model, pairs)
    return {
        "run": run,
        "model": model,
        "pairs": pairs,
        "elapsed": elapsed,
        "ssim": report.mean_ssim,
        "psnr": report.mean_psnr,
        "embeddings_unchanged": model.embeddings.matrix(np.float32).tobytes() == embed_before
        and model.text().data.tobytes() == text_before,
    }


@pytest.fixture(scope="module")
def overfit():
    return overfit_run(7, "l1+ssim")


def test_criterion_1_gradient_correctness(verdict, capsys):
    start = time.perf_counter()
    rc = main(["gradcheck", "--channels", "4", "--blocks", "2", "--size", "8"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    rows = {}
    for line in out.splitlines()[1:]:
        parts = line.split()
        if parts and parts[0] in OP_CASES:
            rows[parts[0]] = float(parts[1])
        elif line.startswith("model"):
            rows["model"] = float(parts[3])
    assert set(rows) == set(OP_CASES) | {"model"}
    composites = [n for n in OP_CASES if n not in PRIMITIVE_OPS]
    primitives_ok = all(rows[n] < OP_TOLERANCE for n in PRIMITIVE_OPS)
    composites_ok = all(rows[n] < op_tolerance(n) for n in composites)
    worst_prim = max(PRIMITIVE_OPS, key=lambda n: rows[n])
    worst_comp = max(composites, key=lambda n: rows[n])
    ok = rc == 0 and primitives_ok and composites_ok and rows["model"] < MODEL_TOLERANCE and elapsed < 60.0
    assert verdict(
        "1",
        ok,
        f"model max rel err {rows['model']:.2e} (< {MODEL_TOLERANCE:g}); {len(PRIMITIVE_OPS)} primitive ops, "
        f"worst {worst_prim} {rows[worst_prim]:.2e} (< {OP_TOLERANCE:g}); {len(composites)} composite cases, worst "
        f"{worst_comp} {rows[worst_comp]:.2e} (< {op_tolerance(worst_comp):g}); runtime {elapsed:.1f}s (< 60s)",
    )


def test_criterion_2_attention_rows_sum_to_one(verdict):
    worst_tcm = worst_cafb = 0.0
    instances = 60
    for seed in range(instances):
        rng = np.random.default_rng(1000 + seed)
        c = int(rng.integers(1, 6))
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        m = int(rng.integers(1, 5))
        d, d_tau = int(rng.integers(2, 17)), int(rng.integers(2, 33))
        tcm = init_tcm(c, d, d_tau, m, rng)
        tcm.bias.data[...] = rng.normal(scale=2.0, size=tcm.bias.shape)
        _, weights = tcm_attention(Tensor(rng.normal(scale=3.0, size=(c, h, w))), Tensor(rng.normal(size=(m, d_tau))), tcm)
        assert weights.shape == (h * w, m)
        worst_tcm = max(worst_tcm, float(np.abs(weights.data.sum(axis=1) - 1).max()))
        p = A.init_cafb(c, rng, learnable_delta=bool(seed % 2))
        _, attn = A.layer_attention(Tensor(rng.normal(scale=3.0, size=(3 * c, h, w))), p)
        assert attn.shape == (3, 3)
        worst_cafb = max(worst_cafb, float(np.abs(attn.data.sum(axis=1) - 1).max()))
    ok = worst_tcm <= 1e-6 and worst_cafb <= 1e-6
    assert verdict("2", ok, f"{instances} instances; max |row sum - 1| TCM {worst_tcm:.1e}, CAFB 3x3 {worst_cafb:.1e} (<= 1e-6)")


def test_criterion_3_identity_at_init(verdict, tmp_path):
    cfg = ModelConfig(channels=8, num_blocks=3, dtype="float64")
    model = init_model(cfg, embed_prompts(DEFAULT_PROMPTS, cfg.d_tau))
    rng = np.random.default_rng(3)
    bitwise = 0
    for _ in range(10):
        x = rng.uniform(0, 1, (3, int(rng.integers(3, 20)), int(rng.integers(3, 20))))
        bitwise += int(np.array_equal(forward(model, x).data, x))

    save_checkpoint(init_model(ModelConfig(), embed_prompts(DEFAULT_PROMPTS, 32)), tmp_path / "fresh.nlsc")
    pixels = rng.integers(0, 256, (24, 31, 3), dtype=np.uint8)
    write_image(tmp_path / "in.png", pixels.transpose(2, 0, 1) / 255.0)
    rc = main(["enhance", "--ckpt", str(tmp_path / "fresh.nlsc"), "--input", str(tmp_path / "in.png"),
               "--output", str(tmp_path / "out.png")])
    byte_exact = rc == 0 and np.array_equal(quantize(read_image(tmp_path / "out.png")), pixels)
    ok = bitwise == 10 and byte_exact
    assert verdict("3", ok, f"{bitwise}/10 inputs bitwise identical (float64); CLI enhance byte-exact: {byte_exact}")


def test_criterion_4_metric_oracles(verdict):
    x = np.full((3, 16, 16), 0.4)
    psnr_err = abs(psnr(x + 0.1, x) - 20.0)
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (3, 16, 16))
    ssim_err = abs(ssim(img, img) - 1.0)
    mae_err = 0.0
    for _ in range(20):
        a, b = rng.uniform(0, 1, (3, 6, 5)), rng.uniform(0, 1, (3, 6, 5))
        acc = 0.0
        for v, u in zip(a.ravel().tolist(), b.ravel().tolist()):
            acc += abs(v - u)
        mae_err = max(mae_err, abs(mae(a, b) - acc / a.size))
    ok = psnr_err <= 1e-9 and ssim_err <= 1e-9 and mae_err <= 1e-12
    assert verdict("4", ok, f"|PSNR-20| {psnr_err:.1e} (<= 1e-9); |SSIM(x,x)-1| {ssim_err:.1e} (<= 1e-9); "
                            f"MAE vs loop {mae_err:.1e} over 20 pairs (<= 1e-12)")


def test_criterion_5_overfit(verdict, overfit):
    run = overfit["run"]
    ratio = run.final_loss / run.initial_loss
    low_psnr = float(np.mean([psnr(p.low, p.gt) for p in overfit["pairs"]]))
    gain = overfit["psnr"] - low_psnr
    finite = all(math.isfinite(v) for row in run.trace for v in row[1:])
    ok = ratio < 0.1 and gain >= 5.0 and finite and len(run.trace) == OVERFIT_STEPS and overfit["elapsed"] < 600
    assert verdict(
        "5",
        ok,
        f"loss {run.initial_loss:.4f} -> {run.final_loss:.4f} (ratio {ratio:.3f} < 0.1); PSNR {low_psnr:.2f} -> "
        f"{overfit['psnr']:.2f} dB (gain {gain:.2f} >= 5); trace finite: {finite}; {overfit['elapsed']:.0f}s (< 600s)",
    )


def test_criterion_6_loss_ablation(verdict, overfit):
    both = [overfit["ssim"]] + [overfit_run(s, "l1+ssim")["ssim"] for s in ABLATION_SEEDS[1:]]
    l1 = [overfit_run(s, "l1")["ssim"] for s in ABLATION_SEEDS]
    med_both, med_l1 = float(np.median(both)), float(np.median(l1))
    ok = med_both >= med_l1 - 0.01
    assert verdict(
        "6",
        ok,
        f"median SSIM l1+ssim {med_both:.4f} vs l1 {med_l1:.4f} (need >= l1 - 0.01); "
        f"per seed {ABLATION_SEEDS}: l1+ssim {[round(v, 4) for v in both]}, l1 {[round(v, 4) for v in l1]}",
    )


def test_criterion_7_block_count(verdict):
    pairs = make_synthetic(2, 32, seed=DATA_SEED)
    details, ok = [], True
    for n in (3, 5, 8):
        cfg = ModelConfig(channels=8, num_blocks=n, seed=7)
        model = init_model(cfg, embed_prompts(DEFAULT_PROMPTS, cfg.d_tau, 7))
        run = train(model, pairs, steps=20, seed=7, lr=OVERFIT_LR)
        expected = parameter_count(8, n, cfg.attention_dim, cfg.d_tau, len(DEFAULT_PROMPTS))
        finite = all(math.isfinite(r[1]) for r in run.trace) and math.isfinite(run.final_loss)
        ok &= model.num_parameters() == expected and finite and len(run.trace) == 20
        details.append(f"N={n}: {model.num_parameters()} params (closed form {expected}), final loss {run.final_loss:.4f}")
    assert verdict("7", ok, "; ".join(details))


def test_criterion_8_determinism_and_persistence(verdict, tmp_path):
    pairs = make_synthetic(2, 32, seed=3)
    blobs, models = [], []
    for i in range(2):
        cfg = ModelConfig(channels=4, num_blocks=2, seed=11)
        model = init_model(cfg, embed_prompts(DEFAULT_PROMPTS, cfg.d_tau, 11))
        train(model, pairs, steps=40, seed=11, lr=1e-3, checkpoint_path=tmp_path / f"run{i}.nlsc")
        blobs.append((tmp_path / f"run{i}.nlsc").read_bytes())
        models.append(model)
    same_ckpt = blobs[0] == blobs[1]

    loaded = load_checkpoint(tmp_path / "run0.nlsc")
    x = np.random.default_rng(8).uniform(0, 1, (3, 20, 20))
    forward_same = np.array_equal(forward(loaded, x).data, forward(models[0], x).data)
    resave_same = checkpoint_bytes(loaded) == blobs[0]

    emb = embed_prompts(list(DEFAULT_PROMPTS) + ["a dim indoor scene"], 32, seed=5)
    write_embeddings(emb, tmp_path / "e.nlse")
    back = load_embeddings(tmp_path / "e.nlse")
    write_embeddings(back, tmp_path / "e2.nlse")
    nlse_same = (
        back.prompts == emb.prompts
        and back.matrix(np.float32).tobytes() == emb.matrix(np.float32).tobytes()
        and (tmp_path / "e.nlse").read_bytes() == (tmp_path / "e2.nlse").read_bytes()
    )
    ok = same_ckpt and forward_same and resave_same and nlse_same
    assert verdict(
        "8",
        ok,
        f"repeat-run checkpoints identical: {same_ckpt}; load round-trip forward bitwise: {forward_same}; "
        f"re-save identical: {resave_same}; NLSE round-trip bitwise: {nlse_same}",
    )


def test_criterion_9_frozen_text(verdict, overfit):
    ok = overfit["embeddings_unchanged"]
    assert verdict("9", ok, f"embedding buffers bit-identical after the {OVERFIT_STEPS}-step criterion-5 run: {ok}")
